use super::param::ParamStore;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes disagreeing by more than this (relative) mark a kink.
pub const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub non_smooth: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic parameter gradients with central finite differences.
///
/// `loss(store, with_grad)` must return the scalar loss and, when
/// `with_grad` is set, accumulate analytic gradients into `store` (the
/// checker clears them first). Every coordinate of every parameter is
/// probed. A coordinate fails when its relative error exceeds `rel_tol`
/// or its forward and backward slopes disagree (a non-smooth point).
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, rel_tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    store.zero_grad();
    let f0 = loss(store, true)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec)
        })
        .collect();
    store.zero_grad();

    let mut report = GradCheckReport::default();
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let id = super::param::ParamId(pi);
            let orig = store.value(id).data()[k];
            store.get_mut(id).tensor.data_mut()[k] = orig + FD_STEP;
            let fp = loss(store, false)?;
            store.get_mut(id).tensor.data_mut()[k] = orig - FD_STEP;
            let fm = loss(store, false)?;
            store.get_mut(id).tensor.data_mut()[k] = orig;

            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let fwd = (fp - f0) / FD_STEP;
            let bwd = (f0 - fm) / FD_STEP;
            let non_smooth = (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > rel_tol || non_smooth {
                report.failures.push(GradFailure {
                    param: store.get(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                    non_smooth,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param::ParamId;
    use crate::numerics::tensor::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(v));
        s
    }

    #[test]
    fn square_at_three() {
        let mut s = single(3.0);
        let report = grad_check(
            &mut s,
            |st, with_grad| {
                let x = st.value(ParamId(0)).data()[0];
                if with_grad {
                    st.get_mut(ParamId(0)).tensor.grad_mut()[0] += 2.0 * x;
                }
                Ok(x * x)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn abs_at_zero_is_flagged() {
        let mut s = single(0.0);
        let report = grad_check(
            &mut s,
            |st, with_grad| {
                let x = st.value(ParamId(0)).data()[0];
                if with_grad {
                    st.get_mut(ParamId(0)).tensor.grad_mut()[0] += x.signum();
                }
                Ok(x.abs())
            },
            1e-4,
        )
        .unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].non_smooth);
    }
}
