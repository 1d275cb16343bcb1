use std::fmt::Write as _;
use std::path::Path;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::Damsdan;
use crate::numerics::Tensor;

/// Equal-frequency bins per feature column.
pub const MI_BINS: usize = 10;

/// Mutual information between each feature column and each predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct MiTopography {
    pub channels: usize,
    pub bands: usize,
    /// `C x D` bias-corrected MI in nats.
    pub raw: Vec<Vec<f64>>,
    /// `raw` min-max scaled to [0, 1] within each class row.
    pub normalized: Vec<Vec<f64>>,
}

impl MiTopography {
    /// Normalized MI of `class` as a `channels x bands` grid; feature `j`
    /// sits at channel `j / bands`, band `j % bands`.
    pub fn channel_band(&self, class: usize) -> Vec<Vec<f64>> {
        self.normalized[class]
            .chunks(self.bands)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("class,channel,band,mi,mi_normalized\n");
        for (c, (raw, norm)) in self.raw.iter().zip(&self.normalized).enumerate() {
            for (j, (r, n)) in raw.iter().zip(norm).enumerate() {
                let _ = writeln!(s, "{c},{},{},{r:.16e},{n:.16e}", j / self.bands, j % self.bands);
            }
        }
        std::fs::write(path, s).map_err(|e| Error::file(path, e))
    }
}

/// Bin index per value: rank-based equal-frequency bins, with tied values
/// sharing the bin of their lowest rank.
fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut rank = 0;
    for (pos, &i) in order.iter().enumerate() {
        if pos > 0 && values[i] != values[order[pos - 1]] {
            rank = pos;
        }
        out[i] = rank * bins / n;
    }
    out
}

fn entropy_mm(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    let mut h = 0.0;
    let mut occupied = 0usize;
    for c in counts.filter(|&c| c > 0) {
        let p = c as f64 / n;
        h -= p * p.ln();
        occupied += 1;
    }
    // Miller-Madow bias correction.
    h + (occupied.saturating_sub(1)) as f64 / (2.0 * n)
}

/// Plug-in mutual information between binned `x` and a binary indicator.
fn binary_mi(x_bins: &[usize], indicator: &[bool], bins: usize) -> f64 {
    let n = x_bins.len() as f64;
    let mut joint = vec![0usize; 2 * bins];
    for (&b, &y) in x_bins.iter().zip(indicator) {
        joint[2 * b + usize::from(y)] += 1;
    }
    let hx = entropy_mm((0..bins).map(|b| joint[2 * b] + joint[2 * b + 1]), n);
    let hy = entropy_mm((0..2).map(|y| (0..bins).map(|b| joint[2 * b + y]).sum()), n);
    let hxy = entropy_mm(joint.iter().copied(), n);
    (hx + hy - hxy).max(0.0)
}

/// Mutual information between every feature column and each predicted
/// class (the argmax of `pred_probs`, one indicator per class).
pub fn mi_topography(target_feats: &Tensor, pred_probs: &Tensor, channels: usize, bands: usize) -> Result<MiTopography> {
    let (n, d) = target_feats.shape();
    if channels * bands != d {
        return Err(Error::dim("mi_topography", format!("{d} features"), format!("{channels}x{bands}")));
    }
    if pred_probs.rows() != n {
        return Err(Error::dim("mi_topography", target_feats.shape_str(), pred_probs.shape_str()));
    }
    if n == 0 {
        return Err(Error::EmptyDomain("mi_topography input"));
    }
    let classes = pred_probs.cols();
    let pred = pred_probs.argmax_rows();
    let binned: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| target_feats.get(i, j)).collect();
            equal_frequency_bins(&col, MI_BINS)
        })
        .collect();
    let raw: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let ind: Vec<bool> = pred.iter().map(|&p| p == c).collect();
            binned.iter().map(|b| binary_mi(b, &ind, MI_BINS)).collect()
        })
        .collect();
    let normalized = raw
        .iter()
        .map(|row| {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter()
                .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(MiTopography {
        channels,
        bands,
        raw,
        normalized,
    })
}

/// Writes fused aligned features (branch features mixed by the source
/// weights) for every row of every dataset: `subject,session,label,e0..`.
/// Unlabeled rows get label `-1`.
pub fn export_embeddings(model: &Damsdan, datasets: &[DomainDataset], path: &Path) -> Result<usize> {
    let width = model.config.arch.dsfe_width;
    let mut s = String::from("subject,session,label");
    for j in 0..width {
        let _ = write!(s, ",e{j}");
    }
    s.push('\n');
    let mut rows = 0;
    for ds in datasets {
        let feats = model.branch_features(&ds.features)?;
        let w = &model.fusion.final_weights;
        for i in 0..ds.len() {
            match &ds.labels {
                Some(l) => {
                    let _ = write!(s, "{},{},{}", ds.key.subject, ds.key.session, l[i]);
                }
                None => {
                    let _ = write!(s, "{},{},-1", ds.key.subject, ds.key.session);
                }
            }
            for j in 0..width {
                let v: f64 = feats.iter().zip(w).map(|(f, wm)| wm * f.get(i, j)).sum();
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
            rows += 1;
        }
    }
    std::fs::write(path, s).map_err(|e| Error::file(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn bins_are_equal_frequency_with_ties() {
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b = equal_frequency_bins(&v, 10);
        for k in 0..10 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 2);
        }
        assert_eq!(equal_frequency_bins(&[3.0; 7], 10), vec![0; 7]);
    }

    #[test]
    fn dependent_independent_constant_columns() {
        let n = 600;
        let mut rng = Rng::new(17);
        let pred: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut probs = Tensor::zeros(n, 3);
        let mut feats = Tensor::zeros(n, 4);
        for (i, &y) in pred.iter().enumerate() {
            probs.set(i, y, 1.0);
            feats.set(i, 0, y as f64 * 2.5 - 1.0);
            feats.set(i, 1, rng.normal());
            feats.set(i, 2, 4.0);
            feats.set(i, 3, rng.normal() + y as f64);
        }
        let mi = mi_topography(&feats, &probs, 2, 2).unwrap();
        for c in 0..3 {
            assert_eq!(mi.normalized[c][0], 1.0);
            assert!(mi.normalized[c][1] < 0.05, "{}", mi.normalized[c][1]);
            assert_eq!(mi.raw[c][2], 0.0);
            assert!(mi.normalized[c].iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(mi.channel_band(0).len(), 2);
        assert!(mi_topography(&feats, &probs, 3, 2).is_err());
    }
}
