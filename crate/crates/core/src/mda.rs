//! Marginal distribution alignment: class prototypes and the prototype
//! consistency loss, the adversarial domain loss, squared MMD and the
//! MMD-driven source weighting used to fuse branch predictions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{pairwise_sq_dists, Tensor};
use crate::numerics::{Graph, Var};

/// Per-class mean feature vectors for one source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub class_count: usize,
    pub dim: usize,
    pub prototypes: Vec<Option<Vec<f64>>>,
    /// Samples seen per class in the most recent update.
    pub sample_counts: Vec<usize>,
}

impl PrototypeBank {
    pub fn new(class_count: usize, dim: usize) -> Self {
        Self {
            class_count,
            dim,
            prototypes: vec![None; class_count],
            sample_counts: vec![0; class_count],
        }
    }

    /// Builds a bank directly from a `C x d` matrix (every class present).
    pub fn from_matrix(m: &Tensor) -> Self {
        Self {
            class_count: m.rows(),
            dim: m.cols(),
            prototypes: m.iter_rows().map(|r| Some(r.to_vec())).collect(),
            sample_counts: vec![0; m.rows()],
        }
    }

    /// Classes absent from the most recent update.
    pub fn absent(&self) -> Vec<usize> {
        (0..self.class_count)
            .filter(|&c| self.sample_counts[c] == 0)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.prototypes.iter().all(Option::is_some)
    }

    /// Recomputes class means from `features`, blending with the previous
    /// prototype by `ema` (0 replaces it outright). Classes with no rows
    /// keep their previous prototype and report a zero count.
    pub fn update(&mut self, features: &Tensor, labels: &[usize], ema: f64) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::dim(
                "update_prototypes",
                features.shape_str(),
                format!("{} labels", labels.len()),
            ));
        }
        if features.cols() != self.dim {
            return Err(Error::dim("update_prototypes", features.cols(), self.dim));
        }
        let mut sums = vec![vec![0.0; self.dim]; self.class_count];
        let mut counts = vec![0usize; self.class_count];
        for (row, &y) in features.iter_rows().zip(labels) {
            if y >= self.class_count {
                return Err(Error::Label {
                    label: y,
                    classes: self.class_count,
                });
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..self.class_count {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            let mean: Vec<f64> = sums[c].iter().map(|s| s / n).collect();
            self.prototypes[c] = Some(match &self.prototypes[c] {
                Some(prev) if ema > 0.0 => prev
                    .iter()
                    .zip(&mean)
                    .map(|(p, m)| ema * p + (1.0 - ema) * m)
                    .collect(),
                _ => mean,
            });
        }
        self.sample_counts = counts;
        Ok(())
    }

    /// Prototypes as a `C x d` matrix; fails on the first missing class.
    pub fn matrix(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.class_count * self.dim);
        for (c, p) in self.prototypes.iter().enumerate() {
            match p {
                Some(v) => data.extend_from_slice(v),
                None => return Err(Error::MissingPrototype { class: c }),
            }
        }
        Tensor::from_vec(self.class_count, self.dim, data)
    }
}

/// Prototype consistency loss for one branch: mean over rows of
/// `-log softmax(-d(f, mu))[label]`.
pub fn pcc_loss(g: &mut Graph, features: Var, labels: &[usize], bank: &PrototypeBank) -> Result<Var> {
    if let Some(&c) = labels.iter().find(|&&c| c < bank.class_count && bank.prototypes[c].is_none()) {
        return Err(Error::MissingPrototype { class: c });
    }
    let protos = bank.matrix()?;
    let dist = g.proto_dist(features, &protos)?;
    let logits = g.scale(dist, -1.0);
    g.cross_entropy(logits, labels)
}

pub fn pcc_loss_value(features: &Tensor, labels: &[usize], bank: &PrototypeBank) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let l = pcc_loss(&mut g, f, labels, bank)?;
    Ok(g.scalar(l))
}

/// Adversarial loss for one branch from discriminator outputs:
/// `mean(-ln D(src)) + mean(-ln(1 - D(tgt)))`.
pub fn ada_loss(g: &mut Graph, disc_source: Var, disc_target: Var) -> Result<Var> {
    let s = g.log_loss(disc_source, true)?;
    let t = g.log_loss(disc_target, false)?;
    g.add(s, t)
}

/// Value of [`ada_loss`] and the number of clamped outputs.
pub fn ada_loss_value(disc_source: &Tensor, disc_target: &Tensor) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let s = g.constant(disc_source.clone());
    let t = g.constant(disc_target.clone());
    let l = ada_loss(&mut g, s, t)?;
    Ok((g.scalar(l), g.clamp_events()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// V-statistic including the diagonal kernel terms.
    #[default]
    Biased,
    /// U-statistic excluding the diagonal terms; needs at least 2 rows per set.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "sigma")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sets.
    #[default]
    Median,
    Fixed(f64),
}

fn ordered<'a>(a: &'a Tensor, b: &'a Tensor) -> (&'a Tensor, &'a Tensor) {
    // Canonical operand order so mmd(a, b) and mmd(b, a) run identical arithmetic.
    let key = |t: &Tensor| (t.rows(), t.cols());
    match key(a).cmp(&key(b)) {
        std::cmp::Ordering::Less => (a, b),
        std::cmp::Ordering::Greater => (b, a),
        std::cmp::Ordering::Equal => {
            let first_diff = a
                .data()
                .iter()
                .zip(b.data())
                .find(|(x, y)| x.to_bits() != y.to_bits());
            match first_diff {
                Some((x, y)) if x.total_cmp(y).is_gt() => (b, a),
                _ => (a, b),
            }
        }
    }
}

fn kernel_sum(x: &Tensor, y: &Tensor, inv_two_sigma_sq: f64, skip_diagonal: bool) -> Result<f64> {
    let d = pairwise_sq_dists(x, y)?;
    let mut total = 0.0;
    for (i, row) in d.iter_rows().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            total += (-v * inv_two_sigma_sq).exp();
        }
    }
    Ok(total)
}

/// Median of pairwise Euclidean distances over the pooled rows of `a` and `b`
/// (falls back to 1 when every point coincides).
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let pooled = match Tensor::vstack(&[a, b]) {
        Ok(p) => p,
        Err(_) => return 1.0,
    };
    let n = pooled.rows();
    let full = pairwise_sq_dists(&pooled, &pooled).expect("same width");
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        d.extend_from_slice(&full.row(i)[i + 1..]);
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let sigma = m.sqrt();
    if sigma > 0.0 {
        sigma
    } else {
        1.0
    }
}

/// Squared MMD with a Gaussian kernel `exp(-|x-y|^2 / (2 sigma^2))`,
/// clamped at zero from below.
pub fn mmd_squared(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    mmd_squared_with(a, b, sigma, MmdEstimator::Biased)
}

pub fn mmd_squared_with(a: &Tensor, b: &Tensor, sigma: f64, estimator: MmdEstimator) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyDomain("mmd input"));
    }
    if a.cols() != b.cols() {
        return Err(Error::dim("mmd_squared", a.shape_str(), b.shape_str()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("MMD bandwidth must be positive, got {sigma}")));
    }
    let (a, b) = ordered(a, b);
    let k = 1.0 / (2.0 * sigma * sigma);
    let (na, nb) = (a.rows() as f64, b.rows() as f64);
    let value = match estimator {
        MmdEstimator::Biased => {
            let saa = kernel_sum(a, a, k, false)? / (na * na);
            let sbb = kernel_sum(b, b, k, false)? / (nb * nb);
            let sab = 2.0 * kernel_sum(a, b, k, false)? / (na * nb);
            saa + sbb - sab
        }
        MmdEstimator::Unbiased => {
            if a.rows() < 2 || b.rows() < 2 {
                return Err(Error::EmptyDomain("unbiased MMD needs two rows per set"));
            }
            let saa = kernel_sum(a, a, k, true)? / (na * (na - 1.0));
            let sbb = kernel_sum(b, b, k, true)? / (nb * (nb - 1.0));
            let sab = 2.0 * kernel_sum(a, b, k, false)? / (na * nb);
            saa + sbb - sab
        }
    };
    Ok(value.max(0.0))
}

/// Source fusion weights with the intermediate values that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub raw_mmd: Vec<f64>,
    pub normalized: Vec<f64>,
    pub final_weights: Vec<f64>,
    /// Decay used for the final weights; `None` for uniform weights.
    pub gamma: Option<f64>,
    pub epoch: usize,
}

impl FusionWeights {
    pub fn uniform(m: usize, epoch: usize) -> Self {
        let u = vec![1.0 / m as f64; m];
        Self {
            raw_mmd: vec![0.0; m],
            normalized: u.clone(),
            final_weights: u,
            gamma: None,
            epoch,
        }
    }

    /// Normalizes raw squared MMD values to a distribution, then maps
    /// `w -> exp(-w^2 / (2 gamma^2))` and renormalizes so sources closer
    /// to the target get larger weight.
    pub fn from_raw_mmd(raw_mmd: Vec<f64>, gamma: f64, epoch: usize) -> Result<Self> {
        let m = raw_mmd.len();
        if m == 0 {
            return Err(Error::EmptyDomain("no source domains for weighting"));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        let total: f64 = raw_mmd.iter().sum();
        let normalized: Vec<f64> = if total > 0.0 {
            raw_mmd.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / m as f64; m]
        };
        let scores: Vec<f64> = normalized
            .iter()
            .map(|w| (-(w * w) / (2.0 * gamma * gamma)).exp())
            .collect();
        let z: f64 = scores.iter().sum();
        let final_weights = scores.iter().map(|s| s / z).collect();
        Ok(Self {
            raw_mmd,
            normalized,
            final_weights,
            gamma: Some(gamma),
            epoch,
        })
    }
}

/// MMD-based weights for `M` source feature sets against the target.
pub fn dasw_weights(
    source_feats: &[Tensor],
    target_feats: &Tensor,
    gamma: f64,
    bandwidth: Bandwidth,
    estimator: MmdEstimator,
    epoch: usize,
) -> Result<FusionWeights> {
    let pairs: Vec<(&Tensor, &Tensor)> = source_feats.iter().map(|s| (s, target_feats)).collect();
    dasw_weights_paired(&pairs, gamma, bandwidth, estimator, epoch)
}

/// Like [`dasw_weights`], with a separate target view per source (each
/// branch sees the target through its own encoder).
pub fn dasw_weights_paired(
    pairs: &[(&Tensor, &Tensor)],
    gamma: f64,
    bandwidth: Bandwidth,
    estimator: MmdEstimator,
    epoch: usize,
) -> Result<FusionWeights> {
    if pairs.is_empty() {
        return Err(Error::EmptyDomain("no source domains for weighting"));
    }
    let raw = pairs
        .iter()
        .map(|&(s, t)| {
            if s.cols() != t.cols() {
                return Err(Error::dim("dasw_weights", s.shape_str(), t.shape_str()));
            }
            let sigma = match bandwidth {
                Bandwidth::Median => median_bandwidth(s, t),
                Bandwidth::Fixed(v) => v,
            };
            mmd_squared_with(s, t, sigma, estimator)
        })
        .collect::<Result<Vec<_>>>()?;
    FusionWeights::from_raw_mmd(raw, gamma, epoch)
}

/// Weighted sum of per-branch class probabilities.
pub fn aggregate_predictions(branch_probs: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if branch_probs.len() != weights.len() || branch_probs.is_empty() {
        return Err(Error::dim(
            "aggregate_predictions",
            format!("{} branches", branch_probs.len()),
            format!("{} weights", weights.len()),
        ));
    }
    let (n, c) = branch_probs[0].shape();
    let mut out = Tensor::zeros(n, c);
    for (p, &w) in branch_probs.iter().zip(weights) {
        if p.shape() != (n, c) {
            return Err(Error::dim("aggregate_predictions", out.shape_str(), p.shape_str()));
        }
        for (o, v) in out.data_mut().iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Writes `epoch,branch_id,raw_mmd,normalized,final` rows.
pub fn write_weight_history(path: &Path, history: &[FusionWeights]) -> Result<()> {
    let mut out = String::from("epoch,branch_id,raw_mmd,normalized,final\n");
    for fw in history {
        for m in 0..fw.final_weights.len() {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e}\n",
                fw.epoch, m, fw.raw_mmd[m], fw.normalized[m], fw.final_weights[m]
            ));
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::file(path, e))
}
