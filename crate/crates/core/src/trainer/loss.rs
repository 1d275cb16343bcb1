use super::TrainConfig;
use crate::cda::pgca_loss;
use crate::error::{Error, Result};
use crate::mda::{ada_loss, pcc_loss};
use crate::model::{Damsdan, Mode};
use crate::numerics::{Graph, Tensor, Var};

/// One optimization step's inputs: a labeled batch per source and an
/// unlabeled target batch, plus the target rows that carry a selected
/// pseudo-label.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub sources: Vec<(Tensor, Vec<usize>)>,
    pub target: Tensor,
    /// `(row in target batch, pseudo-label)` pairs.
    pub pseudo: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// Differentiable root for a single minimization: the discriminator
    /// minimizes the adversarial loss while the encoders receive it through
    /// a reversal boundary of the given strength.
    Training { grl_lambda: f64 },
    /// The plain objective `cls - lambda1 adv + lambda2 proto + lambda3 cond`
    /// with no reversal boundary.
    Objective,
}

/// Loss components of one step. Inactive terms are `None`.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub root: Var,
    pub cls: f64,
    pub adv: Option<f64>,
    pub proto: Option<f64>,
    pub cond: Option<f64>,
    /// Value of the full objective.
    pub objective: f64,
    /// Train-mode aligned source features per branch.
    pub source_features: Vec<Var>,
    /// Train-mode aligned target features per branch.
    pub target_features: Vec<Var>,
}

fn check_finite(g: &Graph, v: Var, component: &'static str) -> Result<f64> {
    let x = g.scalar(v);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss { component })
    }
}

/// Builds every active loss term for one step. Terms are averaged over the
/// source branches; each per-branch term is a batch mean.
pub fn build_step_loss(
    model: &mut Damsdan,
    g: &mut Graph,
    batch: &StepBatch,
    cfg: &TrainConfig,
    mode: LossMode,
) -> Result<StepLosses> {
    let m_count = model.num_sources();
    if batch.sources.len() != m_count {
        return Err(Error::dim("step batch", batch.sources.len(), m_count));
    }
    let mut parts: Vec<&Tensor> = batch.sources.iter().map(|(x, _)| x).collect();
    parts.push(&batch.target);
    let x = g.constant(Tensor::vstack(&parts)?);
    let f_com = model.encode_common(g, x, Mode::Train)?;

    let (ada, pcc) = (cfg.ada_active(), cfg.pcc_active());
    let cond_on = cfg.cda_active() && !batch.pseudo.is_empty();
    let (rows, labels): (Vec<usize>, Vec<usize>) = batch.pseudo.iter().copied().unzip();
    let target_offset = parts[..m_count].iter().map(|t| t.rows()).sum();
    let f_tgt = g.slice_rows(f_com, target_offset, batch.target.rows())?;

    let mut cls_terms = Vec::with_capacity(m_count);
    let mut adv_terms = Vec::new();
    let mut proto_terms = Vec::new();
    let mut cond_terms = Vec::new();
    let mut source_features = Vec::with_capacity(m_count);
    let mut target_features = Vec::with_capacity(m_count);
    let mut offset = 0;
    for (m, (xs, ys)) in batch.sources.iter().enumerate() {
        let fs = g.slice_rows(f_com, offset, xs.rows())?;
        offset += xs.rows();
        let hs = model.encode_specific(g, m, fs, Mode::Train)?;
        let ht = model.encode_specific(g, m, f_tgt, Mode::Train)?;
        let logits = model.class_logits(g, m, hs)?;
        cls_terms.push(g.cross_entropy(logits, ys)?);
        if ada {
            let (ds, dt) = match mode {
                LossMode::Training { grl_lambda } => (
                    model.discriminate(g, m, hs, grl_lambda)?,
                    model.discriminate(g, m, ht, grl_lambda)?,
                ),
                LossMode::Objective => (model.discriminate_plain(g, m, hs)?, model.discriminate_plain(g, m, ht)?),
            };
            adv_terms.push(ada_loss(g, ds, dt)?);
        }
        let bank = &model.branches[m].prototypes;
        if pcc {
            proto_terms.push(pcc_loss(g, hs, ys, bank)?);
        }
        if cond_on {
            cond_terms.push(pgca_loss(g, ht, &rows, &labels, bank, cfg.beta)?);
        }
        source_features.push(hs);
        target_features.push(ht);
    }

    let inv_m = 1.0 / m_count as f64;
    let average = |g: &mut Graph, terms: &[Var], name: &'static str| -> Result<Option<(Var, f64)>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let weighted: Vec<(Var, f64)> = terms.iter().map(|&t| (t, inv_m)).collect();
        let v = g.linear_combination(&weighted)?;
        Ok(Some((v, check_finite(g, v, name)?)))
    };
    let (cls_v, cls) = average(g, &cls_terms, "cls")?.expect("one branch at least");
    let adv = average(g, &adv_terms, "adv")?;
    let proto = average(g, &proto_terms, "proto")?;
    let cond = average(g, &cond_terms, "cond")?;

    let adv_coef = match mode {
        LossMode::Training { .. } => 1.0,
        LossMode::Objective => -cfg.lambda1,
    };
    let mut terms = vec![(cls_v, 1.0)];
    let mut objective = cls;
    if let Some((v, val)) = adv {
        terms.push((v, adv_coef));
        objective -= cfg.lambda1 * val;
    }
    if let Some((v, val)) = proto {
        terms.push((v, cfg.lambda2));
        objective += cfg.lambda2 * val;
    }
    if let Some((v, val)) = cond {
        terms.push((v, cfg.lambda3));
        objective += cfg.lambda3 * val;
    }
    let root = g.linear_combination(&terms)?;
    Ok(StepLosses {
        root,
        cls,
        adv: adv.map(|a| a.1),
        proto: proto.map(|p| p.1),
        cond: cond.map(|c| c.1),
        objective,
        source_features,
        target_features,
    })
}
