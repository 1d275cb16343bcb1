//! Joint optimization over all sources and the target, fold evaluation,
//! protocol runs, and post-hoc analysis.

mod analysis;
mod config;
mod loss;
mod metrics;

use serde::{Deserialize, Serialize};

pub use analysis::{export_embeddings, mi_topography, MiTopography, MI_BINS};
pub use config::{Ablation, GrlSchedule, TrainConfig, WeightCadence};
pub use loss::{build_step_loss, LossMode, StepBatch, StepLosses};
pub use metrics::{evaluate, mean_std, run_protocol, Confusion, EvalReport, FoldArtifacts, FoldReport, MetricsReport};

use crate::cda::{
    build_records, cluster_target, disc_pseudo_probs, distance_softmax, fusion_chi, select_consistent, PseudoLabelMode,
    PseudoLabelRecord,
};
use crate::data::{check_consistent, BatchStream, DomainDataset};
use crate::error::{Error, Result};
use crate::mda::{dasw_weights_paired, FusionWeights};
use crate::model::{Damsdan, EncoderConfig};
use crate::numerics::{AdamConfig, Graph, Rng, Tensor};

/// Mean loss components over one epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub objective: f64,
    pub cls: f64,
    pub adv: Option<f64>,
    pub proto: Option<f64>,
    pub cond: Option<f64>,
}

/// Pseudo-label quality for one epoch, when target labels are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPrecision {
    pub epoch: usize,
    pub consistent: usize,
    pub selected: usize,
    pub correct: usize,
    pub precision: Option<f64>,
}

/// Everything recorded while training one fold.
#[derive(Debug, Clone, Default)]
pub struct FoldTrace {
    pub loss_history: Vec<EpochLosses>,
    pub weight_history: Vec<FusionWeights>,
    pub pseudo_rounds: Vec<(usize, Vec<PseudoLabelRecord>)>,
    pub pseudo_precision: Vec<PseudoPrecision>,
    /// Discriminator outputs clamped away from 0 or 1.
    pub clamp_events: usize,
}

fn labeled_sources(sources: &[DomainDataset]) -> Result<Vec<&[usize]>> {
    sources.iter().map(DomainDataset::require_labels).collect()
}

/// Trains a fresh model on labeled `sources` and the unlabeled `target`.
/// Target labels, if present, feed only the pseudo-label diagnostics.
pub fn train_fold(sources: &[DomainDataset], target: &DomainDataset, cfg: &TrainConfig) -> Result<(Damsdan, FoldTrace)> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptyDomain("no source domains"));
    }
    let mut all: Vec<DomainDataset> = sources.to_vec();
    all.push(target.clone());
    let (dim, classes) = check_consistent(&all)?;
    let source_labels = labeled_sources(sources)?;

    let root = Rng::new(cfg.seed);
    let enc = EncoderConfig::new(dim, classes, sources.len(), cfg.arch.clone());
    let mut model = Damsdan::new(enc, &mut root.split(0))?;
    let mut source_streams = sources
        .iter()
        .enumerate()
        .map(|(m, s)| BatchStream::new(s.len(), cfg.batch_size, root.split(2 + m as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut target_stream = BatchStream::new(target.len(), cfg.batch_size, root.split(1))?;
    let steps = source_streams.iter().map(BatchStream::batches_per_pass).max().unwrap_or(1);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    let mut trace = FoldTrace::default();
    let mut pseudo = refresh(&mut model, sources, target, cfg, 1, &mut trace)?;
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 5];
        let mut seen = [false; 3];
        for step in 0..steps {
            let batch_sources = sources
                .iter()
                .zip(&mut source_streams)
                .zip(&source_labels)
                .map(|((s, stream), labels)| {
                    let idx = stream.next_batch();
                    (s.features.gather_rows(&idx), idx.iter().map(|&i| labels[i]).collect())
                })
                .collect();
            let tidx = target_stream.next_batch();
            let batch = StepBatch {
                sources: batch_sources,
                target: target.features.gather_rows(&tidx),
                pseudo: tidx
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| pseudo[i].map(|y| (r, y)))
                    .collect(),
            };
            let progress = ((epoch - 1) * steps + step) as f64 / (cfg.epochs * steps) as f64;
            let mut g = Graph::new();
            let losses = build_step_loss(
                &mut model,
                &mut g,
                &batch,
                cfg,
                LossMode::Training {
                    grl_lambda: cfg.grl_lambda(progress),
                },
            )?;
            model.params.zero_grad();
            g.backward(losses.root, &mut model.params)?;
            model.params.adam_step(&adam)?;
            trace.clamp_events += g.clamp_events();

            sums[0] += losses.objective;
            sums[1] += losses.cls;
            for (k, v) in [losses.adv, losses.proto, losses.cond].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[2 + k] += v;
                    seen[k] = true;
                }
            }
            if cfg.dasw_active() && cfg.weight_update == WeightCadence::Batch {
                let pairs: Vec<(&Tensor, &Tensor)> = losses
                    .source_features
                    .iter()
                    .zip(&losses.target_features)
                    .map(|(&s, &t)| (g.value(s), g.value(t)))
                    .collect();
                model.fusion = dasw_weights_paired(&pairs, cfg.gamma, cfg.bandwidth, cfg.mmd_estimator, epoch)?;
            }
        }
        let n = steps as f64;
        let opt = |k: usize| seen[k].then(|| sums[2 + k] / n);
        trace.loss_history.push(EpochLosses {
            epoch,
            objective: sums[0] / n,
            cls: sums[1] / n,
            adv: opt(0),
            proto: opt(1),
            cond: opt(2),
        });
        pseudo = refresh(&mut model, sources, target, cfg, epoch + 1, &mut trace)?;
    }
    Ok((model, trace))
}

/// Structural updates between epochs: source prototypes, source weights,
/// and the pseudo-labels used during epoch `next_epoch`. Returns the
/// selected pseudo-label per target row.
fn refresh(
    model: &mut Damsdan,
    sources: &[DomainDataset],
    target: &DomainDataset,
    cfg: &TrainConfig,
    next_epoch: usize,
    trace: &mut FoldTrace,
) -> Result<Vec<Option<usize>>> {
    let completed = next_epoch - 1;
    let mut source_feats = Vec::with_capacity(sources.len());
    for (m, s) in sources.iter().enumerate() {
        let f = model.specific_features(&model.common_features(&s.features)?, m)?;
        model.branches[m]
            .prototypes
            .update(&f, s.require_labels()?, cfg.prototype_ema)?;
        source_feats.push(f);
    }
    let target_feats = model.branch_features(&target.features)?;

    let batch_weights = cfg.weight_update == WeightCadence::Batch && completed > 0;
    if !cfg.dasw_active() {
        model.fusion = FusionWeights::uniform(sources.len(), completed);
    } else if batch_weights {
        model.fusion.epoch = completed;
    } else {
        let pairs: Vec<(&Tensor, &Tensor)> = source_feats.iter().zip(&target_feats).collect();
        model.fusion = dasw_weights_paired(&pairs, cfg.gamma, cfg.bandwidth, cfg.mmd_estimator, completed)?;
    }
    trace.weight_history.push(model.fusion.clone());

    let mut pseudo = vec![None; target.len()];
    if !cfg.cda_active() || next_epoch > cfg.epochs {
        return Ok(pseudo);
    }
    let banks: Vec<_> = model.branches.iter().map(|b| b.prototypes.clone()).collect();
    let p_disc = disc_pseudo_probs(&target_feats, &banks, &model.fusion.final_weights)?;
    let mode = if cfg.ablation.dplc_single {
        PseudoLabelMode::SingleDiscriminative
    } else {
        PseudoLabelMode::Dual
    };
    let p_struct = match mode {
        PseudoLabelMode::SingleDiscriminative => p_disc.clone(),
        PseudoLabelMode::Dual => {
            // Cluster in the branch-averaged feature space, seeded with the
            // branch-averaged prototypes (the class means of that space).
            let inv = 1.0 / target_feats.len() as f64;
            let avg = mean_tensor(&target_feats, inv);
            let protos = banks.iter().map(|b| b.matrix()).collect::<Result<Vec<_>>>()?;
            let init = mean_tensor(&protos, inv);
            let state = cluster_target(&avg, &init, cfg.cluster_max_iter, cfg.cluster_tol)?;
            distance_softmax(&avg, &state.centers)?
        }
    };
    let chi = fusion_chi(next_epoch as f64, cfg.epochs as f64, cfg.fusion_k());
    let mut records = build_records(&p_disc, &p_struct, chi, mode)?;
    let selected = select_consistent(&mut records, next_epoch, cfg.epochs);
    for &i in &selected {
        pseudo[i] = Some(records[i].fused_y);
    }
    let correct = target
        .labels
        .as_ref()
        .map(|truth| selected.iter().filter(|&&i| records[i].fused_y == truth[i]).count());
    trace.pseudo_precision.push(PseudoPrecision {
        epoch: next_epoch,
        consistent: records.iter().filter(|r| r.consistent).count(),
        selected: selected.len(),
        correct: correct.unwrap_or(0),
        precision: correct.filter(|_| !selected.is_empty()).map(|c| c as f64 / selected.len() as f64),
    });
    trace.pseudo_rounds.push((next_epoch, records));
    Ok(pseudo)
}

fn mean_tensor(parts: &[Tensor], scale: f64) -> Tensor {
    let mut out = Tensor::zeros(parts[0].rows(), parts[0].cols());
    for p in parts {
        for (o, v) in out.data_mut().iter_mut().zip(p.data()) {
            *o += v;
        }
    }
    out.map(|v| v * scale)
}
