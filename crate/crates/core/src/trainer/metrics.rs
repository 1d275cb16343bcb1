use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_fold, EpochLosses, FoldTrace, PseudoPrecision, TrainConfig};
use crate::data::{DomainDataset, DomainKey, ProtocolKind, ProtocolPlan};
use crate::error::{Error, Result};
use crate::mda::FusionWeights;
use crate::model::Damsdan;
use crate::numerics::{Rng, Tensor};

/// Confusion matrix with rows indexed by true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
    /// Rows divided by their totals; an empty row stays all zero.
    pub normalized: Vec<Vec<f64>>,
}

impl Confusion {
    pub fn new(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        let mut counts = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        let normalized = counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        Self { counts, normalized }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub probabilities: Tensor,
    pub predictions: Vec<usize>,
    pub accuracy: Option<f64>,
    pub confusion: Option<Confusion>,
}

/// Eval-mode prediction on `target` fused by the model's source weights;
/// accuracy and confusion only when the target carries labels.
pub fn evaluate(model: &Damsdan, target: &DomainDataset) -> Result<EvalReport> {
    let probabilities = model.predict(&target.features)?;
    let predictions = probabilities.argmax_rows();
    let (accuracy, confusion) = match &target.labels {
        Some(truth) if !truth.is_empty() => {
            let hits = truth.iter().zip(&predictions).filter(|(t, p)| t == p).count();
            (
                Some(hits as f64 / truth.len() as f64),
                Some(Confusion::new(truth, &predictions, model.config.num_classes)),
            )
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        probabilities,
        predictions,
        accuracy,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub sources: Vec<DomainKey>,
    pub target: DomainKey,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub confusion: Option<Confusion>,
    pub predictions: Vec<usize>,
    pub loss_history: Vec<EpochLosses>,
    pub weight_history: Vec<FusionWeights>,
    pub pseudo_precision: Vec<PseudoPrecision>,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: ProtocolKind,
    pub folds: Vec<FoldReport>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub std_convention: String,
    pub config: TrainConfig,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `fold,true_class,predicted_class,count,rate` rows.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("fold,true_class,predicted_class,count,rate\n");
        for f in &self.folds {
            if let Some(c) = &f.confusion {
                for (t, (counts, rates)) in c.counts.iter().zip(&c.normalized).enumerate() {
                    for (p, (n, r)) in counts.iter().zip(rates).enumerate() {
                        let _ = writeln!(s, "{},{t},{p},{n},{r:.16e}", f.fold);
                    }
                }
            }
        }
        std::fs::write(path, s).map_err(|e| Error::file(path, e))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// A trained fold kept alongside its report.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub model: Damsdan,
    pub trace: FoldTrace,
    pub eval: EvalReport,
}

fn find(datasets: &[DomainDataset], key: DomainKey) -> Result<&DomainDataset> {
    datasets
        .iter()
        .find(|d| d.key == key)
        .ok_or_else(|| Error::Protocol(format!("domain {key} not found")))
}

/// Trains and evaluates every fold of `plan`. Fold `i` uses a seed derived
/// from `cfg.seed` and `i`, so folds are independent of each other's order.
pub fn run_protocol(
    datasets: &[DomainDataset],
    plan: &ProtocolPlan,
    cfg: &TrainConfig,
) -> Result<(MetricsReport, Vec<FoldArtifacts>)> {
    if plan.folds.is_empty() {
        return Err(Error::Protocol("plan has no folds".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut reports = Vec::with_capacity(plan.folds.len());
    let mut artifacts = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let seed = root.split(i as u64).next_u64();
        let wrap = |e: Error| Error::Fold {
            fold: i,
            target: fold.target.to_string(),
            source: Box::new(e),
        };
        let run = || -> Result<(FoldReport, FoldArtifacts)> {
            let sources = fold
                .sources
                .iter()
                .map(|&k| find(datasets, k).cloned())
                .collect::<Result<Vec<_>>>()?;
            let target = find(datasets, fold.target)?;
            let fold_cfg = TrainConfig { seed, ..cfg.clone() };
            let (model, trace) = train_fold(&sources, target, &fold_cfg)?;
            let eval = evaluate(&model, target)?;
            let report = FoldReport {
                fold: i,
                sources: fold.sources.clone(),
                target: fold.target,
                seed,
                accuracy: eval.accuracy,
                confusion: eval.confusion.clone(),
                predictions: eval.predictions.clone(),
                loss_history: trace.loss_history.clone(),
                weight_history: trace.weight_history.clone(),
                pseudo_precision: trace.pseudo_precision.clone(),
                clamp_events: trace.clamp_events,
            };
            Ok((report, FoldArtifacts { model, trace, eval }))
        };
        let (report, art) = run().map_err(wrap)?;
        reports.push(report);
        artifacts.push(art);
    }
    let accuracies: Vec<f64> = reports.iter().filter_map(|r| r.accuracy).collect();
    let stats = if accuracies.len() == reports.len() {
        mean_std(&accuracies)
    } else {
        None
    };
    Ok((
        MetricsReport {
            protocol: plan.kind,
            folds: reports,
            accuracies,
            mean_accuracy: stats.map(|s| s.0),
            std_accuracy: stats.map(|s| s.1),
            std_convention: "population".into(),
            config: cfg.resolved(),
        },
        artifacts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_population_std() {
        let (m, s) = mean_std(&[0.9, 1.0]).unwrap();
        assert!((m - 0.95).abs() < 1e-12);
        assert!((s - 0.05).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]), Some((0.7, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn confusion_rows_normalize() {
        let c = Confusion::new(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 3);
        assert_eq!(c.counts, vec![vec![1, 1, 0], vec![1, 2, 0], vec![0, 0, 0]]);
        for row in &c.normalized[..2] {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(c.normalized[2], vec![0.0; 3]);
    }
}
