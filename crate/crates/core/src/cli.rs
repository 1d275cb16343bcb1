//! Command-line front end: `synth`, `run` and `analyze`, each driven by one
//! strict TOML config plus a few flag overrides.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synth, load_de_features, make_protocol, write_dataset, DomainDataset, ProtocolKind, ProtocolPlan,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::mda::write_weight_history;
use crate::cda::write_pseudo_audit;
use crate::model::Damsdan;
use crate::trainer::{export_embeddings, mi_topography, run_protocol, MetricsReport, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "damsdan", version, about = "Multi-source domain adaptation for EEG emotion recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset (CSV files plus manifest).
    Synth(CommonArgs),
    /// Train and evaluate every fold of the configured protocol.
    Run(RunArgs),
    /// Mutual-information topography and embedding export from a checkpoint.
    Analyze(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Mechanisms to disable, comma separated: ada, pcc, dasw, cda, dplc.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
}

/// Where the domains come from: a manifest on disk or an inline synthetic spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Fold layout; defaults to holdout for synthetic data and
    /// leave-one-subject-out for a manifest.
    pub protocol: Option<ProtocolKind>,
    /// Keep at most this many sources per fold, drawn by `source_seed`.
    pub max_sources: Option<usize>,
    #[serde(default)]
    pub source_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub checkpoint: Option<PathBuf>,
    /// Fold whose target domain is analyzed.
    #[serde(default)]
    pub fold: usize,
    /// Feature layout; defaults to one band per feature.
    pub channels: Option<usize>,
    pub bands: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub analysis: Option<AnalysisConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        if let Some(m) = cfg.data.manifest.as_mut() {
            resolve(m);
        }
        if let Some(c) = cfg.analysis.as_mut().and_then(|a| a.checkpoint.as_mut()) {
            resolve(c);
        }
        Ok(cfg)
    }

    fn apply(&mut self, args: &CommonArgs) {
        if let Some(seed) = args.seed {
            self.train.seed = seed;
            if let Some(s) = self.data.synth.as_mut() {
                s.seed = seed;
            }
        }
        if let Some(out) = &args.out {
            self.out_dir = out.clone();
        }
    }

    fn validate(&self) -> Result<()> {
        match (&self.data.manifest, &self.data.synth) {
            (Some(_), Some(_)) => Err(Error::Config("data: give either `manifest` or `synth`, not both".into())),
            (None, None) => Err(Error::Config("data: one of `manifest` or `synth` is required".into())),
            _ => self.train.validate(),
        }
    }

    fn protocol(&self) -> ProtocolKind {
        self.data.protocol.unwrap_or(if self.data.synth.is_some() {
            ProtocolKind::Holdout
        } else {
            ProtocolKind::CrossSubjectLoso
        })
    }

    /// Copy with defaults filled in, as echoed into outputs.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        r.data.protocol = Some(self.protocol());
        r.train = self.train.resolved();
        r
    }

    pub fn load_datasets(&self) -> Result<Vec<DomainDataset>> {
        match (&self.data.manifest, &self.data.synth) {
            (Some(m), _) => load_de_features(m),
            (None, Some(s)) => generate_synth(s),
            (None, None) => Err(Error::Config("no data source".into())),
        }
    }

    pub fn plan(&self, datasets: &[DomainDataset]) -> Result<ProtocolPlan> {
        let mut plan = make_protocol(datasets, self.protocol())?;
        if let Some(k) = self.data.max_sources {
            plan.subsample_sources(k, self.data.source_seed);
        }
        Ok(plan)
    }
}

#[derive(Serialize)]
struct RunOutput<'a> {
    run: &'a RunConfig,
    metrics: &'a MetricsReport,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

pub fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(args);
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("synth needs a [data.synth] table".into()))?;
    let sets = generate_synth(spec)?;
    let manifest = write_dataset(&cfg.out_dir, &sets)?;
    println!(
        "wrote {} domains ({} classes, {} features) to {}",
        sets.len(),
        spec.classes,
        spec.feature_dim,
        manifest.display()
    );
    for d in &sets {
        println!("  {}: {} samples", d.key, d.len());
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.common.config)?;
    cfg.apply(&args.common);
    for name in &args.ablate {
        cfg.train.ablation.disable(name)?;
    }
    cfg.validate()?;
    let datasets = cfg.load_datasets()?;
    let plan = cfg.plan(&datasets)?;
    let (report, folds) = run_protocol(&datasets, &plan, &cfg.train)?;

    let out = &cfg.out_dir;
    create_dir(out)?;
    let resolved = cfg.resolved();
    let json = serde_json::to_string_pretty(&RunOutput {
        run: &resolved,
        metrics: &report,
    })
    .expect("metrics serialize");
    let path = out.join("metrics.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::file(&path, e))?;
    report.write_confusion_csv(&out.join("confusion.csv"))?;
    for (i, fold) in folds.iter().enumerate() {
        write_weight_history(&out.join(format!("weights_fold{i}.csv")), &fold.trace.weight_history)?;
        let target = datasets.iter().find(|d| d.key == plan.folds[i].target);
        write_pseudo_audit(
            &out.join(format!("pseudo_labels_fold{i}.csv")),
            &fold.trace.pseudo_rounds,
            target.and_then(|t| t.labels.as_deref()),
        )?;
        fold.model.save(&out.join(format!("checkpoint_fold{i}.json")))?;
    }
    match (report.mean_accuracy, report.std_accuracy) {
        (Some(m), Some(s)) => println!("{} folds: accuracy {:.4} +/- {:.4}", report.folds.len(), m, s),
        _ => println!("{} folds: predictions written (no target labels)", report.folds.len()),
    }
    Ok(())
}

pub fn cmd_analyze(args: &CommonArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(args);
    cfg.validate()?;
    let analysis = cfg
        .analysis
        .clone()
        .ok_or_else(|| Error::Config("analyze needs an [analysis] table".into()))?;
    let checkpoint = analysis
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("analysis.checkpoint is required".into()))?;
    let model = Damsdan::load(checkpoint)?;
    let datasets = cfg.load_datasets()?;
    let plan = cfg.plan(&datasets)?;
    let fold = plan
        .folds
        .get(analysis.fold)
        .ok_or_else(|| Error::Config(format!("fold {} not in plan of {}", analysis.fold, plan.folds.len())))?;
    let target = datasets
        .iter()
        .find(|d| d.key == fold.target)
        .expect("plan built from these datasets");
    let dim = target.feature_dim();
    if dim != model.config.input_dim {
        return Err(Error::Compatibility(format!(
            "checkpoint expects {} features, data has {dim}",
            model.config.input_dim
        )));
    }
    let bands = analysis.bands.unwrap_or(1);
    let channels = analysis.channels.unwrap_or(dim / bands.max(1));
    let probs = model.predict(&target.features)?;
    let mi = mi_topography(&target.features, &probs, channels, bands)?;
    create_dir(&cfg.out_dir)?;
    mi.write_csv(&cfg.out_dir.join("mi_topography.csv"))?;
    let mut sets: Vec<DomainDataset> = datasets
        .iter()
        .filter(|d| fold.sources.contains(&d.key))
        .cloned()
        .collect();
    sets.push(target.clone());
    let rows = export_embeddings(&model, &sets, &cfg.out_dir.join("embeddings.csv"))?;
    println!(
        "mutual information {} classes x {channels} channels x {bands} bands; {rows} embeddings",
        mi.raw.len()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}
