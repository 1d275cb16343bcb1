//! The multi-source network: a shared common encoder, and per source
//! domain a specific encoder with multi-head self-attention, a classifier
//! and a domain discriminator behind a gradient-reversal boundary.

pub mod attention;
pub mod checkpoint;
pub mod layers;

use serde::{Deserialize, Serialize};

pub use attention::{AttentionBlock, AttentionMode};
pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm, Linear};

use crate::error::{Error, Result};
use crate::mda::{aggregate_predictions, FusionWeights, PrototypeBank};
use crate::numerics::{softmax_rows, Graph, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorMode {
    #[default]
    PerBranch,
    Shared,
}

/// Architecture knobs that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub cfe_widths: Vec<usize>,
    pub dsfe_width: usize,
    pub attention_heads: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub leaky_alpha: f64,
    /// Attention behavior during training; inference always attends per sample.
    pub attention_mode: AttentionMode,
    pub discriminator: DiscriminatorMode,
    pub bn_momentum: f64,
    /// Multiplier on the fan-in uniform initialization bound.
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            cfe_widths: vec![256, 128, 64],
            dsfe_width: 32,
            attention_heads: 4,
            classifier_hidden: 16,
            discriminator_hidden: 16,
            leaky_alpha: 0.01,
            attention_mode: AttentionMode::PerSample,
            discriminator: DiscriminatorMode::PerBranch,
            bn_momentum: 0.1,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_sources: usize,
    pub arch: ArchConfig,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, num_classes: usize, num_sources: usize, arch: ArchConfig) -> Self {
        Self {
            input_dim,
            num_classes,
            num_sources,
            arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.input_dim == 0 || a.cfe_widths.is_empty() || a.cfe_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if a.attention_heads == 0 || !a.dsfe_width.is_multiple_of(a.attention_heads) {
            return Err(Error::Config(format!(
                "dsfe_width {} not divisible by attention_heads {}",
                a.dsfe_width, a.attention_heads
            )));
        }
        if self.num_sources == 0 {
            return Err(Error::Config("at least one source domain is required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(a.leaky_alpha > 0.0 && a.leaky_alpha < 1.0) {
            return Err(Error::Config(format!("leaky_alpha {} outside (0, 1)", a.leaky_alpha)));
        }
        Ok(())
    }

    pub fn common_width(&self) -> usize {
        *self.arch.cfe_widths.last().expect("validated non-empty")
    }

    /// Number of scalar parameters implied by the widths.
    pub fn param_count(&self) -> usize {
        let a = &self.arch;
        let affine = |i: usize, o: usize| i * o + o;
        let mut total = 0;
        let mut prev = self.input_dim;
        for &w in &a.cfe_widths {
            total += affine(prev, w);
            prev = w;
        }
        total += 2 * prev;
        let hd = a.dsfe_width / a.attention_heads;
        let disc = affine(a.dsfe_width, a.discriminator_hidden) + affine(a.discriminator_hidden, 1);
        let per_branch = affine(prev, a.dsfe_width)
            + 3 * a.attention_heads * hd * hd
            + a.dsfe_width * a.dsfe_width
            + affine(a.dsfe_width, a.classifier_hidden)
            + affine(a.classifier_hidden, self.num_classes);
        total += self.num_sources * per_branch;
        total += match a.discriminator {
            DiscriminatorMode::PerBranch => self.num_sources * disc,
            DiscriminatorMode::Shared => disc,
        };
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two affine layers with a leaky ReLU between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), scale: f64, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, scale, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, scale, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, alpha: f64) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.leaky_relu(h, alpha);
        self.out.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceBranch {
    pub branch_id: usize,
    pub dsfe: Linear,
    pub attention: AttentionBlock,
    pub classifier: Head,
    pub discriminator: Option<Head>,
    pub prototypes: PrototypeBank,
}

#[derive(Debug, Clone)]
pub struct Damsdan {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub cfe: Vec<Linear>,
    pub bn: BatchNorm,
    pub branches: Vec<SourceBranch>,
    pub shared_discriminator: Option<Head>,
    pub fusion: FusionWeights,
}

impl Damsdan {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let a = config.arch.clone();
        let s = a.init_scale;
        let mut params = ParamStore::new();
        let mut cfe = Vec::new();
        let mut prev = config.input_dim;
        for (i, &w) in a.cfe_widths.iter().enumerate() {
            cfe.push(Linear::new(&mut params, &format!("cfe.{i}"), prev, w, s, rng));
            prev = w;
        }
        let bn = BatchNorm::new(&mut params, "cfe.bn", prev, a.bn_momentum);
        let disc_dims = (a.dsfe_width, a.discriminator_hidden, 1);
        let mut branches = Vec::with_capacity(config.num_sources);
        for m in 0..config.num_sources {
            let name = format!("branch{m}");
            let dsfe = Linear::new(&mut params, &format!("{name}.dsfe"), prev, a.dsfe_width, s, rng);
            let attention = AttentionBlock::new(&mut params, &format!("{name}.attn"), a.dsfe_width, a.attention_heads, s, rng)?;
            let classifier = Head::new(
                &mut params,
                &format!("{name}.cls"),
                (a.dsfe_width, a.classifier_hidden, config.num_classes),
                s,
                rng,
            );
            let discriminator = (a.discriminator == DiscriminatorMode::PerBranch)
                .then(|| Head::new(&mut params, &format!("{name}.disc"), disc_dims, s, rng));
            branches.push(SourceBranch {
                branch_id: m,
                dsfe,
                attention,
                classifier,
                discriminator,
                prototypes: PrototypeBank::new(config.num_classes, a.dsfe_width),
            });
        }
        let shared_discriminator = (a.discriminator == DiscriminatorMode::Shared)
            .then(|| Head::new(&mut params, "disc", disc_dims, s, rng));
        let fusion = FusionWeights::uniform(config.num_sources, 0);
        Ok(Self {
            config,
            params,
            cfe,
            bn,
            branches,
            shared_discriminator,
            fusion,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.branches.len()
    }

    fn check_cols(&self, g: &Graph, x: Var, want: usize, op: &'static str) -> Result<()> {
        let got = g.shape(x).1;
        if got != want {
            return Err(Error::dim(op, format!("{got} columns"), format!("{want} expected")));
        }
        Ok(())
    }

    fn branch(&self, m: usize) -> Result<&SourceBranch> {
        self.branches
            .get(m)
            .ok_or_else(|| Error::dim("branch", m, format!("{} branches", self.branches.len())))
    }

    /// Common encoder: affine layers with leaky ReLU, then batch norm.
    /// Train mode normalizes by batch statistics and updates the running moments.
    pub fn encode_common(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let h = self.cfe_stack(g, x)?;
        match mode {
            Mode::Train => self.bn.forward_train(g, &self.params, h),
            Mode::Eval => self.bn.forward_eval(g, &self.params, h),
        }
    }

    /// Eval-mode common encoder; never mutates the model.
    pub fn encode_common_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.cfe_stack(g, x)?;
        self.bn.forward_eval(g, &self.params, h)
    }

    fn cfe_stack(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_cols(g, x, self.config.input_dim, "encode_common")?;
        let mut h = x;
        for layer in &self.cfe {
            h = layer.forward(g, &self.params, h)?;
            h = g.leaky_relu(h, self.config.arch.leaky_alpha);
        }
        Ok(h)
    }

    /// Domain-specific encoder of branch `m`: affine + leaky ReLU, then
    /// multi-head self-attention.
    pub fn encode_specific(&self, g: &mut Graph, m: usize, f_com: Var, mode: Mode) -> Result<Var> {
        self.check_cols(g, f_com, self.config.common_width(), "encode_specific")?;
        let b = self.branch(m)?;
        let h = b.dsfe.forward(g, &self.params, f_com)?;
        let h = g.leaky_relu(h, self.config.arch.leaky_alpha);
        let attn_mode = match mode {
            Mode::Train => self.config.arch.attention_mode,
            Mode::Eval => AttentionMode::PerSample,
        };
        b.attention.forward(g, &self.params, h, attn_mode)
    }

    pub fn class_logits(&self, g: &mut Graph, m: usize, f: Var) -> Result<Var> {
        self.check_cols(g, f, self.config.arch.dsfe_width, "classify")?;
        self.branch(m)?
            .classifier
            .forward(g, &self.params, f, self.config.arch.leaky_alpha)
    }

    /// Class probabilities of branch `m`.
    pub fn classify(&self, g: &mut Graph, m: usize, f: Var) -> Result<Var> {
        let logits = self.class_logits(g, m, f)?;
        Ok(g.softmax_rows(logits))
    }

    /// Domain probability for each row of `f`. The features pass through a
    /// gradient-reversal boundary scaled by `grl_lambda` first.
    pub fn discriminate(&self, g: &mut Graph, m: usize, f: Var, grl_lambda: f64) -> Result<Var> {
        if grl_lambda < 0.0 {
            return Err(Error::Config(format!("grl_lambda must be >= 0, got {grl_lambda}")));
        }
        let r = g.grad_reverse(f, grl_lambda);
        self.discriminate_plain(g, m, r)
    }

    /// Discriminator without the reversal boundary.
    pub fn discriminate_plain(&self, g: &mut Graph, m: usize, f: Var) -> Result<Var> {
        self.check_cols(g, f, self.config.arch.dsfe_width, "discriminate")?;
        let head = match &self.shared_discriminator {
            Some(h) => h,
            None => self.branch(m)?.discriminator.as_ref().expect("per-branch discriminator"),
        };
        let logit = head.forward(g, &self.params, f, self.config.arch.leaky_alpha)?;
        Ok(g.sigmoid(logit))
    }

    /// Eval-mode aligned features of every branch for the rows of `x`.
    pub fn branch_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let f_com = self.common_features(x)?;
        (0..self.num_sources())
            .map(|m| self.specific_features(&f_com, m))
            .collect()
    }

    /// Eval-mode common features.
    pub fn common_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.encode_common_eval(&mut g, xv)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode aligned features of branch `m` from common features.
    pub fn specific_features(&self, f_com: &Tensor, m: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let fv = g.constant(f_com.clone());
        let f = self.encode_specific(&mut g, m, fv, Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode class probabilities of every branch.
    pub fn branch_probs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let feats = self.branch_features(x)?;
        feats
            .iter()
            .enumerate()
            .map(|(m, f)| {
                let mut g = Graph::new();
                let fv = g.constant(f.clone());
                let logits = self.class_logits(&mut g, m, fv)?;
                Ok(softmax_rows(g.value(logits)))
            })
            .collect()
    }

    /// Fused class probabilities using the current fusion weights.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        aggregate_predictions(&self.branch_probs(x)?, &self.fusion.final_weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(m: usize) -> EncoderConfig {
        EncoderConfig::new(6, 3, m, ArchConfig::default())
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for &(d, c, m) in &[(310, 3, 14), (160, 2, 10), (20, 3, 4)] {
            let cfg = EncoderConfig::new(d, c, m, ArchConfig::default());
            let model = Damsdan::new(cfg.clone(), &mut Rng::new(0)).unwrap();
            assert_eq!(model.params.scalar_count(), cfg.param_count());
        }
        // 310-256-128-64 encoder + batch norm, then per branch:
        // 64->32, 4 heads of 8x8 (q,k,v), 32x32 out, 32-16-3 classifier, 32-16-1 discriminator.
        let cfe = 310 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 128;
        let branch = 64 * 32 + 32 + 3 * 4 * 64 + 1024 + 32 * 16 + 16 + 16 * 3 + 3 + 32 * 16 + 16 + 16 + 1;
        let cfg = EncoderConfig::new(310, 3, 1, ArchConfig::default());
        assert_eq!(cfg.param_count(), cfe + branch);
    }

    #[test]
    fn shared_discriminator_counts_once() {
        let arch = ArchConfig {
            discriminator: DiscriminatorMode::Shared,
            ..ArchConfig::default()
        };
        let cfg = EncoderConfig::new(20, 3, 4, arch);
        let model = Damsdan::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        assert_eq!(model.params.scalar_count(), cfg.param_count());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(2);
        cfg.arch.attention_heads = 3;
        assert!(cfg.validate().is_err());
        assert!(small_config(0).validate().is_err());
        let mut one_class = small_config(1);
        one_class.num_classes = 1;
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn common_shape_and_width_check() {
        let cfg = EncoderConfig::new(310, 3, 1, ArchConfig::default());
        let mut model = Damsdan::new(cfg, &mut Rng::new(3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(256, 310, 0.1));
        let f = model.encode_common(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(f), (256, 64));
        let bad = g.constant(Tensor::zeros(2, 309));
        assert!(matches!(
            model.encode_common(&mut g, bad, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_preactivation() {
        let mut model = Damsdan::new(small_config(1), &mut Rng::new(5)).unwrap();
        for l in model.cfe.clone() {
            model.params.get_mut(l.bias).tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 6));
        let h = model.cfe_stack(&mut g, x).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let model = Damsdan::new(small_config(2), &mut Rng::new(9)).unwrap();
        let x = Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.0, 1.0, 0.5]; 2]).unwrap();
        for f in model.branch_features(&x).unwrap() {
            assert_eq!(f.row(0), f.row(1));
        }
    }

    #[test]
    fn single_sample_attention_is_value_projection() {
        let model = Damsdan::new(small_config(1), &mut Rng::new(11)).unwrap();
        let attn = &model.branches[0].attention;
        let mut store = model.params.clone();
        store.get_mut(attn.w_out).tensor = Tensor::identity(32);
        let x = Tensor::from_vec(1, 32, (0..32).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let across = attn.forward(&mut g, &store, xv, AttentionMode::AcrossBatch).unwrap();
        let per = attn.forward(&mut g, &store, xv, AttentionMode::PerSample).unwrap();
        let (a, p) = (g.value(across).clone(), g.value(per).clone());
        for (u, v) in a.data().iter().zip(p.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        // With W_out = I the output is the concatenated value projections.
        for h in 0..4 {
            let block = x.slice_cols(h * 8, 8);
            let v = block.matmul(store.value(attn.wv[h])).unwrap();
            for j in 0..8 {
                assert!((a.get(0, h * 8 + j) - v.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_orthogonal_case() {
        let model = Damsdan::new(small_config(1), &mut Rng::new(12)).unwrap();
        let attn = &model.branches[0].attention;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(5, 32, (0..160).map(|i| ((i * 7) % 11) as f64 / 5.0).collect()).unwrap());
        let w = attn.attention_weights(&mut g, &model.params, x, 2).unwrap();
        for row in g.value(w).iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let mut store = model.params.clone();
        for &id in attn.wq.iter().chain(&attn.wk) {
            store.get_mut(id).tensor = Tensor::identity(8);
        }
        let mut rows = vec![vec![0.0; 32]; 2];
        rows[0][0] = 1.0;
        rows[1][1] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let w = attn.attention_weights(&mut g, &store, x, 0).unwrap();
        let wv = g.value(w);
        // Scores [[s,0],[0,s]] with s = 1/sqrt(8); row-wise softmax is symmetric.
        let s = 1.0 / 8f64.sqrt();
        let expect = s.exp() / (s.exp() + 1.0);
        assert!((wv.get(0, 0) - expect).abs() < 1e-12);
        assert!((wv.get(0, 0) - wv.get(1, 1)).abs() < 1e-15);
        assert!((wv.get(0, 1) - wv.get(1, 0)).abs() < 1e-15);
        // Head 1 sees all-zero blocks, so every score ties.
        let w1 = attn.attention_weights(&mut g, &store, x, 1).unwrap();
        assert!(g.value(w1).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn classifier_uniform_with_zero_weights() {
        let mut model = Damsdan::new(small_config(1), &mut Rng::new(2)).unwrap();
        let head = model.branches[0].classifier.clone();
        for id in [head.hidden.weight, head.hidden.bias, head.out.weight, head.out.bias] {
            model.params.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::filled(4, 32, 0.7));
        let p = model.classify(&mut g, 0, f).unwrap();
        assert_eq!(g.shape(p), (4, 3));
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn classify_shape_for_session_sized_batch() {
        let model = Damsdan::new(small_config(1), &mut Rng::new(2)).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::filled(3394, 32, 0.1));
        let p = model.classify(&mut g, 0, f).unwrap();
        assert_eq!(g.shape(p), (3394, 3));
        for row in g.value(p).iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_range_and_zero_lambda() {
        let model = Damsdan::new(small_config(1), &mut Rng::new(4)).unwrap();
        let mut g = Graph::new();
        let f = g.variable(Tensor::from_vec(3, 32, (0..96).map(|i| (i as f64 - 40.0) / 9.0).collect()).unwrap());
        let d = model.discriminate(&mut g, 0, f, 0.0).unwrap();
        assert!(g.value(d).data().iter().all(|&p| p > 0.0 && p < 1.0));
        let loss = g.log_loss(d, true).unwrap();
        let grads = g.gradients(loss).unwrap();
        let gf = grads[0].as_ref().unwrap();
        assert!(gf.iter().all(|&v| v == 0.0));
        assert!(model.discriminate(&mut g, 0, f, -1.0).is_err());
    }
}
