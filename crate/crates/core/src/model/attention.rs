use serde::{Deserialize, Serialize};

use super::layers::uniform_init;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Var};

/// Which axis attention mixes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Rows of the batch attend to each other. Predictions then depend on
    /// batch composition, and inference always runs per sample.
    AcrossBatch,
    /// Each sample attends only to itself, so every head reduces to its
    /// value projection.
    #[default]
    PerSample,
}

/// Multi-head self-attention over column blocks of the input.
///
/// The `D_s` input columns are split into `heads` blocks of width
/// `D_s / heads`; each block gets its own query, key and value matrices.
/// Head outputs are concatenated and projected by `w_out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub w_out: ParamId,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let head_dim = width / heads;
        let mut mk = |kind: &str, h: usize, rng: &mut Rng| {
            store.add(
                format!("{name}.{kind}{h}"),
                uniform_init(head_dim, head_dim, head_dim, scale, rng),
            )
        };
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(mk("wq", h, rng));
            wk.push(mk("wk", h, rng));
            wv.push(mk("wv", h, rng));
        }
        let w_out = store.add(format!("{name}.w_out"), uniform_init(width, width, width, scale, rng));
        Ok(Self {
            heads,
            head_dim,
            wq,
            wk,
            wv,
            w_out,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn param_count(&self) -> usize {
        3 * self.heads * self.head_dim * self.head_dim + self.width() * self.width()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: AttentionMode) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.width() {
            return Err(Error::dim("attention", width, self.width()));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let block = g.slice_cols(x, h * self.head_dim, self.head_dim)?;
            let wv = g.param(store, self.wv[h]);
            let v = g.matmul(block, wv)?;
            let out = match mode {
                AttentionMode::PerSample => v,
                AttentionMode::AcrossBatch => {
                    let wq = g.param(store, self.wq[h]);
                    let wk = g.param(store, self.wk[h]);
                    let q = g.matmul(block, wq)?;
                    let k = g.matmul(block, wk)?;
                    let scores = g.matmul_nt(q, k)?;
                    let scores = g.scale(scores, scale);
                    let attn = g.softmax_rows(scores);
                    g.matmul(attn, v)?
                }
            };
            heads.push(out);
        }
        let cat = g.concat_cols(&heads)?;
        let w_out = g.param(store, self.w_out);
        g.matmul(cat, w_out)
    }

    /// Attention weight matrix of head `h` (rows sum to one).
    pub fn attention_weights(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize) -> Result<Var> {
        let block = g.slice_cols(x, h * self.head_dim, self.head_dim)?;
        let wq = g.param(store, self.wq[h]);
        let wk = g.param(store, self.wk[h]);
        let q = g.matmul(block, wq)?;
        let k = g.matmul(block, wk)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        Ok(g.softmax_rows(scores))
    }
}
