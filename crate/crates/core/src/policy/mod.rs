//! A small decoder-only transformer over characters, with in-repo
//! reverse-mode differentiation.
//!
//! Pre-norm blocks: `x += Attn(LN(x))`, `x += MLP(LN(x))`, then a final
//! layer norm and an output projection. Parameters live in one flat buffer
//! whose layout is given by [`ParamLayout`].

pub mod checkpoint;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod sample;
pub mod scalar;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::rng::{purpose, RngStream};

pub use model::{accumulate_grad, logprobs, token_stats, AttnMask, Decoder, SeqBatch, TokenStat};
pub use optim::Adam;
pub use sample::{sample, sample_group, Sample, SamplingConfig};
pub use scalar::Scalar;

/// Parameter count of [`PolicyConfig::default`]. Changing the architecture
/// changes this number and the checkpoint layout.
pub const DEFAULT_PARAM_COUNT: usize = 178_923;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            context: 1024,
        }
    }
}

impl PolicyConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn vocab(&self) -> usize {
        vocab::VOCAB_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.context == 0 {
            return Err(CbrlError::config("policy dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(CbrlError::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    /// `d x 3d`: query, key and value projections side by side.
    pub w_qkv: usize,
    pub w_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Offsets of every tensor in the flat parameter buffer. All matrices are
/// row-major `inputs x outputs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff(), cfg.vocab());
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(cfg.context * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                w_o: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_1: take(d * f),
                b_1: take(f),
                w_2: take(f * d),
                b_2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T = f32> {
    pub config: PolicyConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        Ok(Self {
            config,
            data: vec![T::zero(); layout.total],
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Seeded initialization: weights uniform in `±1/sqrt(fan_in)` (so `1/sqrt(d)`
/// for everything fed by the residual stream), layer-norm gains 1, biases 0.
pub fn init_policy<T: Scalar>(seed: u64, config: PolicyConfig) -> Result<PolicyParams<T>> {
    let mut p = PolicyParams::<T>::zeros(config)?;
    let mut rng = RngStream::derive(seed, &[purpose::INIT]);
    let (d, f, v) = (config.d_model, config.d_ff(), config.vocab());
    let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
    let mut fill = |data: &mut [T], off: usize, n: usize, scale: f64| {
        for x in &mut data[off..off + n] {
            *x = T::from_f64((2.0 * rng.uniform() - 1.0) * scale);
        }
    };
    let lay = p.layout.clone();
    fill(&mut p.data, lay.tok_emb, v * d, inv_sqrt(d));
    fill(&mut p.data, lay.pos_emb, config.context * d, inv_sqrt(d));
    for l in &lay.layers {
        fill(&mut p.data, l.w_qkv, d * 3 * d, inv_sqrt(d));
        fill(&mut p.data, l.w_o, d * d, inv_sqrt(d));
        fill(&mut p.data, l.w_1, d * f, inv_sqrt(d));
        fill(&mut p.data, l.w_2, f * d, inv_sqrt(f));
    }
    fill(&mut p.data, lay.w_out, d * v, inv_sqrt(d));
    for off in lay
        .layers
        .iter()
        .flat_map(|l| [l.ln1_g, l.ln2_g])
        .chain([lay.lnf_g])
    {
        p.data[off..off + d].fill(T::one());
    }
    Ok(p)
}
