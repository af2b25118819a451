// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encoder parameters and seeded random initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![d], 1.0),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

/// Parameters of one encoder block. Attention matrices are stored per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `[n_heads, d_model, d_head]`
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[n_heads, d_head]`
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    /// `[n_heads, d_head, d_model]`
    pub w_o: Tensor,
    /// `[d_model]`
    pub b_o: Tensor,
    pub ln_attn: LayerNormParams,
    /// `[d_model, d_mlp]`
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// `[d_mlp, d_model]`
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln_mlp: LayerNormParams,
}

/// Encoder body parameters. Task heads (pooler, classifier) live in `ranking`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab_size, d_model]`
    pub token_emb: Tensor,
    /// `[n_ctx, d_model]`
    pub pos_emb: Tensor,
    /// `[type_vocab_size, d_model]`
    pub type_emb: Tensor,
    pub emb_ln: LayerNormParams,
    pub layers: Vec<LayerWeights>,
}

fn expect(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Config(format!(
            "parameter `{name}` has shape {:?}, config implies {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Weights {
    /// Checks every tensor's shape against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (d, h, dh, m) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
        expect("token_emb", &self.token_emb, &[config.vocab_size, d])?;
        expect("pos_emb", &self.pos_emb, &[config.n_ctx, d])?;
        expect("type_emb", &self.type_emb, &[config.type_vocab_size, d])?;
        expect("emb_ln.gamma", &self.emb_ln.gamma, &[d])?;
        expect("emb_ln.beta", &self.emb_ln.beta, &[d])?;
        if self.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layers of weights for n_layers = {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let n = |p: &str| format!("layers.{l}.{p}");
            expect(&n("w_q"), &lw.w_q, &[h, d, dh])?;
            expect(&n("w_k"), &lw.w_k, &[h, d, dh])?;
            expect(&n("w_v"), &lw.w_v, &[h, d, dh])?;
            expect(&n("b_q"), &lw.b_q, &[h, dh])?;
            expect(&n("b_k"), &lw.b_k, &[h, dh])?;
            expect(&n("b_v"), &lw.b_v, &[h, dh])?;
            expect(&n("w_o"), &lw.w_o, &[h, dh, d])?;
            expect(&n("b_o"), &lw.b_o, &[d])?;
            expect(&n("ln_attn.gamma"), &lw.ln_attn.gamma, &[d])?;
            expect(&n("ln_attn.beta"), &lw.ln_attn.beta, &[d])?;
            expect(&n("w_in"), &lw.w_in, &[d, m])?;
            expect(&n("b_in"), &lw.b_in, &[m])?;
            expect(&n("w_out"), &lw.w_out, &[m, d])?;
            expect(&n("b_out"), &lw.b_out, &[d])?;
            expect(&n("ln_mlp.gamma"), &lw.ln_mlp.gamma, &[d])?;
            expect(&n("ln_mlp.beta"), &lw.ln_mlp.beta, &[d])?;
        }
        Ok(())
    }
}

/// Draws tensors from `N(0, 0.02^2)` in a fixed order.
pub(crate) struct NormalSampler {
    rng: ChaCha8Rng,
    dist: Normal<f32>,
}

impl NormalSampler {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Normal::new(0.0, 0.02).expect("valid std"),
        }
    }

    pub(crate) fn tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("normal samples are finite")
    }
}

/// Seeded random weights: every matrix and bias entry drawn from
/// `N(0, 0.02^2)`, layer norms set to the identity (`gamma = 1`, `beta = 0`).
pub fn random_init(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let (d, h, dh, m) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
    let mut s = NormalSampler::new(seed);
    let token_emb = s.tensor(vec![config.vocab_size, d]);
    let pos_emb = s.tensor(vec![config.n_ctx, d]);
    let type_emb = s.tensor(vec![config.type_vocab_size, d]);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            w_q: s.tensor(vec![h, d, dh]),
            b_q: s.tensor(vec![h, dh]),
            w_k: s.tensor(vec![h, d, dh]),
            b_k: s.tensor(vec![h, dh]),
            w_v: s.tensor(vec![h, d, dh]),
            b_v: s.tensor(vec![h, dh]),
            w_o: s.tensor(vec![h, dh, d]),
            b_o: s.tensor(vec![d]),
            ln_attn: LayerNormParams::identity(d),
            w_in: s.tensor(vec![d, m]),
            b_in: s.tensor(vec![m]),
            w_out: s.tensor(vec![m, d]),
            b_out: s.tensor(vec![d]),
            ln_mlp: LayerNormParams::identity(d),
        })
        .collect();
    Ok(Weights {
        token_emb,
        pos_emb,
        type_emb,
        emb_ln: LayerNormParams::identity(d),
        layers,
    })
}
