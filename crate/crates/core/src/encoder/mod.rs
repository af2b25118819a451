// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked BERT-style encoder.
//!
//! The forward pass is the post-layer-norm encoder: embeddings (token +
//! position + segment, then layer norm), and per block multi-head attention
//! with pad keys masked, residual add and layer norm, then a GELU MLP with
//! residual add and layer norm. Every named [`HookPoint`] fires right after its
//! value is computed; interventions registered for it replace or edit the value
//! before any downstream computation sees it, and the cache records the value
//! as the downstream computation sees it.

pub mod checkpoint;
pub mod hooks;
pub mod safetensors;
pub mod weights;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, matmul, softmax_rows_masked, GeluVariant, Tensor};
use crate::tokenizer::TokenSeq;

pub use checkpoint::{map_checkpoint, unmap_checkpoint};
pub use hooks::{list_hooks, ActivationCache, HookPoint, Intervention, Site};
pub use safetensors::{load_safetensors, save_safetensors};
pub use weights::{random_init, LayerNormParams, LayerWeights, Weights};

/// How a sequence is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state of the first (`[CLS]`) position.
    #[default]
    Cls,
    /// Mean over non-pad positions.
    Mean,
}

fn default_type_vocab() -> usize {
    2
}

fn default_ln_eps() -> f32 {
    1e-12
}

fn default_pad_id() -> u32 {
    0
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
    #[serde(default)]
    pub gelu_variant: GeluVariant,
    #[serde(default)]
    pub pooling: Pooling,
    /// Positions holding this id are masked as attention keys.
    #[serde(default = "default_pad_id")]
    pub pad_token_id: u32,
}

impl ModelConfig {
    /// Two layers, two heads, `d_model = 16`: the desk-scale test model.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_mlp: 32,
            vocab_size,
            n_ctx: 64,
            type_vocab_size: 2,
            ln_eps: 1e-12,
            gelu_variant: GeluVariant::Erf,
            pooling: Pooling::Cls,
            pad_token_id: 0,
        }
    }

    /// `bert-base-uncased` dimensions.
    pub fn bert_base() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_mlp: 3072,
            vocab_size: 30522,
            n_ctx: 512,
            type_vocab_size: 2,
            ln_eps: 1e-12,
            gelu_variant: GeluVariant::Erf,
            pooling: Pooling::Cls,
            pad_token_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 || self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.n_ctx < 2 {
            return fail(format!("n_ctx must be >= 2, got {}", self.n_ctx));
        }
        if self.ln_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        if self.n_layers == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.type_vocab_size == 0
        {
            return fail("n_layers, d_mlp, vocab_size and type_vocab_size must be >= 1".into());
        }
        if self.pad_token_id as usize >= self.vocab_size {
            return fail(format!(
                "pad_token_id {} out of range for vocab_size {}",
                self.pad_token_id, self.vocab_size
            ));
        }
        Ok(())
    }
}

/// Validated config plus shared weights.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: ModelConfig,
    weights: Arc<Weights>,
}

impl Encoder {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights: Arc::new(weights),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn forward(
        &self,
        tokens: &TokenSeq,
        interventions: &[(HookPoint, Intervention)],
    ) -> Result<Tensor> {
        forward(tokens, &self.weights, &self.config, interventions)
    }

    pub fn run_with_cache(&self, tokens: &TokenSeq) -> Result<(Tensor, ActivationCache)> {
        run_with_cache(tokens, &self.weights, &self.config)
    }

    /// Forward with interventions, optionally recording every activation.
    pub fn run(
        &self,
        tokens: &TokenSeq,
        interventions: &[(HookPoint, Intervention)],
        capture: bool,
    ) -> Result<(Tensor, Option<ActivationCache>)> {
        run_hooked(tokens, &self.weights, &self.config, interventions, capture)
    }
}

/// Final hidden states `[seq, d_model]` with `interventions` applied.
pub fn forward(
    tokens: &TokenSeq,
    weights: &Weights,
    config: &ModelConfig,
    interventions: &[(HookPoint, Intervention)],
) -> Result<Tensor> {
    run_hooked(tokens, weights, config, interventions, false).map(|(h, _)| h)
}

/// Intervention-free forward that records every hook.
pub fn run_with_cache(
    tokens: &TokenSeq,
    weights: &Weights,
    config: &ModelConfig,
) -> Result<(Tensor, ActivationCache)> {
    let (hidden, cache) = run_hooked(tokens, weights, config, &[], true)?;
    Ok((hidden, cache.expect("capture requested")))
}

struct Pass<'a> {
    config: &'a ModelConfig,
    seq: usize,
    interventions: &'a [(HookPoint, Intervention)],
    cache: Option<ActivationCache>,
}

impl Pass<'_> {
    fn hook(&mut self, point: HookPoint, mut value: Tensor) -> Result<Tensor> {
        for (_, iv) in self.interventions.iter().filter(|(p, _)| *p == point) {
            match iv {
                Intervention::Replace(r) => value = r.clone(),
                Intervention::Edit(f) => {
                    f(&mut value)?;
                    if !value.is_finite() {
                        return Err(Error::InvalidTensor(format!(
                            "edit at `{point}` produced non-finite values"
                        )));
                    }
                }
            }
        }
        if let Some(cache) = &mut self.cache {
            cache.insert(point, value.clone());
        }
        Ok(value)
    }

    fn check_interventions(&self) -> Result<()> {
        for (point, iv) in self.interventions {
            point.check(self.config)?;
            if let Intervention::Replace(t) = iv {
                let expected = point.expected_shape(self.config, self.seq);
                if t.shape() != expected.as_slice() {
                    return Err(Error::HookShape {
                        hook: point.to_string(),
                        expected,
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_tokens(tokens: &TokenSeq, config: &ModelConfig) -> Result<()> {
    let seq = tokens.len();
    if seq == 0 || seq > config.n_ctx {
        return Err(Error::Tokenize(format!(
            "sequence length {seq} outside 1..={}",
            config.n_ctx
        )));
    }
    if tokens.type_ids.len() != seq {
        return Err(Error::Tokenize("ids and type_ids differ in length".into()));
    }
    if let Some(&id) = tokens
        .ids
        .iter()
        .find(|&&id| id as usize >= config.vocab_size)
    {
        return Err(Error::Tokenize(format!(
            "token id {id} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    if let Some(&t) = tokens
        .type_ids
        .iter()
        .find(|&&t| t as usize >= config.type_vocab_size)
    {
        return Err(Error::Tokenize(format!(
            "type id {t} out of range for type_vocab_size {}",
            config.type_vocab_size
        )));
    }
    Ok(())
}

fn embed(tokens: &TokenSeq, weights: &Weights, config: &ModelConfig) -> Result<Tensor> {
    let d = config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (pos, (&id, &ty)) in tokens.ids.iter().zip(&tokens.type_ids).enumerate() {
        let tok = weights.token_emb.row(id as usize);
        let p = weights.pos_emb.row(pos);
        let t = weights.type_emb.row(ty as usize);
        data.extend(tok.iter().zip(p).zip(t).map(|((a, b), c)| a + b + c));
    }
    let summed = Tensor::new(vec![tokens.len(), d], data)?;
    layer_norm(
        &summed,
        &weights.emb_ln.gamma,
        &weights.emb_ln.beta,
        config.ln_eps,
    )
}

/// `x [seq, d_model]` through per-head `w [H, d_model, d_head]` plus `b [H, d_head]`,
/// laid out `[seq, H, d_head]`.
fn project_heads(x: &Tensor, w: &Tensor, b: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (seq, d, h, dh) = (x.shape()[0], config.d_model, config.n_heads, config.d_head);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0f32; seq * h * dh];
    for i in 0..seq {
        let xr = &xd[i * d..(i + 1) * d];
        for head in 0..h {
            let o = &mut out[(i * h + head) * dh..(i * h + head + 1) * dh];
            o.copy_from_slice(&bd[head * dh..(head + 1) * dh]);
            for (t, &xv) in xr.iter().enumerate() {
                let wr = &wd[(head * d + t) * dh..(head * d + t + 1) * dh];
                for (ov, wv) in o.iter_mut().zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![seq, h, dh], out)
}

fn attention_pattern(
    q: &Tensor,
    k: &Tensor,
    key_mask: &[bool],
    config: &ModelConfig,
) -> Result<Tensor> {
    let (seq, h, dh) = (q.shape()[0], config.n_heads, config.d_head);
    let scale = 1.0 / (dh as f32).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut scores = vec![0.0f32; h * seq * seq];
    for head in 0..h {
        for i in 0..seq {
            let qi = &qd[(i * h + head) * dh..(i * h + head + 1) * dh];
            for j in 0..seq {
                let kj = &kd[(j * h + head) * dh..(j * h + head + 1) * dh];
                let s: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                scores[(head * seq + i) * seq + j] = s * scale;
            }
        }
    }
    let scores = Tensor::new(vec![h, seq, seq], scores)?;
    softmax_rows_masked(&scores, Some(key_mask))
}

fn mix_values(pattern: &Tensor, v: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (seq, h, dh) = (v.shape()[0], config.n_heads, config.d_head);
    let (pd, vd) = (pattern.data(), v.data());
    let mut z = vec![0.0f32; seq * h * dh];
    for head in 0..h {
        for i in 0..seq {
            let zi = &mut z[(i * h + head) * dh..(i * h + head + 1) * dh];
            for j in 0..seq {
                let a = pd[(head * seq + i) * seq + j];
                if a == 0.0 {
                    continue;
                }
                let vj = &vd[(j * h + head) * dh..(j * h + head + 1) * dh];
                for (zv, vv) in zi.iter_mut().zip(vj) {
                    *zv += a * vv;
                }
            }
        }
    }
    Tensor::new(vec![seq, h, dh], z)
}

/// Shared implementation of [`forward`] and [`run_with_cache`].
pub fn run_hooked(
    tokens: &TokenSeq,
    weights: &Weights,
    config: &ModelConfig,
    interventions: &[(HookPoint, Intervention)],
    capture: bool,
) -> Result<(Tensor, Option<ActivationCache>)> {
    let mask = tokens.attention_mask(config.pad_token_id);
    run_hooked_masked(tokens, weights, config, interventions, capture, Some(&mask))
}

/// Like [`run_hooked`], with an explicit key mask (`true` = attendable)
/// instead of the one implied by `pad_token_id`. `None` masks nothing.
pub fn run_hooked_masked(
    tokens: &TokenSeq,
    weights: &Weights,
    config: &ModelConfig,
    interventions: &[(HookPoint, Intervention)],
    capture: bool,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor, Option<ActivationCache>)> {
    check_tokens(tokens, config)?;
    let seq = tokens.len();
    let all = vec![true; seq];
    let key_mask = key_mask.unwrap_or(&all);
    if key_mask.len() != seq {
        return Err(Error::Tokenize(format!(
            "key mask of length {} for sequence of length {seq}",
            key_mask.len()
        )));
    }
    let mut pass = Pass {
        config,
        seq,
        interventions,
        cache: capture.then(|| ActivationCache::new(tokens.clone())),
    };
    pass.check_interventions()?;

    let mut x = pass.hook(HookPoint::Embed, embed(tokens, weights, config)?)?;
    for (l, lw) in weights.layers.iter().enumerate() {
        let block = |site| HookPoint::Block(l, site);
        x = pass.hook(block(Site::ResidPre), x)?;
        let q = pass.hook(block(Site::Q), project_heads(&x, &lw.w_q, &lw.b_q, config)?)?;
        let k = pass.hook(block(Site::K), project_heads(&x, &lw.w_k, &lw.b_k, config)?)?;
        let v = pass.hook(block(Site::V), project_heads(&x, &lw.w_v, &lw.b_v, config)?)?;
        let pattern = pass.hook(
            block(Site::Pattern),
            attention_pattern(&q, &k, key_mask, config)?,
        )?;
        let z = pass.hook(block(Site::Z), mix_values(&pattern, &v, config)?)?;
        let z_flat = z.reshape(vec![seq, config.d_model])?;
        let w_o = lw
            .w_o
            .clone()
            .reshape(vec![config.d_model, config.d_model])?;
        let attn_out = pass.hook(
            block(Site::AttnOut),
            matmul(&z_flat, &w_o)?.add_bias(&lw.b_o)?,
        )?;
        let resid_mid = layer_norm(
            &x.add(&attn_out)?,
            &lw.ln_attn.gamma,
            &lw.ln_attn.beta,
            config.ln_eps,
        )?;
        let resid_mid = pass.hook(block(Site::ResidMid), resid_mid)?;
        let hidden = gelu(
            &matmul(&resid_mid, &lw.w_in)?.add_bias(&lw.b_in)?,
            config.gelu_variant,
        );
        let mlp_out = pass.hook(
            block(Site::MlpOut),
            matmul(&hidden, &lw.w_out)?.add_bias(&lw.b_out)?,
        )?;
        let resid_post = layer_norm(
            &resid_mid.add(&mlp_out)?,
            &lw.ln_mlp.gamma,
            &lw.ln_mlp.beta,
            config.ln_eps,
        )?;
        x = pass.hook(block(Site::ResidPost), resid_post)?;
    }
    Ok((x, pass.cache))
}
