// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mapping between released BERT-family checkpoint names and [`Weights`].
//!
//! Linear layers in released checkpoints are stored `[out, in]` and applied as
//! `x W^T + b`. Attention projections are fused across heads; they are split
//! into per-head blocks here.
//!
//! | checkpoint name (after the optional `bert.` / `electra.` / `roberta.` prefix) | field |
//! |---|---|
//! | `embeddings.word_embeddings.weight` | `token_emb` |
//! | `embeddings.position_embeddings.weight` | `pos_emb` |
//! | `embeddings.token_type_embeddings.weight` | `type_emb` |
//! | `embeddings.LayerNorm.{weight,bias}` | `emb_ln` |
//! | `encoder.layer.{l}.attention.self.{query,key,value}.{weight,bias}` | `w_q/w_k/w_v`, `b_q/b_k/b_v` |
//! | `encoder.layer.{l}.attention.output.dense.{weight,bias}` | `w_o`, `b_o` |
//! | `encoder.layer.{l}.attention.output.LayerNorm.{weight,bias}` | `ln_attn` |
//! | `encoder.layer.{l}.intermediate.dense.{weight,bias}` | `w_in`, `b_in` |
//! | `encoder.layer.{l}.output.dense.{weight,bias}` | `w_out`, `b_out` |
//! | `encoder.layer.{l}.output.LayerNorm.{weight,bias}` | `ln_mlp` |
//!
//! Legacy `gamma`/`beta` layer-norm names are accepted on input.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::weights::{LayerNormParams, LayerWeights, Weights};
use super::ModelConfig;

const PREFIXES: [&str; 4] = ["", "bert.", "electra.", "roberta."];
const PROBE: &str = "embeddings.word_embeddings.weight";

/// Detects the model-type prefix used by a checkpoint.
pub fn detect_prefix(raw: &BTreeMap<String, Tensor>) -> &'static str {
    PREFIXES
        .into_iter()
        .find(|p| raw.contains_key(&format!("{p}{PROBE}")))
        .unwrap_or("")
}

struct Lookup<'a> {
    raw: &'a BTreeMap<String, Tensor>,
    prefix: &'static str,
}

impl Lookup<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let full = format!("{}{name}", self.prefix);
        let t = self
            .raw
            .get(&full)
            .ok_or(Error::MissingParameter(full.clone()))?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "checkpoint parameter `{full}` has shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    fn layer_norm(&self, base: &str, d: usize) -> Result<LayerNormParams> {
        let modern = format!("{}{base}.weight", self.prefix);
        let (g, b) = if self.raw.contains_key(&modern) {
            ("weight", "bias")
        } else {
            ("gamma", "beta")
        };
        Ok(LayerNormParams {
            gamma: self.get(&format!("{base}.{g}"), &[d])?,
            beta: self.get(&format!("{base}.{b}"), &[d])?,
        })
    }
}

/// `[n_heads * d_head, d_model]` (out, in) into `[n_heads, d_model, d_head]`.
pub fn split_heads_in(fused: &Tensor, n_heads: usize, d_head: usize) -> Result<Tensor> {
    let d_model = fused.shape().get(1).copied().unwrap_or(0);
    if fused.shape() != [n_heads * d_head, d_model] {
        return Err(Error::ShapeMismatch {
            op: "split_heads_in",
            left: fused.shape().to_vec(),
            right: vec![n_heads * d_head, d_model],
        });
    }
    let src = fused.data();
    let mut out = vec![0.0; src.len()];
    for h in 0..n_heads {
        for i in 0..d_model {
            for j in 0..d_head {
                out[(h * d_model + i) * d_head + j] = src[(h * d_head + j) * d_model + i];
            }
        }
    }
    Tensor::new(vec![n_heads, d_model, d_head], out)
}

/// Inverse of [`split_heads_in`].
pub fn fuse_heads_in(split: &Tensor) -> Result<Tensor> {
    let &[n_heads, d_model, d_head] = split.shape() else {
        return Err(Error::InvalidTensor(format!(
            "expected [n_heads, d_model, d_head], got {:?}",
            split.shape()
        )));
    };
    let src = split.data();
    let mut out = vec![0.0; src.len()];
    for h in 0..n_heads {
        for i in 0..d_model {
            for j in 0..d_head {
                out[(h * d_head + j) * d_model + i] = src[(h * d_model + i) * d_head + j];
            }
        }
    }
    Tensor::new(vec![n_heads * d_head, d_model], out)
}

/// Converts a released checkpoint into [`Weights`] for `config`.
pub fn map_checkpoint(raw: &BTreeMap<String, Tensor>, config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let (d, h, dh, m) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
    let look = Lookup {
        raw,
        prefix: detect_prefix(raw),
    };
    let token_emb = look.get(PROBE, &[config.vocab_size, d])?;
    let pos_emb = look.get("embeddings.position_embeddings.weight", &[config.n_ctx, d])?;
    let type_emb = look.get(
        "embeddings.token_type_embeddings.weight",
        &[config.type_vocab_size, d],
    )?;
    let emb_ln = look.layer_norm("embeddings.LayerNorm", d)?;

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("encoder.layer.{l}");
        let proj = |which: &str| -> Result<(Tensor, Tensor)> {
            let w = look.get(&format!("{p}.attention.self.{which}.weight"), &[d, d])?;
            let b = look.get(&format!("{p}.attention.self.{which}.bias"), &[d])?;
            Ok((split_heads_in(&w, h, dh)?, b.reshape(vec![h, dh])?))
        };
        let (w_q, b_q) = proj("query")?;
        let (w_k, b_k) = proj("key")?;
        let (w_v, b_v) = proj("value")?;
        let w_o = look
            .get(&format!("{p}.attention.output.dense.weight"), &[d, d])?
            .transpose()?
            .reshape(vec![h, dh, d])?;
        let b_o = look.get(&format!("{p}.attention.output.dense.bias"), &[d])?;
        let ln_attn = look.layer_norm(&format!("{p}.attention.output.LayerNorm"), d)?;
        let w_in = look
            .get(&format!("{p}.intermediate.dense.weight"), &[m, d])?
            .transpose()?;
        let b_in = look.get(&format!("{p}.intermediate.dense.bias"), &[m])?;
        let w_out = look
            .get(&format!("{p}.output.dense.weight"), &[d, m])?
            .transpose()?;
        let b_out = look.get(&format!("{p}.output.dense.bias"), &[d])?;
        let ln_mlp = look.layer_norm(&format!("{p}.output.LayerNorm"), d)?;
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            b_q,
            b_k,
            b_v,
            w_o,
            b_o,
            ln_attn,
            w_in,
            b_in,
            w_out,
            b_out,
            ln_mlp,
        });
    }
    Ok(Weights {
        token_emb,
        pos_emb,
        type_emb,
        emb_ln,
        layers,
    })
}

/// Converts [`Weights`] back to unprefixed checkpoint names and layouts.
pub fn unmap_checkpoint(
    weights: &Weights,
    config: &ModelConfig,
) -> Result<BTreeMap<String, Tensor>> {
    weights.validate(config)?;
    let d = config.d_model;
    let mut out = BTreeMap::new();
    let mut put = |name: String, t: Tensor| {
        out.insert(name, t);
    };
    put(
        "embeddings.word_embeddings.weight".into(),
        weights.token_emb.clone(),
    );
    put(
        "embeddings.position_embeddings.weight".into(),
        weights.pos_emb.clone(),
    );
    put(
        "embeddings.token_type_embeddings.weight".into(),
        weights.type_emb.clone(),
    );
    put(
        "embeddings.LayerNorm.weight".into(),
        weights.emb_ln.gamma.clone(),
    );
    put(
        "embeddings.LayerNorm.bias".into(),
        weights.emb_ln.beta.clone(),
    );
    for (l, lw) in weights.layers.iter().enumerate() {
        let p = format!("encoder.layer.{l}");
        for (which, w, b) in [
            ("query", &lw.w_q, &lw.b_q),
            ("key", &lw.w_k, &lw.b_k),
            ("value", &lw.w_v, &lw.b_v),
        ] {
            put(
                format!("{p}.attention.self.{which}.weight"),
                fuse_heads_in(w)?,
            );
            put(
                format!("{p}.attention.self.{which}.bias"),
                b.clone().reshape(vec![d])?,
            );
        }
        put(
            format!("{p}.attention.output.dense.weight"),
            lw.w_o.clone().reshape(vec![d, d])?.transpose()?,
        );
        put(format!("{p}.attention.output.dense.bias"), lw.b_o.clone());
        put(
            format!("{p}.attention.output.LayerNorm.weight"),
            lw.ln_attn.gamma.clone(),
        );
        put(
            format!("{p}.attention.output.LayerNorm.bias"),
            lw.ln_attn.beta.clone(),
        );
        put(
            format!("{p}.intermediate.dense.weight"),
            lw.w_in.transpose()?,
        );
        put(format!("{p}.intermediate.dense.bias"), lw.b_in.clone());
        put(format!("{p}.output.dense.weight"), lw.w_out.transpose()?);
        put(format!("{p}.output.dense.bias"), lw.b_out.clone());
        put(
            format!("{p}.output.LayerNorm.weight"),
            lw.ln_mlp.gamma.clone(),
        );
        put(format!("{p}.output.LayerNorm.bias"), lw.ln_mlp.beta.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::random_init;

    #[test]
    fn map_unmap_round_trip() {
        let config = ModelConfig::tiny(30);
        let w = random_init(&config, 5).unwrap();
        let raw = unmap_checkpoint(&w, &config).unwrap();
        let back = map_checkpoint(&raw, &config).unwrap();
        assert_eq!(back, w);
        let again = unmap_checkpoint(&back, &config).unwrap();
        assert_eq!(
            raw.keys().collect::<Vec<_>>(),
            again.keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn prefixed_and_legacy_names() {
        let config = ModelConfig::tiny(30);
        let w = random_init(&config, 5).unwrap();
        let raw: BTreeMap<String, Tensor> = unmap_checkpoint(&w, &config)
            .unwrap()
            .into_iter()
            .map(|(k, v)| {
                let k = k.replace("LayerNorm.weight", "LayerNorm.gamma");
                let k = k.replace("LayerNorm.bias", "LayerNorm.beta");
                (format!("bert.{k}"), v)
            })
            .collect();
        assert_eq!(detect_prefix(&raw), "bert.");
        assert_eq!(map_checkpoint(&raw, &config).unwrap(), w);
    }

    #[test]
    fn missing_parameter_is_named() {
        let config = ModelConfig::tiny(30);
        let w = random_init(&config, 5).unwrap();
        let mut raw = unmap_checkpoint(&w, &config).unwrap();
        raw.remove("encoder.layer.1.output.dense.weight");
        let err = map_checkpoint(&raw, &config).unwrap_err();
        assert!(
            matches!(&err, Error::MissingParameter(n) if n == "encoder.layer.1.output.dense.weight"),
            "{err}"
        );
    }

    #[test]
    fn shape_inconsistent_with_config() {
        let config = ModelConfig::tiny(30);
        let w = random_init(&config, 5).unwrap();
        let raw = unmap_checkpoint(&w, &config).unwrap();
        let mut other = config.clone();
        other.vocab_size = 31;
        assert!(matches!(
            map_checkpoint(&raw, &other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_fuse_inverse() {
        let t = Tensor::new(vec![6, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let s = split_heads_in(&t, 2, 3).unwrap();
        assert_eq!(s.shape(), &[2, 4, 3]);
        assert_eq!(fuse_heads_in(&s).unwrap(), t);
    }
}
