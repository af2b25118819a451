// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook points, interventions and the activation cache.
//!
//! Hook names follow a fixed scheme:
//!
//! | name                          | shape                       |
//! |-------------------------------|-----------------------------|
//! | `embed.hook_out`              | `[seq, d_model]`            |
//! | `blocks.{l}.hook_resid_pre`   | `[seq, d_model]`            |
//! | `blocks.{l}.attn.hook_q`      | `[seq, n_heads, d_head]`    |
//! | `blocks.{l}.attn.hook_k`      | `[seq, n_heads, d_head]`    |
//! | `blocks.{l}.attn.hook_v`      | `[seq, n_heads, d_head]`    |
//! | `blocks.{l}.attn.hook_pattern`| `[n_heads, seq, seq]`       |
//! | `blocks.{l}.attn.hook_z`      | `[seq, n_heads, d_head]`    |
//! | `blocks.{l}.hook_attn_out`    | `[seq, d_model]`            |
//! | `blocks.{l}.hook_resid_mid`   | `[seq, d_model]`            |
//! | `blocks.{l}.hook_mlp_out`     | `[seq, d_model]`            |
//! | `blocks.{l}.hook_resid_post`  | `[seq, d_model]`            |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::TokenSeq;

use super::ModelConfig;

/// Per-block hook sites, in computation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    ResidPre,
    Q,
    K,
    V,
    Pattern,
    Z,
    AttnOut,
    ResidMid,
    MlpOut,
    ResidPost,
}

impl Site {
    pub const ALL: [Site; 10] = [
        Site::ResidPre,
        Site::Q,
        Site::K,
        Site::V,
        Site::Pattern,
        Site::Z,
        Site::AttnOut,
        Site::ResidMid,
        Site::MlpOut,
        Site::ResidPost,
    ];

    fn suffix(self) -> &'static str {
        match self {
            Site::ResidPre => "hook_resid_pre",
            Site::Q => "attn.hook_q",
            Site::K => "attn.hook_k",
            Site::V => "attn.hook_v",
            Site::Pattern => "attn.hook_pattern",
            Site::Z => "attn.hook_z",
            Site::AttnOut => "hook_attn_out",
            Site::ResidMid => "hook_resid_mid",
            Site::MlpOut => "hook_mlp_out",
            Site::ResidPost => "hook_resid_post",
        }
    }
}

/// A named activation site in the forward pass.
///
/// Ordering is `(layer, site)` with the embedding output first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookPoint {
    Embed,
    Block(usize, Site),
}

impl HookPoint {
    pub fn resid_pre(layer: usize) -> Self {
        Self::Block(layer, Site::ResidPre)
    }
    pub fn pattern(layer: usize) -> Self {
        Self::Block(layer, Site::Pattern)
    }
    pub fn z(layer: usize) -> Self {
        Self::Block(layer, Site::Z)
    }
    pub fn attn_out(layer: usize) -> Self {
        Self::Block(layer, Site::AttnOut)
    }
    pub fn mlp_out(layer: usize) -> Self {
        Self::Block(layer, Site::MlpOut)
    }
    pub fn resid_post(layer: usize) -> Self {
        Self::Block(layer, Site::ResidPost)
    }

    pub fn layer(self) -> Option<usize> {
        match self {
            HookPoint::Embed => None,
            HookPoint::Block(l, _) => Some(l),
        }
    }

    /// Shape the activation at this hook has for a sequence of length `seq`.
    pub fn expected_shape(self, config: &ModelConfig, seq: usize) -> Vec<usize> {
        match self {
            HookPoint::Block(_, Site::Q | Site::K | Site::V | Site::Z) => {
                vec![seq, config.n_heads, config.d_head]
            }
            HookPoint::Block(_, Site::Pattern) => vec![config.n_heads, seq, seq],
            _ => vec![seq, config.d_model],
        }
    }

    /// Errors with [`Error::UnknownHook`] when the layer does not exist.
    pub fn check(self, config: &ModelConfig) -> Result<()> {
        match self.layer() {
            Some(l) if l >= config.n_layers => Err(Error::UnknownHook(self.to_string())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::Embed => f.write_str("embed.hook_out"),
            HookPoint::Block(l, site) => write!(f, "blocks.{l}.{}", site.suffix()),
        }
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "embed.hook_out" {
            return Ok(HookPoint::Embed);
        }
        let unknown = || Error::UnknownHook(s.to_owned());
        let rest = s.strip_prefix("blocks.").ok_or_else(unknown)?;
        let (layer, suffix) = rest.split_once('.').ok_or_else(unknown)?;
        if layer.is_empty() || !layer.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        let layer: usize = layer.parse().map_err(|_| unknown())?;
        let site = Site::ALL
            .into_iter()
            .find(|site| site.suffix() == suffix)
            .ok_or_else(unknown)?;
        Ok(HookPoint::Block(layer, site))
    }
}

/// Every hook point of a model, sorted by `(layer, site)`.
pub fn list_hooks(config: &ModelConfig) -> Vec<HookPoint> {
    std::iter::once(HookPoint::Embed)
        .chain((0..config.n_layers).flat_map(|l| Site::ALL.map(|s| HookPoint::Block(l, s))))
        .collect()
}

/// In-place edit applied to an activation.
pub type EditFn = dyn Fn(&mut Tensor) -> Result<()> + Send + Sync;

/// What to do with an activation when its hook fires.
#[derive(Clone)]
pub enum Intervention {
    /// Replace the whole activation.
    Replace(Tensor),
    /// Edit the activation in place; the shape must not change.
    Edit(Arc<EditFn>),
}

impl Intervention {
    pub fn edit(f: impl Fn(&mut Tensor) -> Result<()> + Send + Sync + 'static) -> Self {
        Intervention::Edit(Arc::new(f))
    }
}

impl fmt::Debug for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Intervention::Replace(t) => f.debug_tuple("Replace").field(&t.shape()).finish(),
            Intervention::Edit(_) => f.write_str("Edit(..)"),
        }
    }
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: TokenSeq,
    activations: BTreeMap<HookPoint, Tensor>,
}

impl ActivationCache {
    pub(crate) fn new(tokens: TokenSeq) -> Self {
        Self {
            tokens,
            activations: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, point: HookPoint, value: Tensor) {
        self.activations.insert(point, value);
    }

    pub fn get(&self, point: HookPoint) -> Option<&Tensor> {
        self.activations.get(&point)
    }

    pub fn require(&self, point: HookPoint) -> Result<&Tensor> {
        self.get(point)
            .ok_or_else(|| Error::UnknownHook(format!("{point} (not in cache)")))
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookPoint, &Tensor)> {
        self.activations.iter()
    }

    /// Checks that every hook is present with its expected shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let seq = self.tokens.len();
        for point in list_hooks(config) {
            let t = self.require(point)?;
            let expected = point.expected_shape(config, seq);
            if t.shape() != expected.as_slice() {
                return Err(Error::HookShape {
                    hook: point.to_string(),
                    expected,
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
