// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use patchlens::encoder::safetensors::{parse_safetensors, serialize_safetensors};
use patchlens::encoder::{
    list_hooks, map_checkpoint, random_init, unmap_checkpoint, Encoder, HookPoint, Intervention,
    ModelConfig, Site,
};
use patchlens::tokenizer::TokenSeq;
use patchlens::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_tokens(
    rng: &mut rand_chacha::ChaCha8Rng,
    config: &ModelConfig,
    seq: usize,
    pads: bool,
) -> TokenSeq {
    let lo = if pads { 0 } else { 1 };
    let mut ids: Vec<u32> = (0..seq)
        .map(|_| rng.random_range(lo..config.vocab_size as u32))
        .collect();
    ids[0] = 1;
    let types = (0..seq).map(|_| rng.random_range(0..2)).collect();
    TokenSeq::new(ids, types).unwrap()
}

#[test]
fn forward_matches_reference_with_padding() {
    let mut rng = common::rng(101);
    for _ in 0..10 {
        let config = common::random_config(&mut rng, 3, 32);
        let raw = common::random_checkpoint(&config, &mut rng, "bert.");
        let enc = Encoder::new(config.clone(), map_checkpoint(&raw, &config).unwrap()).unwrap();
        let seq = rng.random_range(1..=16);
        let tokens = random_tokens(&mut rng, &config, seq, true);
        let got = enc.forward(&tokens, &[]).unwrap();
        let want = common::reference_forward(&raw, &config, &tokens.ids, &tokens.type_ids);
        assert!(common::max_rel_err(&got, &want) < 1e-5);
    }
}

#[test]
fn fused_and_split_attention_agree() {
    let mut rng = common::rng(5);
    let config = ModelConfig::tiny(30);
    let raw = common::random_checkpoint(&config, &mut rng, "");
    let weights = map_checkpoint(&raw, &config).unwrap();
    let back = unmap_checkpoint(&weights, &config).unwrap();
    for (name, t) in &back {
        assert_eq!(t, &raw[name], "{name}");
    }
    let enc = Encoder::new(config.clone(), weights).unwrap();
    let tokens = random_tokens(&mut rng, &config, 12, false);
    let (_, cache) = enc.run_with_cache(&tokens).unwrap();
    for l in 0..config.n_layers {
        let x = cache.get(HookPoint::resid_pre(l)).unwrap();
        let attn = cache.get(HookPoint::attn_out(l)).unwrap();
        let want = fused_attention(&raw, &config, l, x);
        let worst = attn
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (f64::from(*a) - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "layer {l}: {worst}");
    }
}

/// Unmasked attention block output from fused `[out, in]` projections.
fn fused_attention(
    raw: &BTreeMap<String, Tensor>,
    config: &ModelConfig,
    l: usize,
    x: &Tensor,
) -> Vec<f64> {
    let (seq, d, h, dh) = (x.shape()[0], config.d_model, config.n_heads, config.d_head);
    let w = |n: &str| {
        raw[&format!("encoder.layer.{l}.{n}")]
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect::<Vec<_>>()
    };
    let xs: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    let proj = |wn: &str, bn: &str| {
        let (w, b) = (w(wn), w(bn));
        (0..seq)
            .flat_map(|i| (0..d).map(move |o| (i, o)))
            .map(|(i, o)| b[o] + (0..d).map(|t| xs[i * d + t] * w[o * d + t]).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let q = proj("attention.self.query.weight", "attention.self.query.bias");
    let k = proj("attention.self.key.weight", "attention.self.key.bias");
    let v = proj("attention.self.value.weight", "attention.self.value.bias");
    let mut ctx = vec![0.0; seq * d];
    for head in 0..h {
        for i in 0..seq {
            let s: Vec<f64> = (0..seq)
                .map(|j| {
                    (0..dh)
                        .map(|t| q[i * d + head * dh + t] * k[j * d + head * dh + t])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..seq {
                for t in 0..dh {
                    ctx[i * d + head * dh + t] += e[j] / z * v[j * d + head * dh + t];
                }
            }
        }
    }
    let (wo, bo) = (
        w("attention.output.dense.weight"),
        w("attention.output.dense.bias"),
    );
    (0..seq)
        .flat_map(|i| (0..d).map(move |o| (i, o)))
        .map(|(i, o)| bo[o] + (0..d).map(|t| ctx[i * d + t] * wo[o * d + t]).sum::<f64>())
        .collect()
}

#[test]
fn hook_listing() {
    let mut c = ModelConfig::tiny(10);
    c.n_layers = 1;
    let hooks = list_hooks(&c);
    assert_eq!(hooks.len(), 11);
    c.n_layers = 2;
    let hooks = list_hooks(&c);
    assert_eq!(hooks.len(), 21);
    let mut sorted = hooks.clone();
    sorted.sort();
    assert_eq!(hooks, sorted);
    for h in hooks {
        assert_eq!(h.to_string().parse::<HookPoint>().unwrap(), h);
    }
    assert!(matches!(
        "blocks.0.hook_nope".parse::<HookPoint>(),
        Err(Error::UnknownHook(_))
    ));
}

#[test]
fn cache_is_complete_and_shaped() {
    let config = ModelConfig::tiny(20);
    let enc = Encoder::new(config.clone(), random_init(&config, 1).unwrap()).unwrap();
    let tokens = TokenSeq::new(vec![2, 5, 6, 7, 3], vec![0; 5]).unwrap();
    let (_, cache) = enc.run_with_cache(&tokens).unwrap();
    assert_eq!(cache.len(), 21);
    cache.validate(&config).unwrap();
    assert_eq!(
        cache.get(HookPoint::pattern(1)).unwrap().shape(),
        &[2, 5, 5]
    );
    assert_eq!(cache.get(HookPoint::z(0)).unwrap().shape(), &[5, 2, 8]);
}

#[test]
fn bad_interventions_are_rejected() {
    let config = ModelConfig::tiny(20);
    let enc = Encoder::new(config.clone(), random_init(&config, 1).unwrap()).unwrap();
    let tokens = TokenSeq::new(vec![2, 5, 3], vec![0; 3]).unwrap();
    let wrong = vec![(
        HookPoint::resid_pre(0),
        Intervention::Replace(Tensor::zeros(vec![4, 16])),
    )];
    assert!(matches!(
        enc.forward(&tokens, &wrong),
        Err(Error::HookShape { .. })
    ));
    let missing = vec![(
        HookPoint::resid_pre(9),
        Intervention::Replace(Tensor::zeros(vec![3, 16])),
    )];
    assert!(matches!(
        enc.forward(&tokens, &missing),
        Err(Error::UnknownHook(_))
    ));
    let nan = vec![(
        HookPoint::mlp_out(0),
        Intervention::edit(|t: &mut Tensor| {
            t.data_mut()[0] = f32::NAN;
            Ok(())
        }),
    )];
    assert!(matches!(
        enc.forward(&tokens, &nan),
        Err(Error::InvalidTensor(_))
    ));
}

#[test]
fn resid_pre_equals_previous_resid_post() {
    let config = ModelConfig::tiny(20);
    let enc = Encoder::new(config.clone(), random_init(&config, 4).unwrap()).unwrap();
    let tokens = TokenSeq::new(vec![2, 9, 8, 0, 3], vec![0; 5]).unwrap();
    let (_, cache) = enc.run_with_cache(&tokens).unwrap();
    assert_eq!(
        cache.get(HookPoint::resid_pre(0)),
        cache.get(HookPoint::Embed)
    );
    assert_eq!(
        cache.get(HookPoint::resid_pre(1)),
        cache.get(HookPoint::resid_post(0))
    );
}

fn small_model(seed: u64) -> (ModelConfig, Encoder) {
    let mut rng = common::rng(seed);
    let config = common::random_config(&mut rng, 3, 16);
    let raw = common::random_checkpoint(&config, &mut rng, "");
    let enc = Encoder::new(config.clone(), map_checkpoint(&raw, &config).unwrap()).unwrap();
    (config, enc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn self_patch_is_identity(seed in 0u64..1000, seq in 1usize..10, hook_pick in 0usize..64) {
        let (config, enc) = small_model(seed);
        let mut rng = common::rng(seed ^ 77);
        let tokens = random_tokens(&mut rng, &config, seq, true);
        let (clean, cache) = enc.run_with_cache(&tokens).unwrap();
        let hooks = list_hooks(&config);
        let hook = hooks[hook_pick % hooks.len()];
        let iv = vec![(hook, Intervention::Replace(cache.get(hook).unwrap().clone()))];
        let patched = enc.forward(&tokens, &iv).unwrap();
        prop_assert!(patched.max_abs_diff(&clean).unwrap() <= 1e-6);
    }

    #[test]
    fn edits_never_reach_upstream(seed in 0u64..1000, seq in 2usize..10, hook_pick in 0usize..64) {
        let (config, enc) = small_model(seed);
        let mut rng = common::rng(seed ^ 13);
        let tokens = random_tokens(&mut rng, &config, seq, false);
        let (_, clean) = enc.run_with_cache(&tokens).unwrap();
        let hooks = list_hooks(&config);
        let hook = hooks[hook_pick % hooks.len()];
        let iv = vec![(hook, Intervention::edit(|t: &mut Tensor| {
            for v in t.data_mut() { *v += 0.5; }
            Ok(())
        }))];
        let (_, edited) = enc.run(&tokens, &iv, true).unwrap();
        let edited = edited.unwrap();
        for h in hooks.iter().filter(|h| **h < hook) {
            prop_assert_eq!(edited.get(*h), clean.get(*h), "{} changed", h);
        }
        prop_assert_ne!(edited.get(hook), clean.get(hook));
    }

    #[test]
    fn trailing_pads_do_not_change_real_tokens(seed in 0u64..1000, seq in 1usize..8, n_pad in 1usize..6) {
        let (config, enc) = small_model(seed);
        let mut rng = common::rng(seed ^ 99);
        let tokens = random_tokens(&mut rng, &config, seq, false);
        let mut padded = tokens.clone();
        padded.ids.extend(std::iter::repeat_n(config.pad_token_id, n_pad));
        padded.type_ids.extend(std::iter::repeat_n(0, n_pad));
        let a = enc.forward(&tokens, &[]).unwrap();
        let b = enc.forward(&padded, &[]).unwrap();
        for r in 0..seq {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }
        let (_, cache) = enc.run_with_cache(&padded).unwrap();
        let pattern = cache.get(HookPoint::Block(0, Site::Pattern)).unwrap();
        let total = padded.len();
        for head in 0..config.n_heads {
            for i in 0..total {
                for j in seq..total {
                    prop_assert_eq!(pattern.data()[(head * total + i) * total + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn safetensors_round_trip(seed in 0u64..10_000, n in 0usize..6) {
        let mut rng = common::rng(seed);
        let mut map = BTreeMap::new();
        for i in 0..n {
            let rank = rng.random_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
            map.insert(format!("t{i}.weight"), common::random_tensor(&mut rng, shape, 1.0, 0.0));
        }
        let bytes = serialize_safetensors(&map).unwrap();
        prop_assert_eq!(parse_safetensors(&bytes).unwrap(), map);
    }
}

#[test]
fn safetensors_rejects_damaged_files() {
    let mut map = BTreeMap::new();
    map.insert(
        "a".to_string(),
        Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
    );
    map.insert("b".to_string(), Tensor::new(vec![1], vec![3.0]).unwrap());
    let bytes = serialize_safetensors(&map).unwrap();
    assert!(matches!(
        parse_safetensors(&bytes[..bytes.len() - 1]),
        Err(Error::Safetensors(_))
    ));
    assert!(matches!(
        parse_safetensors(&bytes[..4]),
        Err(Error::Safetensors(_))
    ));

    let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
    let mut overlapping = (header.len() as u64).to_le_bytes().to_vec();
    overlapping.extend_from_slice(header.as_bytes());
    overlapping.extend_from_slice(&[0u8; 8]);
    assert!(matches!(
        parse_safetensors(&overlapping),
        Err(Error::Safetensors(_))
    ));
}
