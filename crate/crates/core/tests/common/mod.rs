// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-side oracles and fixtures. Nothing here calls into the library's
//! numerics; the reference forward works in f64 on fused checkpoint layouts.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use patchlens::encoder::ModelConfig;
use patchlens::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64, mean: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| mean + normal(rng, std)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random checkpoint in released BERT naming and `[out, in]` layout.
pub fn random_checkpoint(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
    prefix: &str,
) -> BTreeMap<String, Tensor> {
    let (d, m) = (config.d_model, config.d_mlp);
    let mut raw = BTreeMap::new();
    let mut put = |name: String, t: Tensor| {
        raw.insert(format!("{prefix}{name}"), t);
    };
    let std = 0.3;
    put(
        "embeddings.word_embeddings.weight".into(),
        random_tensor(rng, vec![config.vocab_size, d], std, 0.0),
    );
    put(
        "embeddings.position_embeddings.weight".into(),
        random_tensor(rng, vec![config.n_ctx, d], std, 0.0),
    );
    put(
        "embeddings.token_type_embeddings.weight".into(),
        random_tensor(rng, vec![config.type_vocab_size, d], std, 0.0),
    );
    put(
        "embeddings.LayerNorm.weight".into(),
        random_tensor(rng, vec![d], 0.1, 1.0),
    );
    put(
        "embeddings.LayerNorm.bias".into(),
        random_tensor(rng, vec![d], 0.1, 0.0),
    );
    for l in 0..config.n_layers {
        let p = format!("encoder.layer.{l}");
        for which in ["query", "key", "value"] {
            put(
                format!("{p}.attention.self.{which}.weight"),
                random_tensor(rng, vec![d, d], std, 0.0),
            );
            put(
                format!("{p}.attention.self.{which}.bias"),
                random_tensor(rng, vec![d], 0.1, 0.0),
            );
        }
        put(
            format!("{p}.attention.output.dense.weight"),
            random_tensor(rng, vec![d, d], std, 0.0),
        );
        put(
            format!("{p}.attention.output.dense.bias"),
            random_tensor(rng, vec![d], 0.1, 0.0),
        );
        put(
            format!("{p}.attention.output.LayerNorm.weight"),
            random_tensor(rng, vec![d], 0.1, 1.0),
        );
        put(
            format!("{p}.attention.output.LayerNorm.bias"),
            random_tensor(rng, vec![d], 0.1, 0.0),
        );
        put(
            format!("{p}.intermediate.dense.weight"),
            random_tensor(rng, vec![m, d], std, 0.0),
        );
        put(
            format!("{p}.intermediate.dense.bias"),
            random_tensor(rng, vec![m], 0.1, 0.0),
        );
        put(
            format!("{p}.output.dense.weight"),
            random_tensor(rng, vec![d, m], std, 0.0),
        );
        put(
            format!("{p}.output.dense.bias"),
            random_tensor(rng, vec![d], 0.1, 0.0),
        );
        put(
            format!("{p}.output.LayerNorm.weight"),
            random_tensor(rng, vec![d], 0.1, 1.0),
        );
        put(
            format!("{p}.output.LayerNorm.bias"),
            random_tensor(rng, vec![d], 0.1, 0.0),
        );
    }
    raw
}

/// Random small config within the given bounds.
pub fn random_config(rng: &mut ChaCha8Rng, max_layers: usize, max_d: usize) -> ModelConfig {
    let n_heads = [1usize, 2, 4][rng.random_range(0..3)];
    let max_dh = (max_d / n_heads).max(1);
    let d_head = rng.random_range(1..=max_dh.min(8));
    let mut c = ModelConfig::tiny(rng.random_range(8..40));
    c.n_layers = rng.random_range(1..=max_layers);
    c.n_heads = n_heads;
    c.d_head = d_head;
    c.d_model = n_heads * d_head;
    c.d_mlp = rng.random_range(1..=2 * c.d_model);
    c.n_ctx = 16;
    c.ln_eps = 1e-12;
    c
}

type Mat = Vec<Vec<f64>>;

fn get<'a>(raw: &'a BTreeMap<String, Tensor>, name: &str) -> &'a Tensor {
    raw.get(name)
        .or_else(|| raw.get(&format!("bert.{name}")))
        .unwrap_or_else(|| panic!("missing {name}"))
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| f64::from(x)).collect()
}

/// `x W^T + b` with `W` stored `[out, in]`.
fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let w = vec64(w);
    let b = vec64(b);
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| b[o] + (0..inp).map(|i| row[i] * w[o * inp + i]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &Tensor, b: &Tensor, eps: f64) -> Mat {
    let (g, b) = (vec64(g), vec64(b));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Final hidden states `[seq][d_model]` of a post-LN BERT encoder, computed
/// straight from a released-layout checkpoint. Keys whose id equals
/// `config.pad_token_id` are excluded from attention.
pub fn reference_forward(
    raw: &BTreeMap<String, Tensor>,
    config: &ModelConfig,
    ids: &[u32],
    types: &[u32],
) -> Mat {
    let d = config.d_model;
    let (h, dh) = (config.n_heads, config.d_head);
    let eps = f64::from(config.ln_eps);
    let tok = vec64(get(raw, "embeddings.word_embeddings.weight"));
    let pos = vec64(get(raw, "embeddings.position_embeddings.weight"));
    let typ = vec64(get(raw, "embeddings.token_type_embeddings.weight"));
    let mut x: Mat = ids
        .iter()
        .zip(types)
        .enumerate()
        .map(|(p, (&id, &t))| {
            (0..d)
                .map(|i| tok[id as usize * d + i] + pos[p * d + i] + typ[t as usize * d + i])
                .collect()
        })
        .collect();
    x = norm(
        &x,
        get(raw, "embeddings.LayerNorm.weight"),
        get(raw, "embeddings.LayerNorm.bias"),
        eps,
    );
    let keep: Vec<bool> = ids.iter().map(|&i| i != config.pad_token_id).collect();
    let seq = ids.len();
    for l in 0..config.n_layers {
        let p = format!("encoder.layer.{l}");
        let g = |n: &str| get(raw, &format!("{p}.{n}"));
        let q = linear(
            &x,
            g("attention.self.query.weight"),
            g("attention.self.query.bias"),
        );
        let k = linear(
            &x,
            g("attention.self.key.weight"),
            g("attention.self.key.bias"),
        );
        let v = linear(
            &x,
            g("attention.self.value.weight"),
            g("attention.self.value.bias"),
        );
        let mut ctx = vec![vec![0.0; d]; seq];
        for head in 0..h {
            let off = head * dh;
            for i in 0..seq {
                let scores: Vec<f64> = (0..seq)
                    .map(|j| {
                        if !keep[j] {
                            return f64::NEG_INFINITY;
                        }
                        (0..dh).map(|t| q[i][off + t] * k[j][off + t]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..seq {
                    let a = exps[j] / total;
                    for t in 0..dh {
                        ctx[i][off + t] += a * v[j][off + t];
                    }
                }
            }
        }
        let attn = linear(
            &ctx,
            g("attention.output.dense.weight"),
            g("attention.output.dense.bias"),
        );
        let mid = norm(
            &add(&x, &attn),
            g("attention.output.LayerNorm.weight"),
            g("attention.output.LayerNorm.bias"),
            eps,
        );
        let inter: Mat = linear(
            &mid,
            g("intermediate.dense.weight"),
            g("intermediate.dense.bias"),
        )
        .into_iter()
        .map(|r| r.into_iter().map(gelu_exact).collect())
        .collect();
        let out = linear(&inter, g("output.dense.weight"), g("output.dense.bias"));
        x = norm(
            &add(&mid, &out),
            g("output.LayerNorm.weight"),
            g("output.LayerNorm.bias"),
            eps,
        );
    }
    x
}

/// Cross-encoder score: `w . h[CLS] + b` for a single-logit head.
pub fn reference_cat_score(hidden: &Mat, w: &[f64], b: f64) -> f64 {
    hidden[0].iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b
}

/// Bi-encoder score: dot product of the two `[CLS]` rows.
pub fn reference_dot_score(q: &Mat, d: &Mat) -> f64 {
    q[0].iter().zip(&d[0]).map(|(a, b)| a * b).sum()
}

/// Largest `|a - b| / max(1, |b|)` across two equally shaped matrices.
pub fn max_rel_err(a: &Tensor, b: &Mat) -> f64 {
    let cols = a.shape()[1];
    let mut worst: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (c, &want) in row.iter().enumerate() {
            let got = f64::from(a.data()[r * cols + c]);
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    worst
}

/// Greedy longest-match oracle over byte slices at char boundaries.
pub fn oracle_wordpiece(word: &str, vocab: &HashMap<String, u32>, unk: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut rest = word;
    let mut first = true;
    while !rest.is_empty() {
        let boundaries: Vec<usize> = rest
            .char_indices()
            .map(|(i, _)| i)
            .skip(1)
            .chain(std::iter::once(rest.len()))
            .collect();
        let hit = boundaries.iter().rev().find_map(|&end| {
            let piece = if first {
                rest[..end].to_string()
            } else {
                format!("##{}", &rest[..end])
            };
            vocab.get(&piece).map(|&id| (id, end))
        });
        match hit {
            Some((id, end)) => {
                out.push(id);
                rest = &rest[end..];
                first = false;
            }
            None => return vec![unk],
        }
    }
    out
}

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Words used by the fixture corpus.
pub const WORDS: [&str; 24] = [
    "the", "of", "and", "apple", "banana", "cherry", "river", "stone", "cloud", "music", "green",
    "light", "paper", "zebra", "garden", "winter", "engine", "silver", "forest", "ocean", "market",
    "bridge", "mechir", "!",
];

pub fn fixture_vocab_tokens() -> Vec<String> {
    SPECIALS
        .iter()
        .chain(WORDS.iter())
        .map(|s| s.to_string())
        .collect()
}

/// Writes a small judged corpus plus vocabulary and returns the number of
/// judgments. Every query is `the <rare word>`: `the` occurs in every
/// document, each rare word in one document only.
pub fn write_corpus(dir: &Path, n_queries: usize, docs_per_query: usize) -> usize {
    std::fs::write(
        dir.join("vocab.txt"),
        fixture_vocab_tokens().join("\n") + "\n",
    )
    .unwrap();
    let filler = [
        "apple", "banana", "cherry", "river", "stone", "cloud", "music", "green", "light", "paper",
    ];
    let rare = [
        "zebra", "garden", "winter", "engine", "silver", "forest", "ocean", "market", "bridge",
    ];
    let mut queries = String::new();
    let mut docs = String::new();
    let mut qrels = String::new();
    let mut n = 0;
    for q in 0..n_queries {
        let term = rare[q % rare.len()];
        queries.push_str(&format!("q{q}\tthe {term}\n"));
        for k in 0..docs_per_query {
            let a = filler[(q * 3 + k) % filler.len()];
            let b = filler[(q + 2 * k + 1) % filler.len()];
            let body = if k == 0 {
                format!("the {term} of {a} and {b}")
            } else {
                format!("the {a} of {b} and the {a}")
            };
            docs.push_str(&format!("d{q}_{k}\t{body}\n"));
            qrels.push_str(&format!("q{q} 0 d{q}_{k} {}\n", k % 3));
            n += 1;
        }
    }
    std::fs::write(dir.join("queries.tsv"), queries).unwrap();
    std::fs::write(dir.join("docs.tsv"), docs).unwrap();
    std::fs::write(dir.join("qrels.txt"), qrels).unwrap();
    n
}

/// Experiment config JSON for the fixture corpus written by [`write_corpus`].
pub fn fixture_config(
    arch: &str,
    perturbation: &str,
    n: usize,
    workers: usize,
    patch: &str,
) -> String {
    let vocab_size = fixture_vocab_tokens().len();
    format!(
        r#"{{
  "model": {{
    "arch": "{arch}",
    "config": {{"n_layers": 2, "d_model": 16, "n_heads": 2, "d_head": 8, "d_mlp": 32,
               "vocab_size": {vocab_size}, "n_ctx": 64}},
    "seed": 11
  }},
  "vocab": "vocab.txt",
  "dataset": {{"queries": "queries.tsv", "docs": "docs.tsv", "qrels": "qrels.txt"}},
  "perturbation": {perturbation},
  "sampling": {{"n": {n}, "seed": 3}},
  "patch": {patch},
  "output_dir": "out",
  "max_len": 32,
  "workers": {workers}
}}"#
    )
}

/// Random-weight `Dot` or `Cat` ranker over the fixture vocabulary, plus the
/// released-layout checkpoint it was built from.
pub fn fixture_ranker(
    arch: patchlens::ranking::Arch,
    seed: u64,
) -> (patchlens::ranking::Ranker, BTreeMap<String, Tensor>) {
    use patchlens::encoder::{map_checkpoint, Encoder};
    use patchlens::ranking::{Arch, CatModel, DotModel, Ranker, Similarity};
    let mut r = rng(seed);
    let config = ModelConfig::tiny(fixture_vocab_tokens().len());
    let mut raw = random_checkpoint(&config, &mut r, "");
    let encoder = Encoder::new(config.clone(), map_checkpoint(&raw, &config).unwrap()).unwrap();
    let model = match arch {
        Arch::Dot => Ranker::Dot(DotModel::new(encoder, Similarity::Dot)),
        Arch::Cat => {
            raw.insert(
                "classifier.weight".into(),
                random_tensor(&mut r, vec![1, config.d_model], 1.0, 0.0),
            );
            raw.insert(
                "classifier.bias".into(),
                random_tensor(&mut r, vec![1], 0.1, 0.0),
            );
            Ranker::Cat(CatModel::from_checkpoint(&raw, encoder, 0).unwrap())
        }
    };
    (model, raw)
}

/// `n` random query/document pairs with an appended query term or marker.
pub fn random_pairs(
    arch: patchlens::ranking::Arch,
    n: usize,
    seed: u64,
    filler: &str,
) -> Vec<patchlens::perturb::PairedInput> {
    use patchlens::perturb::{perturb_append, InsertAt, PairBuilder};
    let vocab = patchlens::tokenizer::Vocab::from_tokens(fixture_vocab_tokens()).unwrap();
    let mut builder = PairBuilder::new(&vocab, arch, 40);
    builder.filler_id = vocab.id(filler).unwrap();
    let mut r = rng(seed);
    let word = |r: &mut ChaCha8Rng| WORDS[r.random_range(0..WORDS.len())];
    (0..n)
        .map(|i| {
            let q: Vec<&str> = (0..r.random_range(1..4)).map(|_| word(&mut r)).collect();
            let d: Vec<&str> = (0..r.random_range(1..12)).map(|_| word(&mut r)).collect();
            let ins: Vec<&str> = (0..r.random_range(1..3)).map(|_| word(&mut r)).collect();
            let at = if r.random_bool(0.5) {
                InsertAt::Append
            } else {
                InsertAt::Prepend
            };
            let doc = perturb_append(&d.join(" "), &ins.join(" "), at);
            builder
                .build(&format!("q{i}"), &format!("d{i}"), &q.join(" "), &doc)
                .unwrap()
        })
        .collect()
}
