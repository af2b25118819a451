// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relevance-grade stratified subsampling of judged pairs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Qrel;

/// Per-grade quotas for a sample of `n`: an even split, remainder to the
/// highest grades, and any grade's shortfall handed out one at a time to the
/// remaining grades with spare items, highest grade first.
pub fn grade_quotas(available: &BTreeMap<i32, usize>, n: usize) -> BTreeMap<i32, usize> {
    let total: usize = available.values().sum();
    let n = n.min(total);
    let grades: Vec<i32> = available.keys().copied().collect();
    if grades.is_empty() {
        return BTreeMap::new();
    }
    let g = grades.len();
    let mut quota: Vec<usize> = vec![n / g; g];
    for q in quota.iter_mut().rev().take(n % g) {
        *q += 1;
    }
    let cap: Vec<usize> = grades.iter().map(|gr| available[gr]).collect();
    let mut excess = 0;
    for (q, &c) in quota.iter_mut().zip(&cap) {
        if *q > c {
            excess += *q - c;
            *q = c;
        }
    }
    while excess > 0 {
        for i in (0..g).rev() {
            if excess > 0 && quota[i] < cap[i] {
                quota[i] += 1;
                excess -= 1;
            }
        }
    }
    grades.into_iter().zip(quota).collect()
}

/// Seeded stratified sample of `(qid, docid)` pairs, returned in qrels order.
pub fn stratified_subsample(qrels: &[Qrel], n: usize, seed: u64) -> Vec<(String, String)> {
    let mut by_grade: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, q) in qrels.iter().enumerate() {
        by_grade.entry(q.grade).or_default().push(i);
    }
    let available = by_grade.iter().map(|(g, v)| (*g, v.len())).collect();
    let quotas = grade_quotas(&available, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n.min(qrels.len()));
    for (grade, mut idx) in by_grade {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..quotas[&grade]]);
    }
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| (qrels[i].qid.clone(), qrels[i].docid.clone()))
        .collect()
}

/// Judgments with `grade >= min_grade`.
pub fn filter_grade(qrels: &[Qrel], min_grade: i32) -> Vec<Qrel> {
    qrels
        .iter()
        .filter(|q| q.grade >= min_grade)
        .cloned()
        .collect()
}
