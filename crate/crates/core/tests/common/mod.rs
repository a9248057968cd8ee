//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use ndarray::Array2;
use pd_device::planner::PlanConstraints;
use pd_device::refiner::TokenScores;
use pd_device::timing::{AffineCost, DeltaModel, RttClass, TimingModel};
use pd_device::TokenizedPrompt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID_L_MAX: u64 = 4096;

/// Exhaustive search over `r = i/100`, `L in [2, 4096]` for the smallest
/// `ttft_d`, ties to smaller `L` then smaller `r`. Every constraint is
/// written out from scratch rather than borrowed from the planner.
pub fn grid_oracle(m: &TimingModel, c: &PlanConstraints, l: u64, rtt: f64) -> Option<(f64, u64)> {
    let lf = l as f64;
    let delta = match m.delta {
        DeltaModel::Conservative => {
            let c0 = m.compress.base_ms + m.compress.per_token_ms * lf;
            let c1 = c0 + m.compress.per_selected_token_ms * lf;
            let d = m.decompress.base_ms + m.decompress.per_token_ms * lf;
            c0.max(c1) + d + m.rtt.p95_ms()
        }
        DeltaModel::Affine {
            base_ms,
            per_token_ms,
        } => base_ms + per_token_ms * lf,
    };
    let mut best: Option<(f64, u64, f64)> = None;
    for i in 1..=100u32 {
        let r = i as f64 / 100.0;
        if r < c.xi_scene {
            continue;
        }
        // Collaboration must beat prefilling everything on the device.
        if m.k_c * lf + delta + m.k_d * r * lf > m.k_d * lf {
            continue;
        }
        let compress = m.compress.base_ms
            + m.compress.per_token_ms * lf
            + m.compress.per_selected_token_ms * r * lf;
        let ttft_c = m.k_c * lf + compress + rtt;
        let prefill_d = m.k_d * r * lf;
        let ttft_d = ttft_c + m.decompress.base_ms + m.decompress.per_token_ms * lf + prefill_d;
        let found = (2..=GRID_L_MAX).find(|&big_l| {
            let steps = (big_l - 1) as f64;
            let pace = m.tpot_d + (prefill_d - ttft_c) / steps;
            pace <= c.tau && ttft_c + steps * m.tpot_c <= ttft_d
        });
        if let Some(big_l) = found {
            let better = match best {
                None => true,
                Some((bt, bl, _)) => ttft_d < bt || (ttft_d == bt && big_l < bl),
            };
            if better {
                best = Some((ttft_d, big_l, r));
            }
        }
    }
    best.map(|(_, big_l, r)| (r, big_l))
}

/// A random but valid timing model.
pub fn random_model(rng: &mut impl Rng) -> TimingModel {
    let tpot_d = rng.random_range(10.0..60.0);
    TimingModel {
        k_c: rng.random_range(0.02..0.3),
        k_d: rng.random_range(0.4..2.5),
        tpot_c: rng.random_range(8.0..50.0),
        tpot_d,
        rtt: RttClass {
            name: "net".into(),
            mean_ms: rng.random_range(5.0..300.0),
            jitter_ms: rng.random_range(0.0..60.0),
        },
        compress: AffineCost {
            base_ms: rng.random_range(0.0..20.0),
            per_token_ms: rng.random_range(0.0..0.02),
            per_selected_token_ms: rng.random_range(0.0..0.01),
        },
        decompress: AffineCost {
            base_ms: rng.random_range(0.0..10.0),
            per_token_ms: rng.random_range(0.0..0.01),
            per_selected_token_ms: 0.0,
        },
        delta: if rng.random_bool(0.5) {
            DeltaModel::Conservative
        } else {
            DeltaModel::Affine {
                base_ms: rng.random_range(0.0..300.0),
                per_token_ms: rng.random_range(0.0..0.05),
            }
        },
    }
}

pub fn random_constraints(rng: &mut impl Rng, m: &TimingModel) -> PlanConstraints {
    PlanConstraints {
        xi_scene: rng.random_range(0..=100u32) as f64 / 100.0,
        tau: m.tpot_d + rng.random_range(5.0..200.0),
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `softmax(Q K^T / sqrt(h))` row by row with plain loops.
pub fn dense_attention(q: &Array2<f64>, k: &Array2<f64>, hidden: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..q.nrows() {
        let mut logits = Vec::new();
        for j in 0..k.nrows() {
            let mut dot = 0.0;
            for d in 0..q.ncols() {
                dot += q[[i, d]] * k[[j, d]];
            }
            logits.push(dot / hidden.sqrt());
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.push(exps.iter().map(|e| e / total).collect());
    }
    out
}

/// A prompt with the given sentence lengths, words named by position.
pub fn synthetic_prompt(prefix: usize, sentences: &[usize], suffix: usize) -> TokenizedPrompt {
    let mut content = Vec::new();
    let mut ids = Vec::new();
    for (s, &n) in sentences.iter().enumerate() {
        for _ in 0..n {
            content.push(format!("w{}", content.len()));
            ids.push(s as u32);
        }
    }
    TokenizedPrompt::from_parts(
        (0..prefix).map(|i| format!("p{i}")).collect(),
        content,
        ids,
        (0..suffix).map(|i| format!("s{i}")).collect(),
    )
    .unwrap()
}

/// Greedy whole-sentence selection recomputed from the scores: rank by mean
/// score (ties to the earlier sentence), take sentences until the content
/// budget `ceil(r * n)` is met.
pub fn greedy_oracle(prompt: &TokenizedPrompt, scores: &TokenScores, r: f64) -> Vec<bool> {
    let n = prompt.content().len();
    let spans = prompt.sentence_spans();
    let mut bits = vec![true; prompt.len()];
    if n == 0 || r >= 1.0 {
        return bits;
    }
    let budget = (r * n as f64 - 1e-9).ceil() as usize;
    let mut ranked: Vec<(f64, usize)> = spans
        .iter()
        .enumerate()
        .map(|(i, s)| (scores.scores[s.clone()].iter().sum::<f64>() / s.len() as f64, i))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep = vec![false; spans.len()];
    let mut taken = 0;
    for (_, i) in ranked {
        if taken >= budget {
            break;
        }
        keep[i] = true;
        taken += spans[i].len();
    }
    let off = prompt.prefix().len();
    for (s, k) in spans.iter().zip(keep) {
        for b in &mut bits[off + s.start..off + s.end] {
            *b = k;
        }
    }
    bits
}

/// Fraction of `n` bits set, laid out as alternating runs the way whole
/// sentences fall in a long document.
pub fn clustered_mask(rng: &mut impl Rng, n: usize, r: f64, mean_run: usize) -> Vec<bool> {
    let mut bits = Vec::with_capacity(n);
    while bits.len() < n {
        let run = rng.random_range(mean_run / 2..=mean_run * 3 / 2).max(1);
        let keep = rng.random_bool(r);
        bits.extend(std::iter::repeat_n(keep, run.min(n - bits.len())));
    }
    bits
}
