//! Attention weights over an observation window and per-token importance.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::RefineError;

/// Inputs for one head: the trailing `w` query rows, all `l_k` keys, and
/// optionally the values. `hidden` is the scale in `softmax(Q K^T / sqrt(h))`.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q_window: Array2<f64>,
    pub k_full: Array2<f64>,
    pub v_full: Option<Array2<f64>>,
    pub hidden: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[w x l_k]`, each row a probability vector.
    pub weights: Array2<f64>,
    /// `weights . V` when values were supplied.
    pub output: Option<Array2<f64>>,
}

fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn attention_weights(inputs: &AttentionInputs) -> Result<AttentionOutput, RefineError> {
    let q = &inputs.q_window;
    let k = &inputs.k_full;
    if q.ncols() != k.ncols() {
        return Err(RefineError::DimensionMismatch(format!(
            "Q has {} columns, K has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if q.nrows() > k.nrows() {
        return Err(RefineError::DimensionMismatch(format!(
            "observation window ({}) longer than key sequence ({})",
            q.nrows(),
            k.nrows()
        )));
    }
    if k.nrows() == 0 {
        return Err(RefineError::DimensionMismatch("no keys".into()));
    }
    if let Some(v) = &inputs.v_full {
        if v.nrows() != k.nrows() {
            return Err(RefineError::DimensionMismatch(format!(
                "V has {} rows, K has {}",
                v.nrows(),
                k.nrows()
            )));
        }
        if !all_finite(v) {
            return Err(RefineError::NonFinite("V"));
        }
    }
    if !(inputs.hidden.is_finite() && inputs.hidden > 0.0) {
        return Err(RefineError::NonFinite("hidden size"));
    }
    if !all_finite(q) {
        return Err(RefineError::NonFinite("Q"));
    }
    if !all_finite(k) {
        return Err(RefineError::NonFinite("K"));
    }

    let mut weights = q.dot(&k.t()) / inputs.hidden.sqrt();
    for mut row in weights.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let output = inputs.v_full.as_ref().map(|v| weights.dot(v));
    Ok(AttentionOutput { weights, output })
}

/// How per-head scores are combined into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadAggregation {
    /// Sum the pooled scores of all heads.
    #[default]
    Sum,
    /// Each head votes for its top `ceil(ratio * |content|)` content tokens;
    /// a token's score is its vote count.
    TopKVotes { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Trailing query rows used per head.
    pub window: usize,
    /// Max-pooling width, odd.
    pub kernel: usize,
    #[serde(default)]
    pub aggregation: HeadAggregation,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            window: 32,
            kernel: 7,
            aggregation: HeadAggregation::Sum,
        }
    }
}

/// Importance per content token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub scores: Vec<f64>,
    pub pooling_kernel: usize,
}

/// Same-length max-pooling; the window is truncated at the edges.
pub fn max_pool(xs: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            xs[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn top_k_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Column-sum the last `window` rows of each head, max-pool, combine heads,
/// and keep the `content` positions.
pub fn score_tokens(
    heads: &[Array2<f64>],
    config: &ScoringConfig,
    content: std::ops::Range<usize>,
) -> Result<TokenScores, RefineError> {
    let first = heads.first().ok_or(RefineError::NoHeads)?;
    let l_k = first.ncols();
    if config.kernel == 0 || config.kernel % 2 == 0 {
        return Err(RefineError::BadKernel(config.kernel));
    }
    if heads.iter().any(|h| h.ncols() != l_k) {
        return Err(RefineError::DimensionMismatch(
            "heads disagree on key length".into(),
        ));
    }
    if content.end > l_k || content.start > content.end {
        return Err(RefineError::DimensionMismatch(format!(
            "content range {content:?} outside key length {l_k}"
        )));
    }

    let mut total = vec![0.0; content.len()];
    for head in heads {
        if !all_finite(head) {
            return Err(RefineError::NonFinite("attention weights"));
        }
        let start = head.nrows().saturating_sub(config.window);
        let column_sum: Array1<f64> = head.slice(ndarray::s![start.., ..]).sum_axis(Axis(0));
        let pooled = max_pool(column_sum.as_slice().expect("contiguous"), config.kernel);
        let pooled = &pooled[content.clone()];
        match config.aggregation {
            HeadAggregation::Sum => {
                for (t, p) in total.iter_mut().zip(pooled) {
                    *t += p;
                }
            }
            HeadAggregation::TopKVotes { ratio } => {
                let k = ((ratio * pooled.len() as f64) - 1e-9).ceil().max(0.0) as usize;
                for i in top_k_indices(pooled, k.min(pooled.len())) {
                    total[i] += 1.0;
                }
            }
        }
    }
    Ok(TokenScores {
        scores: total,
        pooling_kernel: config.kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_softmax_row(q: &[f64], keys: &[Vec<f64>], h: f64) -> Vec<f64> {
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / h.sqrt())
            .collect();
        let denom: f64 = logits.iter().map(|x| x.exp()).sum();
        logits.iter().map(|x| x.exp() / denom).collect()
    }

    #[test]
    fn peaked_query_selects_matching_key() {
        let k = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let q = array![[0.0, 40.0, 0.0]];
        let out = attention_weights(&AttentionInputs {
            q_window: q,
            k_full: k.clone(),
            v_full: None,
            hidden: 3.0,
        })
        .unwrap();
        let expect = brute_softmax_row(
            &[0.0, 40.0, 0.0],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            3.0,
        );
        for (a, b) in out.weights.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.weights[[0, 1]] > 0.999_999);
    }

    #[test]
    fn zero_query_is_uniform() {
        let out = attention_weights(&AttentionInputs {
            q_window: Array2::zeros((2, 4)),
            k_full: Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64),
            v_full: None,
            hidden: 4.0,
        })
        .unwrap();
        assert!(out.weights.iter().all(|&w| (w - 0.2).abs() < 1e-12));
    }

    #[test]
    fn scaling_q_k_and_hidden_together_is_invariant() {
        let q = array![[0.3, -1.2], [0.7, 0.1]];
        let k = array![[1.0, 0.5], [-0.2, 0.9], [0.4, -0.4]];
        let base = attention_weights(&AttentionInputs {
            q_window: q.clone(),
            k_full: k.clone(),
            v_full: None,
            hidden: 2.0,
        })
        .unwrap();
        let c = 3.0;
        let scaled = attention_weights(&AttentionInputs {
            q_window: q * c,
            k_full: k * c,
            v_full: None,
            hidden: 2.0 * c.powi(4),
        })
        .unwrap();
        for (a, b) in base.weights.iter().zip(scaled.weights.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ok_k = Array2::<f64>::zeros((3, 2));
        let bad_dim = AttentionInputs {
            q_window: Array2::zeros((1, 3)),
            k_full: ok_k.clone(),
            v_full: None,
            hidden: 2.0,
        };
        assert!(matches!(attention_weights(&bad_dim), Err(RefineError::DimensionMismatch(_))));
        let mut nan_q = Array2::zeros((1, 2));
        nan_q[[0, 0]] = f64::NAN;
        let non_finite = AttentionInputs {
            q_window: nan_q,
            k_full: ok_k.clone(),
            v_full: None,
            hidden: 2.0,
        };
        assert!(matches!(attention_weights(&non_finite), Err(RefineError::NonFinite(_))));
        let bad_v = AttentionInputs {
            q_window: Array2::zeros((1, 2)),
            k_full: ok_k,
            v_full: Some(Array2::zeros((2, 2))),
            hidden: 2.0,
        };
        assert!(attention_weights(&bad_v).is_err());
    }

    #[test]
    fn identity_pooling_single_row() {
        let row = array![[0.1, 0.2, 0.3, 0.15, 0.25]];
        let s = score_tokens(
            &[row],
            &ScoringConfig {
                window: 1,
                kernel: 1,
                aggregation: HeadAggregation::Sum,
            },
            1..4,
        )
        .unwrap();
        assert_eq!(s.scores, vec![0.2, 0.3, 0.15]);
    }

    fn brute_pool(xs: &[f64], kernel: usize) -> Vec<f64> {
        let half = kernel as i64 / 2;
        let mut out = Vec::new();
        for i in 0..xs.len() as i64 {
            let mut best = f64::NEG_INFINITY;
            for j in i - half..=i + half {
                if j >= 0 && (j as usize) < xs.len() && xs[j as usize] > best {
                    best = xs[j as usize];
                }
            }
            out.push(best);
        }
        out
    }

    #[test]
    fn kernel_three_spreads_spike() {
        let xs = [0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0];
        let pooled = max_pool(&xs, 3);
        assert_eq!(pooled, brute_pool(&xs, 3));
        assert_eq!(pooled, vec![0.0, 0.0, 5.0, 5.0, 5.0, 0.0, 1.0, 1.0]);
        for k in [1, 3, 5, 7, 9, 11] {
            assert_eq!(max_pool(&xs, k), brute_pool(&xs, k));
        }
    }

    #[test]
    fn two_heads_disjoint_spikes() {
        let mut a = Array2::zeros((1, 8));
        a[[0, 1]] = 1.0;
        let mut b = Array2::zeros((1, 8));
        b[[0, 6]] = 1.0;
        let cfg = ScoringConfig {
            window: 1,
            kernel: 1,
            aggregation: HeadAggregation::Sum,
        };
        let s = score_tokens(&[a, b], &cfg, 0..8).unwrap();
        let top = top_k_indices(&s.scores, 2);
        assert_eq!(top, vec![1, 6]);
        assert!(s.scores.iter().enumerate().all(|(i, &x)| (i == 1 || i == 6) == (x > 0.0)));
    }

    #[test]
    fn window_restricts_to_trailing_rows() {
        let m = array![[9.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let cfg = ScoringConfig {
            window: 2,
            kernel: 1,
            aggregation: HeadAggregation::Sum,
        };
        assert_eq!(score_tokens(&[m], &cfg, 0..3).unwrap().scores, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn top_k_votes_counts_heads() {
        let a = array![[0.9, 0.1, 0.8, 0.0]];
        let b = array![[0.9, 0.7, 0.0, 0.1]];
        let cfg = ScoringConfig {
            window: 1,
            kernel: 1,
            aggregation: HeadAggregation::TopKVotes { ratio: 0.5 },
        };
        let s = score_tokens(&[a, b], &cfg, 0..4).unwrap();
        assert_eq!(s.scores, vec![2.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn score_errors() {
        let cfg = ScoringConfig::default();
        assert!(matches!(score_tokens(&[], &cfg, 0..0), Err(RefineError::NoHeads)));
        let even = ScoringConfig { kernel: 4, ..cfg };
        assert!(matches!(
            score_tokens(&[Array2::zeros((1, 4))], &even, 0..4),
            Err(RefineError::BadKernel(4))
        ));
        assert!(score_tokens(&[Array2::zeros((1, 4)), Array2::zeros((1, 5))], &cfg, 0..4).is_err());
        assert!(score_tokens(&[Array2::zeros((1, 4))], &cfg, 0..5).is_err());
    }
}
