//! Distance-based losses over embedding batches: pairwise distances,
//! multi-similarity pair mining, triplet margin loss, cross-entropy, and the
//! weighted combination used for training.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("InvalidLabel: label {label} out of range for {classes} classes at batch index {index}")]
    InvalidLabel {
        label: usize,
        classes: usize,
        index: usize,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Scalar weights for the combined training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the triplet term.
    pub alpha: f64,
    /// Weight on the classifier term.
    pub beta: f64,
    /// Triplet margin.
    pub delta: f64,
    /// Miner slack: relaxes both mining conditions.
    pub epsilon_mine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            delta: 0.1,
            epsilon_mine: 0.05,
        }
    }
}

/// Which negative-mining rule to apply.
///
/// `Standard` keeps a negative pair when it is closer than the anchor's
/// farthest positive (plus slack). `Literal` compares against the anchor's
/// farthest NEGATIVE instead, which accepts every negative pair whenever the
/// slack is positive; it exists for ablation runs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MinerMode {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "literal-eq3")]
    Literal,
}

impl Default for MinerMode {
    fn default() -> Self {
        MinerMode::Standard
    }
}

/// Pairs selected by the miner; indices refer to positions in the batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MinedPairs {
    /// (anchor, positive) with equal labels, ascending order.
    pub positives: Vec<(usize, usize)>,
    /// (anchor, negative) with differing labels, ascending order.
    pub negatives: Vec<(usize, usize)>,
}

impl MinedPairs {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

// ── Distances ────────────────────────────────────────────────────────────────

/// Full Euclidean distance matrix: D[i][j] = ||e_i - e_j||, symmetric with a
/// zero diagonal.
pub fn pairwise_distances(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = embeddings.len();
    let mut d = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in (i + 1)..b {
            let dist = euclidean(&embeddings[i], &embeddings[j]);
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    d
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ── Mining ───────────────────────────────────────────────────────────────────

/// Multi-similarity mining with the standard negative rule.
pub fn mine_multi_similarity(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    epsilon_mine: f64,
) -> MinedPairs {
    mine_with_mode(embeddings, labels, epsilon_mine, MinerMode::Standard)
}

/// Multi-similarity mining. For each anchor i with positives P(i) (same
/// label, other index) and negatives N(i) (different label):
///
/// * positive (i, j) is kept iff d(i,j) > min over N(i) of d(i,.) - eps;
/// * negative (i, j) is kept iff d(i,j) < max over P(i) of d(i,.) + eps
///   (`Standard`), or d(i,j) < max over N(i) of d(i,.) + eps (`Literal`).
///
/// An empty reference set makes its condition unsatisfiable, so anchors
/// lacking positives or negatives keep nothing that depends on the missing
/// side. Output pairs are sorted ascending by (anchor, other).
pub fn mine_with_mode(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    epsilon_mine: f64,
    mode: MinerMode,
) -> MinedPairs {
    assert_eq!(embeddings.len(), labels.len(), "one label per embedding");
    let b = embeddings.len();
    let d = pairwise_distances(embeddings);
    let mut out = MinedPairs::default();

    for i in 0..b {
        let mut min_neg = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        let mut max_pos = f64::NEG_INFINITY;
        for k in 0..b {
            if labels[k] != labels[i] {
                min_neg = min_neg.min(d[i][k]);
                max_neg = max_neg.max(d[i][k]);
            } else if k != i {
                max_pos = max_pos.max(d[i][k]);
            }
        }
        let neg_bound = match mode {
            MinerMode::Standard => max_pos,
            MinerMode::Literal => max_neg,
        };
        for j in 0..b {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if d[i][j] > min_neg - epsilon_mine {
                    out.positives.push((i, j));
                }
            } else if d[i][j] < neg_bound + epsilon_mine {
                out.negatives.push((i, j));
            }
        }
    }
    out
}

// ── Losses ───────────────────────────────────────────────────────────────────

/// Mean hinge loss over all triplets formed per anchor as the cross product
/// of its mined positives and negatives: max(d(a,p) - d(a,n) + delta, 0).
/// Returns 0 when no triplet exists.
pub fn triplet_margin_loss(embeddings: &[Vec<f64>], pairs: &MinedPairs, delta: f64) -> f64 {
    triplet_margin_loss_with_grad(embeddings, pairs, delta).0
}

/// Triplet loss plus its gradient with respect to every embedding. The hinge
/// kink and zero-distance pairs use subgradient 0.
pub fn triplet_margin_loss_with_grad(
    embeddings: &[Vec<f64>],
    pairs: &MinedPairs,
    delta: f64,
) -> (f64, Vec<Vec<f64>>) {
    let b = embeddings.len();
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; dim]; b];

    let triplets: Vec<(usize, usize, usize)> = pairs
        .positives
        .iter()
        .flat_map(|&(a, p)| {
            pairs
                .negatives
                .iter()
                .filter(move |&&(a2, _)| a2 == a)
                .map(move |&(_, n)| (a, p, n))
        })
        .collect();
    if triplets.is_empty() {
        return (0.0, grad);
    }

    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for &(a, p, n) in &triplets {
        let dp = euclidean(&embeddings[a], &embeddings[p]);
        let dn = euclidean(&embeddings[a], &embeddings[n]);
        let margin = dp - dn + delta;
        if margin <= 0.0 {
            continue;
        }
        total += margin;
        for k in 0..dim {
            // d||a-p||/da  = (a-p)/||a-p||, zero when the pair coincides
            if dp > 0.0 {
                let g = scale * (embeddings[a][k] - embeddings[p][k]) / dp;
                grad[a][k] += g;
                grad[p][k] -= g;
            }
            if dn > 0.0 {
                let g = scale * (embeddings[a][k] - embeddings[n][k]) / dn;
                grad[a][k] -= g;
                grad[n][k] += g;
            }
        }
    }
    (total * scale, grad)
}

/// Mean negative log-likelihood under a softmax over the logits, stabilized
/// by max-subtraction.
pub fn cross_entropy_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(v, _)| v)
}

/// Cross-entropy plus its gradient with respect to the logits:
/// (softmax - onehot) / batch.
pub fn cross_entropy_with_grad(
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    assert_eq!(logits.len(), labels.len(), "one label per logit row");
    assert!(!logits.is_empty(), "cross-entropy needs at least one sample");
    let b = logits.len();
    let classes = logits[0].len();
    let mut grad = vec![vec![0.0; classes]; b];
    let mut total = 0.0;

    for (i, (row, &label)) in logits.iter().zip(labels).enumerate() {
        if label >= classes {
            return Err(MetricError::InvalidLabel {
                label,
                classes,
                index: i,
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += denom.ln() - (row[label] - max);
        for c in 0..classes {
            let soft = (row[c] - max).exp() / denom;
            grad[i][c] = (soft - if c == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Weighted training loss: alpha * triplet + beta * classifier.
pub fn total_loss(lt: f64, lc: f64, w: &LossWeights) -> f64 {
    w.alpha * lt + w.beta * lc
}
