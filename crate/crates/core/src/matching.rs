//! Bipartite assignment of predicted queries to ground-truth instances.
//!
//! Cost per (query, instance) pair blends the matching score and mask
//! overlap: `lambda_s * (-log_score) + lambda_m * (1 - dice)`. The optimal
//! assignment comes from the Hungarian algorithm (shortest augmenting paths
//! with potentials, O(n^3)); matched queries train as positives, the rest as
//! negatives.

/// Cost weights; defaults keep the two terms the same order of magnitude at
/// initialization.
#[derive(Debug, Clone, Copy)]
pub struct MatchWeights {
    pub score: f64,
    pub mask: f64,
    pub dice_smooth: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { score: 2.0, mask: 5.0, dice_smooth: 1.0 }
    }
}

/// Result of matching one sample.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `(query, instance)` pairs, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Per-query binary target: 1.0 for matched queries.
    pub labels: Vec<f64>,
}

/// Soft Dice coefficient between a predicted mask in [0,1] and a binary
/// ground-truth mask.
pub fn dice(pred: &[f64], gt: &[f64], smooth: f64) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0.0;
    let (mut ps, mut gs) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        inter += p * g;
        ps += p;
        gs += g;
    }
    (2.0 * inter + smooth) / (ps + gs + smooth)
}

/// Minimum-cost assignment of rows to columns for an `n x m` matrix with
/// `n <= m`; returns the column chosen for each row. Deterministic: the
/// augmenting scan visits columns in index order, so equal-cost solutions
/// resolve toward lower indices.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian expects rows <= columns");
    // potentials and matching, 1-indexed over columns with 0 as a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row matched to column j

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}

/// Assign queries to ground-truth instances. With an empty ground truth
/// every query is a negative and no pairs are produced. When instances
/// outnumber queries, only `n_queries` of them get matched.
pub fn match_queries(
    log_scores: &[f64],
    pred_masks: &[Vec<f64>],
    gt_masks: &[Vec<f64>],
    weights: &MatchWeights,
) -> Assignment {
    let n = log_scores.len();
    debug_assert_eq!(pred_masks.len(), n);
    let g = gt_masks.len();
    let mut labels = vec![0.0; n];
    if g == 0 {
        return Assignment { pairs: vec![], labels };
    }

    let pair_cost = |q: usize, t: usize| {
        weights.score * (-log_scores[q])
            + weights.mask * (1.0 - dice(&pred_masks[q], &gt_masks[t], weights.dice_smooth))
    };

    let mut pairs: Vec<(usize, usize)> = if g <= n {
        // rows = instances (the smaller side), columns = queries
        let cost: Vec<Vec<f64>> = (0..g).map(|t| (0..n).map(|q| pair_cost(q, t)).collect()).collect();
        hungarian(&cost).into_iter().enumerate().map(|(t, q)| (q, t)).collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..n).map(|q| (0..g).map(|t| pair_cost(q, t)).collect()).collect();
        hungarian(&cost).into_iter().enumerate().collect()
    };
    pairs.sort_unstable();
    for &(q, _) in &pairs {
        labels[q] = 1.0;
    }
    Assignment { pairs, labels }
}
