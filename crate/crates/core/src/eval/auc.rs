use crate::error::{Error, Result};

/// Anomaly scores with in-class ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    is_positive: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, is_positive: Vec<bool>) -> Result<Self> {
        if scores.len() != is_positive.len() {
            return Err(Error::Data(format!(
                "{} scores for {} labels",
                scores.len(),
                is_positive.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Data("NaN anomaly score".into()));
        }
        Ok(ScoredSet {
            scores,
            is_positive,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_positive(&self) -> &[bool] {
        &self.is_positive
    }
}

/// Probability that an out-of-class sample outscores an in-class one, ties
/// counting one half. Computed from tie-averaged ranks in exact integer
/// arithmetic, so it equals pairwise counting bit for bit.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let n = set.scores.len();
    let n_neg = set.is_positive.iter().filter(|&&p| !p).count() as u128;
    let n_pos = n as u128 - n_neg;
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::UndefinedAuc);
    }
    // -0.0 + 0.0 == +0.0, so signed zeros share a tie group
    let key: Vec<f64> = set.scores.iter().map(|s| s + 0.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]));

    // twice the rank sum of the out-of-class samples
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && key[order[j + 1]] == key[order[i]] {
            j += 1;
        }
        let negs = order[i..=j]
            .iter()
            .filter(|&&k| !set.is_positive[k])
            .count() as u128;
        // ranks i+1..=j+1 average to (i + j + 2) / 2
        twice_rank_sum += negs * (i as u128 + j as u128 + 2);
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_neg * (n_neg + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied() {
        let s = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![true, true, false, false]).unwrap();
        assert_eq!(roc_auc(&s).unwrap(), 1.0);
        let s = ScoredSet::new(vec![0.3; 4], vec![true, false, true, false]).unwrap();
        assert_eq!(roc_auc(&s).unwrap(), 0.5);
        let s = ScoredSet::new(vec![0.3, 0.4], vec![true, true]).unwrap();
        assert!(matches!(roc_auc(&s), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn signed_zeros_tie() {
        let s = ScoredSet::new(vec![-0.0, 0.0], vec![true, false]).unwrap();
        assert_eq!(roc_auc(&s).unwrap(), 0.5);
    }
}
