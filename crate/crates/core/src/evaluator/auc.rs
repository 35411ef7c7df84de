//! One-vs-rest ROC AUC from the Mann–Whitney rank statistic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::PortableRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// Mean over included classes.
    pub macro_auc: f64,
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// AUC of `scores` for the binary labels `pos`, ties counting one half.
/// `None` unless both classes occur.
pub fn binary_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let n_pos = pos.iter().filter(|&&p| p).count();
    let n_neg = pos.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of positives, kept in half units so it is exact.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_x2 = (i + 1 + j + 1) as u64;
        rank_sum_x2 += mid_x2 * order[i..=j].iter().filter(|&&k| pos[k]).count() as u64;
        i = j + 1;
    }
    let u_x2 = rank_sum_x2 - (n_pos * (n_pos + 1)) as u64;
    Some(u_x2 as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over `scores[i][k]` (score of sample `i` for class
/// `k`). Classes lacking positives or negatives are excluded and listed.
pub fn auc_ovr(scores: &[Vec<f64>], labels: &[usize]) -> Result<AucReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("auc needs at least 2 samples".into()));
    }
    let k = scores[0].len();
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|&l| l >= k) {
        return Err(Error::Shape(format!("score rows must all have {k} entries and labels lie in [0, {k})")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument(format!("all {} labels are class {}", labels.len(), labels[0])));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let a = binary_auc(&col, &pos);
        if a.is_none() {
            excluded.push(c);
        }
        per_class.push(a);
    }
    let inc: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(AucReport { macro_auc: inc.iter().sum::<f64>() / inc.len() as f64, per_class, excluded })
}

/// Exhaustive pair counting: wins + ½·ties over all positive/negative pairs.
pub fn pair_count_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !pos[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if pos[j] {
                continue;
            }
            pairs += 1;
            twice += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    (pairs > 0).then(|| twice as f64 / 2.0 / pairs as f64)
}

/// Macro AUCs under `n` random relabelings (label shuffles) of the same scores.
pub fn permutation_null(scores: &[Vec<f64>], labels: &[usize], n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = PortableRng::derive(seed, 0x9E70);
    let mut shuffled = labels.to_vec();
    (0..n)
        .map(|_| {
            rng.shuffle(&mut shuffled);
            auc_ovr(scores, &shuffled).map(|r| r.macro_auc)
        })
        .collect()
}

/// Value at quantile `q` (nearest rank on the sorted sample).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}
