//! Evaluation metrics: average precision, rank correlations, agreement
//! statistics over multiple label sources, and budgeted summary selection.

use crate::error::{Error, Result};

/// Area under the precision-recall curve of `scores` against binary
/// `labels`. Ranking sorts by score descending with ties broken by
/// ascending index, so results are reproducible on constant scores.
///
/// The precision sum is accumulated as an exact rational while it fits in
/// 128 bits, so small hand cases come out as the correctly rounded value
/// of their true fraction; larger inputs fall back to float summation.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("average_precision: non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Metric(
            "average_precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut hits = 0u128;
    let mut float_sum = 0.0;
    let mut exact: Option<(u128, u128)> = Some((0, 1));
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            let rank = (k + 1) as u128;
            float_sum += hits as f64 / rank as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits, rank));
        }
    }
    if let Some((n, d)) = exact {
        if let Some(dp) = d.checked_mul(positives as u128) {
            if n < (1 << 53) && dp < (1 << 53) {
                return Ok(n as f64 / dp as f64);
            }
        }
    }
    Ok(float_sum / positives as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// `n1/d1 + n2/d2` in lowest terms, `None` on overflow.
fn add_fraction(n1: u128, d1: u128, n2: u128, d2: u128) -> Option<(u128, u128)> {
    let g = gcd(d1, d2);
    let lcm = (d1 / g).checked_mul(d2)?;
    let a = n1.checked_mul(lcm / d1)?;
    let b = n2.checked_mul(lcm / d2)?;
    let n = a.checked_add(b)?;
    let g2 = gcd(n, lcm);
    Some((n / g2, lcm / g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    Kendall,
    Spearman,
}

/// Rank correlation between two score vectors: Kendall tau-b
/// (tie-corrected) or Spearman's rho (Pearson correlation of average
/// ranks).
pub fn rank_correlation(a: &[f64], b: &[f64], kind: CorrelationKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!(
            "rank_correlation: {} vs {} entries",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Metric(
            "rank_correlation needs at least 2 items".into(),
        ));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Err(Error::Metric(
            "rank_correlation is undefined for an all-constant vector".into(),
        ));
    }
    match kind {
        CorrelationKind::Kendall => {
            let mut concordant = 0i64;
            let mut discordant = 0i64;
            let mut ties_a = 0i64;
            let mut ties_b = 0i64;
            for i in 0..n {
                for j in (i + 1)..n {
                    let da = a[i] - a[j];
                    let db = b[i] - b[j];
                    if da == 0.0 && db == 0.0 {
                        ties_a += 1;
                        ties_b += 1;
                    } else if da == 0.0 {
                        ties_a += 1;
                    } else if db == 0.0 {
                        ties_b += 1;
                    } else if (da > 0.0) == (db > 0.0) {
                        concordant += 1;
                    } else {
                        discordant += 1;
                    }
                }
            }
            let n0 = (n * (n - 1) / 2) as f64;
            let denom = ((n0 - ties_a as f64) * (n0 - ties_b as f64)).sqrt();
            Ok((concordant - discordant) as f64 / denom)
        }
        CorrelationKind::Spearman => {
            let ra = average_ranks(a);
            let rb = average_ranks(b);
            pearson(&ra, &rb)
        }
    }
}

/// Average (midrank) positions, 1-based.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("pearson: zero variance".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Scores from several label sources over the same items, with a
/// binarization threshold per source.
#[derive(Debug, Clone)]
pub struct RaterMatrix {
    scores: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
}

impl RaterMatrix {
    pub fn new(scores: Vec<Vec<f64>>, thresholds: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::Metric(
                "agreement statistics need at least 2 raters".into(),
            ));
        }
        if thresholds.len() != scores.len() {
            return Err(Error::Metric(format!(
                "{} thresholds for {} raters",
                thresholds.len(),
                scores.len()
            )));
        }
        let n = scores[0].len();
        for (r, row) in scores.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Metric(format!(
                    "rater {r} scored {} items, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Metric(format!(
                    "rater {r} has scores outside [0, 1]"
                )));
            }
        }
        Ok(RaterMatrix { scores, thresholds })
    }

    pub fn num_raters(&self) -> usize {
        self.scores.len()
    }

    pub fn num_items(&self) -> usize {
        self.scores[0].len()
    }

    pub fn rater(&self, r: usize) -> &[f64] {
        &self.scores[r]
    }

    /// Item sets selected by each rater after binarization.
    fn selections(&self) -> Vec<Vec<bool>> {
        self.scores
            .iter()
            .zip(&self.thresholds)
            .map(|(row, &t)| row.iter().map(|&v| v >= t).collect())
            .collect()
    }
}

/// Cronbach's alpha with raters as test items: sample variances
/// (`N - 1` denominator) of each rater and of the per-item rater sums.
pub fn cronbach_alpha(m: &RaterMatrix) -> Result<f64> {
    let r = m.num_raters();
    let n = m.num_items();
    if n < 2 {
        return Err(Error::Metric(
            "cronbach_alpha needs at least 2 items".into(),
        ));
    }
    let sample_var = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64
    };
    let var_sum: f64 = (0..r).map(|i| sample_var(m.rater(i))).sum();
    let totals: Vec<f64> = (0..n)
        .map(|i| (0..r).map(|j| m.rater(j)[i]).sum())
        .collect();
    let total_var = sample_var(&totals);
    if total_var == 0.0 {
        return Err(Error::Metric(
            "cronbach_alpha undefined: zero variance of rater sums".into(),
        ));
    }
    Ok(r as f64 / (r - 1) as f64 * (1.0 - var_sum / total_var))
}

/// Mean Dice/F1 overlap of the binarized selections over all unordered
/// rater pairs.
pub fn pairwise_f1(m: &RaterMatrix) -> Result<f64> {
    let sel = m.selections();
    for (r, s) in sel.iter().enumerate() {
        if !s.iter().any(|&b| b) {
            return Err(Error::Metric(format!(
                "pairwise_f1: rater {r} selects no items at its threshold"
            )));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sel.len() {
        for j in (i + 1)..sel.len() {
            let inter = sel[i]
                .iter()
                .zip(&sel[j])
                .filter(|&(&a, &b)| a && b)
                .count();
            let size_i = sel[i].iter().filter(|&&b| b).count();
            let size_j = sel[j].iter().filter(|&&b| b).count();
            total += 2.0 * inter as f64 / (size_i + size_j) as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Fleiss' kappa over the two categories induced by per-rater
/// binarization.
pub fn fleiss_kappa(m: &RaterMatrix) -> Result<f64> {
    let sel = m.selections();
    let r = m.num_raters() as f64;
    let n = m.num_items();
    let mut mean_agreement = 0.0;
    let mut pos_total = 0.0;
    for i in 0..n {
        let pos = sel.iter().filter(|s| s[i]).count() as f64;
        let neg = r - pos;
        mean_agreement += (pos * (pos - 1.0) + neg * (neg - 1.0)) / (r * (r - 1.0));
        pos_total += pos;
    }
    mean_agreement /= n as f64;
    let p_pos = pos_total / (n as f64 * r);
    let p_e = p_pos * p_pos + (1.0 - p_pos) * (1.0 - p_pos);
    if p_e >= 1.0 {
        return Err(Error::Metric(
            "fleiss_kappa undefined: every rater put every item in one category".into(),
        ));
    }
    Ok((mean_agreement - p_e) / (1.0 - p_e))
}

/// Exact 0/1 knapsack over durations quantized to 0.1 s: maximize the score
/// sum subject to the summary lasting at most `budget_fraction` of the
/// total. Ties prefer lower total duration, then the lexicographically
/// smallest index set.
pub fn knapsack_select(
    scores: &[f64],
    durations_s: &[f64],
    budget_fraction: f64,
) -> Result<Vec<usize>> {
    if scores.len() != durations_s.len() {
        return Err(Error::Metric(format!(
            "knapsack_select: {} scores vs {} durations",
            scores.len(),
            durations_s.len()
        )));
    }
    if durations_s.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::Metric(
            "knapsack_select: durations must be positive".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("knapsack_select: non-finite score".into()));
    }
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::Metric(format!(
            "budget_fraction must be in (0, 1], got {budget_fraction}"
        )));
    }
    if budget_fraction >= 1.0 {
        return Ok((0..scores.len()).collect());
    }

    let n = scores.len();
    let weights: Vec<u64> = durations_s.iter().map(|&d| quantize_duration(d)).collect();
    let total: f64 = durations_s.iter().sum();
    let budget = (budget_fraction * total * 10.0 + 1e-9).floor() as u64;
    if budget == 0 {
        return Ok(Vec::new());
    }
    let w = budget as usize + 1;
    if n.saturating_mul(w) > 50_000_000 {
        return Err(Error::Metric(format!(
            "knapsack instance too large: {n} items x {w} duration cells"
        )));
    }

    // Suffix DP: best[(i, c)] = (max value, min weight) over items i.. with
    // capacity c. The pair order makes tie handling explicit.
    let mut best = vec![(0.0f64, 0u64); (n + 1) * w];
    for i in (0..n).rev() {
        for c in 0..w {
            let skip = best[(i + 1) * w + c];
            let mut cell = skip;
            if weights[i] as usize <= c {
                let sub = best[(i + 1) * w + c - weights[i] as usize];
                let take = (scores[i] + sub.0, weights[i] + sub.1);
                if take.0 > cell.0 || (take.0 == cell.0 && take.1 < cell.1) {
                    cell = take;
                }
            }
            best[i * w + c] = cell;
        }
    }

    // Reconstruct lexicographically smallest optimum: take an item whenever
    // taking still reaches the target (value, weight).
    let mut selected = Vec::new();
    let mut cap = budget as usize;
    let (mut v_rem, mut w_rem) = best[cap];
    for i in 0..n {
        if weights[i] as usize <= cap {
            let sub = best[(i + 1) * w + cap - weights[i] as usize];
            if scores[i] + sub.0 == v_rem && weights[i] + sub.1 == w_rem {
                selected.push(i);
                v_rem = sub.0;
                w_rem = sub.1;
                cap -= weights[i] as usize;
                continue;
            }
        }
        debug_assert_eq!(best[(i + 1) * w + cap], (v_rem, w_rem));
    }
    Ok(selected)
}

/// Duration quantized to 0.1-second cells, floored at one cell.
pub fn quantize_duration(seconds: f64) -> u64 {
    ((seconds * 10.0).round() as u64).max(1)
}
