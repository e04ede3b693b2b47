//! Small numeric helpers: compensated sums, order statistics, rank utilities.

use crate::rng::RngStream;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("empty input vector")]
    EmptyVector,
    #[error("quantile {0} outside [0, 1]")]
    QuantileOutOfRange(f64),
    #[error("non-finite value encountered")]
    NonFinite,
}

/// Neumaier-compensated sum (the Kahan-Babuska variant, which survives the
/// case where the running sum loses its own correction). Used for reductions
/// whose inputs were produced in parallel: summing a collected vector in
/// index order keeps results bit-identical no matter how the items were
/// scheduled.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample variance (ddof = 1); 0 for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    kahan_sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() - 1) as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the maximum; exact ties are resolved uniformly at random.
pub fn argmax_uniform_ties(values: &[f64], rng: &mut RngStream) -> Result<usize, NumError> {
    if values.is_empty() {
        return Err(NumError::EmptyVector);
    }
    let mut best = values[0];
    let mut tied: Vec<usize> = vec![0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            tied.clear();
            tied.push(i);
        } else if v == best {
            tied.push(i);
        }
    }
    Ok(tied[rng.below(tied.len())])
}

/// Index of the minimum; exact ties are resolved uniformly at random.
pub fn argmin_uniform_ties(values: &[f64], rng: &mut RngStream) -> Result<usize, NumError> {
    if values.is_empty() {
        return Err(NumError::EmptyVector);
    }
    let mut best = values[0];
    let mut tied: Vec<usize> = vec![0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best {
            best = v;
            tied.clear();
            tied.push(i);
        } else if v == best {
            tied.push(i);
        }
    }
    Ok(tied[rng.below(tied.len())])
}

/// Nearest-rank percentile: the smallest element v such that at least
/// `q * N` of the values are <= v. The result is always an input element.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, NumError> {
    if values.is_empty() {
        return Err(NumError::EmptyVector);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(NumError::QuantileOutOfRange(q));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).ok_or(NumError::NonFinite).unwrap());
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Candidate indices sorted by fitness descending, exact ties by lower index.
pub fn rank_desc_by_fitness(fitness: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fitness.len()).collect();
    idx.sort_by(|&a, &b| {
        fitness[b]
            .partial_cmp(&fitness[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Candidate indices sorted by value ascending, exact ties by lower index.
pub fn rank_asc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Average ranks (1-based, ties share the mean rank), for rank correlations.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let order = rank_asc(values);
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(NumError::EmptyVector);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let ma = mean(&ra);
    let mb = mean(&rb);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..ra.len() {
        let xa = ra[i] - ma;
        let xb = rb[i] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da == 0.0 || db == 0.0 {
        return Err(NumError::EmptyVector);
    }
    Ok(num / (da * db).sqrt())
}
