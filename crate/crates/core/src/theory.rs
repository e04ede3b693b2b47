//! Why diagonal evolution strategies beat single-round search on nearly
//! block-separable objectives, made measurable: coupling strength of a scaled
//! Hessian, alignment between a ranking direction and a diagonal metric,
//! Monte-Carlo recombination constants, rank fidelity under replicated binary
//! fitness, a closed-form gain-ratio prediction, contraction-rate fitting,
//! and synthetic objectives with controllable coupling to test all of it.
//!
//! Sign convention used throughout: candidates are ranked by ascending linear
//! score, so selection picks the most negative score (descent). The selection
//! intensity `alpha` is therefore negative and only `alpha^2` enters derived
//! quantities.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::budget::{BudgetError, BudgetLedger};
use crate::par;
use crate::rng::RngStream;
use crate::sepcma::{default_lambda, sepcma_new, CmaError, SepCmaOverrides};
use crate::stats;

const LBL_TRIAL: u64 = 0x54524c;
const LBL_SIGN: u64 = 0x5347;
const LBL_ASK: u64 = 0x41534b;
const LBL_EVAL: u64 = 0x4556414c;
const LBL_CAND: u64 = 0x43414e44;
const LBL_CMA_ARM: u64 = 1;
const LBL_RS_ARM: u64 = 2;
const POWER_SEED: u64 = 0x505749;
const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-8;
const SYMMETRY_RTOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("entry ({i},{j}) breaks symmetry: {a} vs {b}")]
    NotSymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("diagonal entry {index} is {value}, must be positive")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

// ---------------------------------------------------------------------------
// Coordinate partition
// ---------------------------------------------------------------------------

/// Partition of parameter coordinates 0..n into contiguous blocks. Couplings
/// are measured between coordinates in different blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinatePartition {
    blocks: Vec<Range<usize>>,
    block_of: Vec<usize>,
}

impl CoordinatePartition {
    /// Consecutive blocks of the given sizes; every size must be positive.
    pub fn contiguous(sizes: &[usize]) -> Result<Self, TheoryError> {
        if sizes.is_empty() {
            return Err(TheoryError::InvalidInput(
                "partition needs at least one block".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(sizes.len());
        let mut block_of = Vec::new();
        let mut start = 0;
        for (b, &size) in sizes.iter().enumerate() {
            if size == 0 {
                return Err(TheoryError::InvalidInput(format!("block {b} is empty")));
            }
            blocks.push(start..start + size);
            block_of.extend(std::iter::repeat(b).take(size));
            start += size;
        }
        Ok(Self { blocks, block_of })
    }

    pub fn dim(&self) -> usize {
        self.block_of.len()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block_index(&self, coord: usize) -> usize {
        self.block_of[coord]
    }
}

// ---------------------------------------------------------------------------
// Scaled Hessian and coupling measures
// ---------------------------------------------------------------------------

/// Dense symmetric matrix, validated to 1e-9 relative symmetry. Build one
/// directly from entries, or from a raw Hessian plus a positive diagonal
/// scaling (entries become h_ij * sqrt(s_i * s_j)).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledHessian {
    n: usize,
    mat: Vec<f64>,
}

impl ScaledHessian {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, TheoryError> {
        if n == 0 {
            return Err(TheoryError::InvalidInput("dimension must be positive".into()));
        }
        if entries.len() != n * n {
            return Err(TheoryError::InvalidInput(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        for (k, &v) in entries.iter().enumerate() {
            if !v.is_finite() {
                return Err(TheoryError::NonFinite(format!("matrix entry {k}")));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let a = entries[i * n + j];
                let b = entries[j * n + i];
                let tol = SYMMETRY_RTOL * a.abs().max(b.abs());
                if (a - b).abs() > tol {
                    return Err(TheoryError::NotSymmetric { i, j, a, b });
                }
            }
        }
        Ok(Self { n, mat: entries })
    }

    /// Applies a structural scaling: entry (i,j) becomes h_ij * sqrt(s_i s_j).
    pub fn scaled(n: usize, hessian: Vec<f64>, scaling: &[f64]) -> Result<Self, TheoryError> {
        if scaling.len() != n {
            return Err(TheoryError::InvalidInput(format!(
                "scaling has {} entries, expected {n}",
                scaling.len()
            )));
        }
        for (i, &s) in scaling.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(TheoryError::NonPositiveDiagonal { index: i, value: s });
            }
        }
        if hessian.len() != n * n {
            return Err(TheoryError::InvalidInput(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                hessian.len()
            )));
        }
        let mut mat = hessian;
        for i in 0..n {
            for j in 0..n {
                mat[i * n + j] *= (scaling[i] * scaling[j]).sqrt();
            }
        }
        Self::new(n, mat)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.mat[i * self.n + j]
    }
}

/// Three coupling measures of decreasing tightness: the spectral norm of the
/// diagonally normalized off-block part, the worst off-block coherence, and
/// the worst off-block row sum relative to the diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeparabilityMode {
    SpectralNorm,
    MaxCoherence,
    RowSumRatio,
}

/// Coupling strength of `h` across the blocks of `partition`. Zero iff the
/// matrix is exactly block-diagonal. Requires a strictly positive diagonal.
pub fn eps_separability(
    h: &ScaledHessian,
    partition: &CoordinatePartition,
    mode: SeparabilityMode,
) -> Result<f64, TheoryError> {
    let n = h.n();
    if partition.dim() != n {
        return Err(TheoryError::InvalidInput(format!(
            "partition covers {} coordinates, matrix has {n}",
            partition.dim()
        )));
    }
    for i in 0..n {
        let d = h.entry(i, i);
        if !(d > 0.0) {
            return Err(TheoryError::NonPositiveDiagonal { index: i, value: d });
        }
    }
    match mode {
        SeparabilityMode::MaxCoherence => {
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    if partition.block_index(i) != partition.block_index(j) {
                        let c = h.entry(i, j).abs() / (h.entry(i, i) * h.entry(j, j)).sqrt();
                        worst = worst.max(c);
                    }
                }
            }
            Ok(worst)
        }
        SeparabilityMode::RowSumRatio => {
            let mut worst = 0.0f64;
            for i in 0..n {
                let mut off = 0.0;
                for j in 0..n {
                    if partition.block_index(i) != partition.block_index(j) {
                        off += h.entry(i, j).abs();
                    }
                }
                worst = worst.max(off / h.entry(i, i));
            }
            Ok(worst)
        }
        SeparabilityMode::SpectralNorm => {
            // D^{-1/2} * offblock(H) * D^{-1/2}, then its spectral norm.
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if partition.block_index(i) != partition.block_index(j) {
                        m[i * n + j] = h.entry(i, j) / (h.entry(i, i) * h.entry(j, j)).sqrt();
                    }
                }
            }
            Ok(spectral_norm_symmetric(&m, n))
        }
    }
}

/// Spectral norm of a symmetric matrix by shifted power iteration. The shift
/// makes both extreme eigenvalues reachable as dominant eigenvalues of a
/// positive semidefinite operator, so plain power iteration converges even
/// when the spectrum is symmetric around zero.
fn spectral_norm_symmetric(mat: &[f64], n: usize) -> f64 {
    let mut gershgorin = 0.0f64;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| mat[i * n + j].abs()).sum();
        gershgorin = gershgorin.max(row);
    }
    if gershgorin == 0.0 {
        return 0.0;
    }
    let shift = gershgorin + 1.0;
    let mut v0 = Vec::with_capacity(n);
    let mut seed = RngStream::root(POWER_SEED);
    for _ in 0..n {
        v0.push(seed.gaussian());
    }
    let norm0 = stats::norm2(&v0);
    for x in &mut v0 {
        *x /= norm0;
    }

    let mut best = 0.0f64;
    for sign in [1.0, -1.0] {
        let mut v = v0.clone();
        let mut w = vec![0.0; n];
        let mut rayleigh = 0.0;
        for _ in 0..POWER_ITERS {
            for i in 0..n {
                let mut acc = shift * v[i];
                for j in 0..n {
                    acc += sign * mat[i * n + j] * v[j];
                }
                w[i] = acc;
            }
            rayleigh = stats::dot(&v, &w);
            let mut residual = 0.0;
            for i in 0..n {
                let r = w[i] - rayleigh * v[i];
                residual += r * r;
            }
            let wn = stats::norm2(&w);
            if wn == 0.0 {
                rayleigh = shift;
                break;
            }
            for i in 0..n {
                v[i] = w[i] / wn;
            }
            if residual.sqrt() <= POWER_TOL * rayleigh.abs().max(1.0) {
                break;
            }
        }
        best = best.max(rayleigh - shift);
    }
    best.max(0.0)
}

// ---------------------------------------------------------------------------
// Alignment between a ranking direction and a diagonal metric
// ---------------------------------------------------------------------------

/// `chi` is the squared correlation between ranking along `u` and stepping
/// through the diagonal metric; `kappa_d` is the squared spread of the metric
/// entries. Always 1/kappa_d <= chi <= 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiKappa {
    pub chi: f64,
    pub kappa_d: f64,
}

/// Alignment factor of unit vector `u` against positive diagonal `d`:
/// chi = (u' D u)^2 / (u' D^2 u), kappa_d = (d_max / d_min)^2.
pub fn chi_kappa(u: &[f64], d: &[f64]) -> Result<ChiKappa, TheoryError> {
    if u.is_empty() || u.len() != d.len() {
        return Err(TheoryError::InvalidInput(format!(
            "direction has {} coordinates, diagonal has {}",
            u.len(),
            d.len()
        )));
    }
    for (i, &s) in d.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            return Err(TheoryError::NonPositiveDiagonal { index: i, value: s });
        }
    }
    let norm = stats::norm2(u);
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-8 {
        return Err(TheoryError::InvalidInput(format!(
            "direction norm {norm} is not 1 within 1e-8"
        )));
    }
    let udu = stats::kahan_sum(u.iter().zip(d).map(|(&ui, &di)| ui * ui * di));
    let ud2u = stats::kahan_sum(u.iter().zip(d).map(|(&ui, &di)| ui * ui * di * di));
    let chi = udu * udu / ud2u;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &s in d {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let ratio = hi / lo;
    Ok(ChiKappa {
        chi,
        kappa_d: ratio * ratio,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo recombination constants
// ---------------------------------------------------------------------------

/// Selection intensity and recombinant energy for weighted rank selection on
/// isotropic Gaussian draws, with standard errors. `kappa = alpha^2 / beta`
/// is the per-dimension efficiency; `kappa_bar = n * kappa` is its
/// dimension-free form.
#[derive(Clone, Debug, PartialEq)]
pub struct RecombinationStats {
    pub n: usize,
    pub lambda: usize,
    pub mu: usize,
    pub trials: usize,
    pub alpha: f64,
    pub alpha_se: f64,
    pub beta: f64,
    pub beta_se: f64,
    pub kappa: f64,
    pub kappa_bar: f64,
    pub kappa_bar_se: f64,
}

/// Estimates the recombination constants by simulation: each trial draws
/// `lambda` iid standard Gaussians in n dimensions, ranks them by ascending
/// projection onto a fixed unit direction (the distribution is isotropic, so
/// the first axis serves), and recombines the best `mu` with `weights`.
/// alpha = E[projection of the recombinant], beta = E[squared norm of the
/// recombinant]. Trials are processed in fixed-size chunks with derived
/// streams and combined in chunk order, so the result does not depend on
/// thread scheduling.
pub fn mc_recombination(
    n: usize,
    lambda: usize,
    mu: usize,
    weights: &[f64],
    trials: usize,
    rng: &RngStream,
) -> Result<RecombinationStats, TheoryError> {
    if n == 0 {
        return Err(TheoryError::InvalidInput("dimension must be positive".into()));
    }
    if lambda < 2 || mu == 0 || mu > lambda {
        return Err(TheoryError::InvalidInput(format!(
            "need lambda >= 2 and 1 <= mu <= lambda, got lambda {lambda}, mu {mu}"
        )));
    }
    if weights.len() != mu {
        return Err(TheoryError::InvalidInput(format!(
            "got {} weights for mu = {mu}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(TheoryError::NonFinite("recombination weights".into()));
    }
    if trials < 1000 {
        return Err(TheoryError::InvalidInput(format!(
            "{trials} trials is below the minimum of 1000"
        )));
    }

    const CHUNK: usize = 128;
    let chunks = trials.div_ceil(CHUNK);
    let weights_owned = weights.to_vec();
    // Per chunk: sums of a, a^2, b, b^2, a*b.
    let partials: Vec<[f64; 5]> = par::map_indexed(chunks, |c| {
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(trials);
        let mut z = vec![0.0f64; lambda * n];
        let mut scores = vec![0.0f64; lambda];
        let mut rec = vec![0.0f64; n];
        let mut sums = [0.0f64; 5];
        for t in lo..hi {
            let mut s = rng.derive_path(&[LBL_TRIAL, t as u64]);
            for zi in z.iter_mut() {
                *zi = s.gaussian();
            }
            for k in 0..lambda {
                scores[k] = z[k * n];
            }
            let order = stats::rank_asc(&scores);
            rec.iter_mut().for_each(|x| *x = 0.0);
            for (j, &w) in weights_owned.iter().enumerate() {
                let base = order[j] * n;
                for i in 0..n {
                    rec[i] += w * z[base + i];
                }
            }
            let a = rec[0];
            let b = stats::dot(&rec, &rec);
            sums[0] += a;
            sums[1] += a * a;
            sums[2] += b;
            sums[3] += b * b;
            sums[4] += a * b;
        }
        sums
    });

    let total = |k: usize| stats::kahan_sum(partials.iter().map(|p| p[k]));
    let tn = trials as f64;
    let mean_a = total(0) / tn;
    let mean_b = total(2) / tn;
    let var_a = ((total(1) - tn * mean_a * mean_a) / (tn - 1.0)).max(0.0);
    let var_b = ((total(3) - tn * mean_b * mean_b) / (tn - 1.0)).max(0.0);
    let cov_ab = (total(4) - tn * mean_a * mean_b) / (tn - 1.0);
    let se_a = (var_a / tn).sqrt();
    let se_b = (var_b / tn).sqrt();

    let kappa = mean_a * mean_a / mean_b;
    let kappa_bar = n as f64 * kappa;
    // Delta method for kappa_bar = n * a^2 / b at (mean_a, mean_b).
    let g_a = n as f64 * 2.0 * mean_a / mean_b;
    let g_b = -(n as f64) * mean_a * mean_a / (mean_b * mean_b);
    let var_kbar =
        (g_a * g_a * var_a + g_b * g_b * var_b + 2.0 * g_a * g_b * cov_ab).max(0.0) / tn;

    Ok(RecombinationStats {
        n,
        lambda,
        mu,
        trials,
        alpha: mean_a,
        alpha_se: se_a,
        beta: mean_b,
        beta_se: se_b,
        kappa,
        kappa_bar,
        kappa_bar_se: var_kbar.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Rank attenuation under replicated binary fitness
// ---------------------------------------------------------------------------

/// How candidates are picked from a batch when estimating rank fidelity.
#[derive(Clone, Debug, PartialEq)]
pub enum RankSelector {
    /// Keep the single lowest-scoring candidate out of a pool.
    BestOfPool { candidates: usize },
    /// Rank a batch and recombine the best `mu` with the given weights.
    WeightedRecombination {
        lambda: usize,
        mu: usize,
        weights: Vec<f64>,
    },
}

/// Rank-fidelity estimate: 1 means replicated binary fitness ranks as well
/// as the noiseless score; 0 means ranking carries no signal. `flagged` is
/// set when the standard error exceeds 10% of the estimate, i.e. when more
/// trials are needed before the number means anything.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attenuation {
    pub rho2: f64,
    pub se: f64,
    pub flagged: bool,
}

/// Simulates selection through a noisy fitness: each candidate's score is a
/// standard Gaussian z, its observed fitness is the mean of `m` Bernoulli
/// draws with success probability clip(1/2 + gamma * sigma * z, 0, 1), and
/// selection keeps the lowest observed mean (ties to the earliest candidate).
/// Returns the ratio of the selected squared signal under noisy ranking to
/// the same quantity under exact ranking.
pub fn rank_attenuation_mc(
    gamma: f64,
    sigma: f64,
    m: usize,
    selector: &RankSelector,
    trials: usize,
    rng: &RngStream,
) -> Result<Attenuation, TheoryError> {
    if !(gamma.is_finite() && sigma.is_finite() && gamma >= 0.0 && sigma >= 0.0) {
        return Err(TheoryError::InvalidInput(format!(
            "slope {gamma} and step {sigma} must be finite and nonnegative"
        )));
    }
    if m == 0 {
        return Err(TheoryError::InvalidInput("replication must be positive".into()));
    }
    if trials < 2 {
        return Err(TheoryError::InvalidInput("need at least 2 trials".into()));
    }
    match selector {
        RankSelector::BestOfPool { candidates } => {
            if *candidates == 0 {
                return Err(TheoryError::InvalidInput("pool must be non-empty".into()));
            }
        }
        RankSelector::WeightedRecombination { lambda, mu, weights } => {
            if *lambda < 2 || *mu == 0 || mu > lambda {
                return Err(TheoryError::InvalidInput(format!(
                    "need lambda >= 2 and 1 <= mu <= lambda, got lambda {lambda}, mu {mu}"
                )));
            }
            if weights.len() != *mu {
                return Err(TheoryError::InvalidInput(format!(
                    "got {} weights for mu = {mu}",
                    weights.len()
                )));
            }
            if weights.iter().any(|w| !w.is_finite()) {
                return Err(TheoryError::NonFinite("recombination weights".into()));
            }
        }
    }

    let slope = gamma * sigma;
    let pool = match selector {
        RankSelector::BestOfPool { candidates } => *candidates,
        RankSelector::WeightedRecombination { lambda, .. } => *lambda,
    };

    const CHUNK: usize = 64;
    let chunks = trials.div_ceil(CHUNK);
    let selector = selector.clone();
    // Per chunk: sums of num, num^2, den, den^2, num*den.
    let partials: Vec<[f64; 5]> = par::map_indexed(chunks, |c| {
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(trials);
        let mut z = vec![0.0f64; pool];
        let mut fhat = vec![0.0f64; pool];
        let mut sums = [0.0f64; 5];
        for t in lo..hi {
            let mut s = rng.derive_path(&[LBL_TRIAL, t as u64]);
            for zi in z.iter_mut() {
                *zi = s.gaussian();
            }
            for k in 0..pool {
                let p = (0.5 + slope * z[k]).clamp(0.0, 1.0);
                let mut hits = 0u32;
                for _ in 0..m {
                    if s.uniform() < p {
                        hits += 1;
                    }
                }
                fhat[k] = f64::from(hits) / m as f64;
            }
            let (num, den) = match &selector {
                RankSelector::BestOfPool { .. } => {
                    let mut sel = 0;
                    let mut star = 0;
                    for k in 1..pool {
                        if fhat[k] < fhat[sel] {
                            sel = k;
                        }
                        if z[k] < z[star] {
                            star = k;
                        }
                    }
                    let zs = z[sel].min(0.0);
                    let zt = z[star].min(0.0);
                    (zs * zs, zt * zt)
                }
                RankSelector::WeightedRecombination { weights, .. } => {
                    let noisy = stats::rank_asc(&fhat);
                    let exact = stats::rank_asc(&z);
                    let mut a_noisy = 0.0;
                    let mut a_exact = 0.0;
                    for (j, &w) in weights.iter().enumerate() {
                        a_noisy += w * z[noisy[j]];
                        a_exact += w * z[exact[j]];
                    }
                    (a_noisy * a_noisy, a_exact * a_exact)
                }
            };
            sums[0] += num;
            sums[1] += num * num;
            sums[2] += den;
            sums[3] += den * den;
            sums[4] += num * den;
        }
        sums
    });

    let total = |k: usize| stats::kahan_sum(partials.iter().map(|p| p[k]));
    let tn = trials as f64;
    let mean_num = total(0) / tn;
    let mean_den = total(2) / tn;
    if mean_den <= 0.0 {
        return Err(TheoryError::InvalidInput(
            "exact-ranking reference signal is zero; nothing to compare against".into(),
        ));
    }
    let var_num = ((total(1) - tn * mean_num * mean_num) / (tn - 1.0)).max(0.0);
    let var_den = ((total(3) - tn * mean_den * mean_den) / (tn - 1.0)).max(0.0);
    let cov = (total(4) - tn * mean_num * mean_den) / (tn - 1.0);

    let rho2 = mean_num / mean_den;
    // Delta method for the ratio of two correlated means.
    let g_n = 1.0 / mean_den;
    let g_d = -mean_num / (mean_den * mean_den);
    let var_rho =
        (g_n * g_n * var_num + g_d * g_d * var_den + 2.0 * g_n * g_d * cov).max(0.0) / tn;
    let se = var_rho.sqrt();
    let flagged = !(rho2.is_finite() && se.is_finite()) || se > 0.1 * rho2.abs();
    Ok(Attenuation { rho2, se, flagged })
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

/// Expected squared magnitude of the best of N independent standard normal
/// scores, leading order: 2 ln N.
pub fn v_squared(candidates: usize) -> f64 {
    2.0 * (candidates as f64).ln()
}

/// Predicted ratio of iterative improvement to budget-matched single-round
/// improvement after `t` iterations:
/// (kappa_bar / 2) * t / ln(max(e, floor(m_iter * lambda / m_single * t))) * eta^2.
/// `eta` lower-bounds the ratio of the two rank fidelities. Any additive
/// coupling penalty is reported separately by the caller, never subtracted
/// here.
pub fn gain_ratio_prediction(
    t: usize,
    lambda: usize,
    m_iter: usize,
    m_single: usize,
    kappa_bar: f64,
    eta: f64,
) -> Result<f64, TheoryError> {
    if t < 2 {
        return Err(TheoryError::InvalidInput(format!(
            "need at least 2 iterations, got {t}"
        )));
    }
    if lambda == 0 || m_iter == 0 || m_single == 0 {
        return Err(TheoryError::InvalidInput(
            "population and replication counts must be positive".into(),
        ));
    }
    if !(kappa_bar.is_finite() && eta.is_finite()) {
        return Err(TheoryError::NonFinite("prediction inputs".into()));
    }
    let matched = ((m_iter * lambda) as f64 / m_single as f64 * t as f64).floor();
    let log_term = matched.max(std::f64::consts::E).ln();
    Ok(kappa_bar / 2.0 * t as f64 / log_term * eta * eta)
}

// ---------------------------------------------------------------------------
// Measurement plumbing
// ---------------------------------------------------------------------------

/// Dense Hessian by central second differences with step `h`, symmetrized.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(
    f: F,
    theta: &[f64],
    h: f64,
) -> Result<ScaledHessian, TheoryError> {
    if theta.is_empty() {
        return Err(TheoryError::InvalidInput("point must be non-empty".into()));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(TheoryError::InvalidInput(format!(
            "step {h} must be positive and finite"
        )));
    }
    let n = theta.len();
    let mut x = theta.to_vec();
    let eval = |x: &[f64]| -> Result<f64, TheoryError> {
        let v = f(x);
        if !v.is_finite() {
            return Err(TheoryError::NonFinite("objective evaluation".into()));
        }
        Ok(v)
    };
    let f0 = eval(&x)?;
    let mut mat = vec![0.0; n * n];
    for i in 0..n {
        x[i] = theta[i] + h;
        let fp = eval(&x)?;
        x[i] = theta[i] - h;
        let fm = eval(&x)?;
        x[i] = theta[i];
        mat[i * n + i] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            x[i] = theta[i] + h;
            x[j] = theta[j] + h;
            let fpp = eval(&x)?;
            x[j] = theta[j] - h;
            let fpm = eval(&x)?;
            x[i] = theta[i] - h;
            x[j] = theta[j] + h;
            let fmp = eval(&x)?;
            x[j] = theta[j] - h;
            let fmm = eval(&x)?;
            x[i] = theta[i];
            x[j] = theta[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            mat[i * n + j] = v;
            mat[j * n + i] = v;
        }
    }
    ScaledHessian::new(n, mat)
}

/// Geometric contraction rate fitted to a trace of squared radii: the
/// least-squares slope of ln r_t^2 against t after `burn_in` steps, returned
/// as 1 - exp(slope). Positive when the trace decays.
pub fn fit_contraction(trace: &[f64], burn_in: usize) -> Result<f64, TheoryError> {
    if trace.len() <= burn_in + 10 {
        return Err(TheoryError::InvalidInput(format!(
            "trace of {} points is too short for burn-in {burn_in} (need > {})",
            trace.len(),
            burn_in + 10
        )));
    }
    let tail = &trace[burn_in..];
    for (k, &r2) in tail.iter().enumerate() {
        if !(r2.is_finite() && r2 > 0.0) {
            return Err(TheoryError::InvalidInput(format!(
                "squared radius at step {} is {r2}, must be positive",
                burn_in + k
            )));
        }
    }
    let len = tail.len() as f64;
    let mean_t = (len - 1.0) / 2.0;
    let mean_y = stats::kahan_sum(tail.iter().map(|&r2| r2.ln())) / len;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (k, &r2) in tail.iter().enumerate() {
        let dt = k as f64 - mean_t;
        sxy += dt * (r2.ln() - mean_y);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok(1.0 - slope.exp())
}

// ---------------------------------------------------------------------------
// Synthetic objectives
// ---------------------------------------------------------------------------

/// Block quadratic with controllable cross-block coupling and a binary
/// observation channel. The deterministic accessor is
/// g(theta) = 1/2 sum_i c_i theta_i^2 + sum_pairs w_pq theta_p theta_q,
/// minimized at the origin; the binary accessor reports a Bernoulli draw
/// whose success probability rises linearly with g above a reference level,
/// so lower observed means indicate better candidates.
#[derive(Clone, Debug)]
pub struct SyntheticObjective {
    partition: CoordinatePartition,
    curvature: Vec<f64>,
    couplings: Vec<(usize, usize, f64)>,
    eps: f64,
    gamma: f64,
}

/// Builds the synthetic objective. Blocks are coupled in disjoint pairs
/// (first with second, third with fourth, ...) through their leading
/// coordinates, with magnitude eps * sqrt(c_p * c_q) and a sign drawn from
/// `rng`. Pairing keeps the quadratic positive definite for every
/// eps in [0, 1), so the minimum stays at the origin across the whole legal
/// range, and the normalized coupling strength equals eps exactly.
pub fn make_synthetic_objective(
    partition: CoordinatePartition,
    curvatures: &[f64],
    eps: f64,
    gamma: f64,
    rng: &RngStream,
) -> Result<SyntheticObjective, TheoryError> {
    if curvatures.len() != partition.block_count() {
        return Err(TheoryError::InvalidInput(format!(
            "got {} curvatures for {} blocks",
            curvatures.len(),
            partition.block_count()
        )));
    }
    for (b, &c) in curvatures.iter().enumerate() {
        if !(c.is_finite() && c > 0.0) {
            return Err(TheoryError::InvalidInput(format!(
                "curvature of block {b} is {c}, must be positive"
            )));
        }
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(TheoryError::InvalidInput(format!(
            "coupling {eps} outside [0, 1)"
        )));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(TheoryError::InvalidInput(format!(
            "slope {gamma} must be finite and nonnegative"
        )));
    }

    let mut curvature = vec![0.0; partition.dim()];
    for (b, range) in partition.blocks().iter().enumerate() {
        for i in range.clone() {
            curvature[i] = curvatures[b];
        }
    }
    let mut couplings = Vec::new();
    if eps > 0.0 {
        let mut signs = rng.derive(LBL_SIGN);
        let mut b = 0;
        while b + 1 < partition.block_count() {
            let p = partition.blocks()[b].start;
            let q = partition.blocks()[b + 1].start;
            let sign = if signs.bernoulli(0.5) { 1.0 } else { -1.0 };
            couplings.push((p, q, sign * eps * (curvatures[b] * curvatures[b + 1]).sqrt()));
            b += 2;
        }
    }
    Ok(SyntheticObjective {
        partition,
        curvature,
        couplings,
        eps,
        gamma,
    })
}

impl SyntheticObjective {
    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    pub fn partition(&self) -> &CoordinatePartition {
        &self.partition
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Deterministic value g(theta).
    pub fn value(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.dim());
        let mut acc = 0.0;
        for (i, &c) in self.curvature.iter().enumerate() {
            acc += 0.5 * c * theta[i] * theta[i];
        }
        for &(p, q, w) in &self.couplings {
            acc += w * theta[p] * theta[q];
        }
        acc
    }

    /// Gradient of g.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(theta.len(), self.dim());
        let mut g: Vec<f64> = self
            .curvature
            .iter()
            .zip(theta)
            .map(|(&c, &x)| c * x)
            .collect();
        for &(p, q, w) in &self.couplings {
            g[p] += w * theta[q];
            g[q] += w * theta[p];
        }
        g
    }

    /// Exact dense Hessian (constant in theta).
    pub fn hessian(&self) -> ScaledHessian {
        let n = self.dim();
        let mut mat = vec![0.0; n * n];
        for (i, &c) in self.curvature.iter().enumerate() {
            mat[i * n + i] = c;
        }
        for &(p, q, w) in &self.couplings {
            mat[p * n + q] = w;
            mat[q * n + p] = w;
        }
        ScaledHessian::new(n, mat).expect("constructed symmetric")
    }

    /// Success probability of the binary channel at `theta` against a
    /// reference level: clip(1/2 + gamma * (g(theta) - reference), 0, 1).
    pub fn success_probability(&self, theta: &[f64], reference: f64) -> f64 {
        (0.5 + self.gamma * (self.value(theta) - reference)).clamp(0.0, 1.0)
    }

    /// One binary observation: 1.0 with the success probability, else 0.0.
    /// Lower means over repeated draws indicate better candidates.
    pub fn draw(&self, theta: &[f64], reference: f64, rng: &mut RngStream) -> f64 {
        if rng.bernoulli(self.success_probability(theta, reference)) {
            1.0
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Budget-matched comparison
// ---------------------------------------------------------------------------

/// Knobs for the budget-matched comparison of the two search arms.
#[derive(Clone, Debug)]
pub struct ComparisonConfig {
    /// Binary observations per candidate in the iterative arm.
    pub m_cma: usize,
    /// Binary observations per candidate in the single-round arm.
    pub m_rs: usize,
    /// Population size; dimension default when absent.
    pub lambda: Option<usize>,
    /// Initial step size of the iterative arm.
    pub sigma0: f64,
    /// Sampling band of the single-round arm, per coordinate.
    pub band: (f64, f64),
    /// Common start point; the band-typical point when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            m_cma: 16,
            m_rs: 32,
            lambda: None,
            sigma0: 0.15,
            band: (-0.5, 0.5),
            start: None,
        }
    }
}

/// The point whose squared norm equals the expected squared norm of a
/// uniform band draw (every coordinate at the band's root mean square).
/// Starting both arms here means a randomly drawn candidate is, on average,
/// no better than the start, so any single-round improvement is pure
/// selection effect.
pub fn band_typical_start(n: usize, band: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = band;
    let ms = (lo * lo + lo * hi + hi * hi) / 3.0;
    vec![ms.sqrt(); n]
}

/// Outcome of one budget-matched run. Improvements are measured with the
/// deterministic accessor: for the iterative arm from the start value to the
/// value at the final distribution mean, for the single-round arm to the
/// value of the candidate with the lowest observed mean.
#[derive(Clone, Debug)]
pub struct ComparisonOutcome {
    pub t: usize,
    pub lambda: usize,
    pub rs_candidates: usize,
    pub budget: u64,
    pub consumed_cma: u64,
    pub consumed_rs: u64,
    pub start_value: f64,
    pub cma_final_value: f64,
    pub rs_selected_value: f64,
    pub cma_improvement: f64,
    pub rs_improvement: f64,
    /// cma_improvement / rs_improvement; infinite when only the iterative
    /// arm improved, NaN when neither did.
    pub gain_ratio: f64,
    /// Deterministic value at the mean, one entry per generation plus start.
    pub value_trace: Vec<f64>,
    /// Alignment efficiency chi/kappa_d at the mean, one entry per
    /// generation; reported for drift inspection, never acted on.
    pub alignment_trace: Vec<f64>,
}

/// Runs both arms on the same objective under the same observation budget
/// m_cma * lambda * t. Both arms grade candidates relative to their cohort:
/// the iterative arm re-centers the binary channel each generation at the
/// cohort's average value, so roughly half the candidates land on each side
/// of the coin-flip level however far the search has moved; the single-round
/// arm grades against the start value, which at the band-typical start is
/// exactly the expected value of its own cohort. Candidate replications
/// share derived observation streams, so the two arms differ by policy, not
/// luck.
pub fn budget_matched_comparison(
    obj: &SyntheticObjective,
    t: usize,
    cfg: &ComparisonConfig,
    rng: &RngStream,
) -> Result<ComparisonOutcome, TheoryError> {
    if t == 0 {
        return Err(TheoryError::InvalidInput("need at least one generation".into()));
    }
    if cfg.m_cma == 0 || cfg.m_rs == 0 {
        return Err(TheoryError::InvalidInput("replication must be positive".into()));
    }
    let (lo, hi) = cfg.band;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(TheoryError::InvalidInput(format!(
            "band ({lo}, {hi}) must be finite and ordered"
        )));
    }
    let n = obj.dim();
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(n));
    let start = match &cfg.start {
        Some(s) => {
            if s.len() != n {
                return Err(TheoryError::InvalidInput(format!(
                    "start has {} coordinates, objective has {n}",
                    s.len()
                )));
            }
            s.clone()
        }
        None => band_typical_start(n, cfg.band),
    };
    let per_gen = (cfg.m_cma as u64) * (lambda as u64);
    let budget = per_gen * (t as u64);
    let start_value = obj.value(&start);

    // Iterative arm.
    let mut ledger = BudgetLedger::new(budget);
    let overrides = SepCmaOverrides {
        lambda: Some(lambda),
        mean: Some(start.clone()),
        ..Default::default()
    };
    let mut state = sepcma_new(n, cfg.sigma0, overrides)?;
    let rng_cma = rng.derive(LBL_CMA_ARM);
    let mut value_trace = Vec::with_capacity(t + 1);
    let mut alignment_trace = Vec::with_capacity(t);
    value_trace.push(start_value);
    for gen in 0..t {
        let grad = obj.gradient(state.mean());
        let mut u: Vec<f64> = grad
            .iter()
            .zip(state.scales())
            .map(|(&g, &s)| g * s)
            .collect();
        let un = stats::norm2(&u);
        if un > 0.0 {
            for x in &mut u {
                *x /= un;
            }
            let ck = chi_kappa(&u, state.scales())?;
            alignment_trace.push(ck.chi / ck.kappa_d);
        } else {
            alignment_trace.push(f64::NAN);
        }

        let mut ask_rng = rng_cma.derive_path(&[LBL_ASK, gen as u64]);
        let candidates = state.ask(&mut ask_rng);
        let reference =
            stats::kahan_sum(candidates.iter().map(|x| obj.value(x))) / lambda as f64;
        ledger.charge(per_gen)?;
        let eval_base = rng_cma.derive_path(&[LBL_EVAL, gen as u64]);
        let m = cfg.m_cma;
        let fitnesses: Vec<f64> = par::map_indexed(lambda, |i| {
            let mut hits = 0.0;
            for j in 0..m {
                let mut ep = eval_base.derive(j as u64);
                hits += obj.draw(&candidates[i], reference, &mut ep);
            }
            -(hits / m as f64)
        });
        state.tell(&candidates, &fitnesses)?;
        value_trace.push(obj.value(state.mean()));
    }
    let cma_final_value = *value_trace.last().expect("trace non-empty");
    let consumed_cma = ledger.consumed();

    // Single-round arm.
    let rs_candidates = (budget / cfg.m_rs as u64) as usize;
    if rs_candidates == 0 {
        return Err(TheoryError::InvalidInput(format!(
            "budget {budget} buys no candidates at {} observations each",
            cfg.m_rs
        )));
    }
    let mut ledger_rs = BudgetLedger::new(budget);
    ledger_rs.charge(cfg.m_rs as u64 * rs_candidates as u64)?;
    let rng_rs = rng.derive(LBL_RS_ARM);
    let eval_base = rng_rs.derive(LBL_EVAL);
    let m = cfg.m_rs;
    let scored: Vec<(f64, f64)> = par::map_indexed(rs_candidates, |c| {
        let mut crng = rng_rs.derive_path(&[LBL_CAND, c as u64]);
        let theta: Vec<f64> = (0..n).map(|_| crng.uniform_in(lo, hi)).collect();
        let mut hits = 0.0;
        for j in 0..m {
            let mut ep = eval_base.derive(j as u64);
            hits += obj.draw(&theta, start_value, &mut ep);
        }
        (hits / m as f64, obj.value(&theta))
    });
    let mut best = 0;
    for c in 1..scored.len() {
        if scored[c].0 < scored[best].0 {
            best = c;
        }
    }
    let rs_selected_value = scored[best].1;

    let cma_improvement = start_value - cma_final_value;
    let rs_improvement = start_value - rs_selected_value;
    let gain_ratio = if rs_improvement > 0.0 {
        cma_improvement / rs_improvement
    } else if cma_improvement > 0.0 {
        f64::INFINITY
    } else {
        f64::NAN
    };

    Ok(ComparisonOutcome {
        t,
        lambda,
        rs_candidates,
        budget,
        consumed_cma,
        consumed_rs: ledger_rs.consumed(),
        start_value,
        cma_final_value,
        rs_selected_value,
        cma_improvement,
        rs_improvement,
        gain_ratio,
        value_trace,
        alignment_trace,
    })
}

/// Squared distance of the search mean from the optimum of the noiseless
/// sphere, one entry per generation plus the start. Feed to
/// `fit_contraction` to measure the realized per-generation rate.
pub fn noiseless_sphere_trace(
    n: usize,
    sigma0: f64,
    generations: usize,
    lambda: Option<usize>,
    rng: &RngStream,
) -> Result<Vec<f64>, TheoryError> {
    let overrides = SepCmaOverrides {
        lambda,
        mean: Some(vec![1.0; n]),
        ..Default::default()
    };
    let mut state = sepcma_new(n, sigma0, overrides)?;
    let mut trace = Vec::with_capacity(generations + 1);
    trace.push(stats::dot(state.mean(), state.mean()));
    for gen in 0..generations {
        let mut ask_rng = rng.derive_path(&[LBL_ASK, gen as u64]);
        let candidates = state.ask(&mut ask_rng);
        let fitnesses: Vec<f64> = candidates.iter().map(|x| -stats::dot(x, x)).collect();
        state.tell(&candidates, &fitnesses)?;
        trace.push(stats::dot(state.mean(), state.mean()));
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One row of measured and predicted quantities, checked for internal
/// consistency and serializable as CSV or a readable text block.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub n: usize,
    pub lambda: usize,
    pub mu: usize,
    pub t: usize,
    pub eps_spectral: f64,
    pub eps_coherence: f64,
    pub eps_row_sum: f64,
    pub chi: f64,
    pub kappa_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub kappa_bar: f64,
    pub rho2_rs: f64,
    pub rho2_cma: f64,
    pub v_n2: f64,
    pub predicted_gain_ratio: f64,
    pub observed_gain_ratio: f64,
    pub fitted_contraction: f64,
}

impl TheoryReport {
    /// Internal consistency: the alignment factor sits in [1/kappa_d, 1],
    /// rank fidelities sit in [0, 1], and kappa_bar equals n * kappa.
    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.kappa_d >= 1.0) {
            return Err(TheoryError::InvalidInput(format!(
                "scale spread {} below 1",
                self.kappa_d
            )));
        }
        let tol = 1e-9;
        if !(self.chi >= 1.0 / self.kappa_d - tol && self.chi <= 1.0 + tol) {
            return Err(TheoryError::InvalidInput(format!(
                "alignment {} outside [1/{}, 1]",
                self.chi, self.kappa_d
            )));
        }
        for (name, r) in [("rho2_rs", self.rho2_rs), ("rho2_cma", self.rho2_cma)] {
            if !(r >= -tol && r <= 1.0 + tol) {
                return Err(TheoryError::InvalidInput(format!(
                    "{name} = {r} outside [0, 1]"
                )));
            }
        }
        let expect = self.n as f64 * self.kappa;
        if (self.kappa_bar - expect).abs() > 1e-9 * expect.abs().max(1.0) {
            return Err(TheoryError::InvalidInput(format!(
                "kappa_bar {} disagrees with n * kappa = {expect}",
                self.kappa_bar
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "n,lambda,mu,t,eps_spectral,eps_coherence,eps_row_sum,chi,kappa_d,\
         alpha,beta,kappa,kappa_bar,rho2_rs,rho2_cma,v_n2,\
         predicted_gain_ratio,observed_gain_ratio,fitted_contraction"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.lambda,
            self.mu,
            self.t,
            self.eps_spectral,
            self.eps_coherence,
            self.eps_row_sum,
            self.chi,
            self.kappa_d,
            self.alpha,
            self.beta,
            self.kappa,
            self.kappa_bar,
            self.rho2_rs,
            self.rho2_cma,
            self.v_n2,
            self.predicted_gain_ratio,
            self.observed_gain_ratio,
            self.fitted_contraction
        )
    }
}

impl fmt::Display for TheoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dimension:                {}", self.n)?;
        writeln!(f, "population / parents:     {} / {}", self.lambda, self.mu)?;
        writeln!(f, "iterations:               {}", self.t)?;
        writeln!(
            f,
            "coupling (spectral/coherence/row-sum): {:.6} / {:.6} / {:.6}",
            self.eps_spectral, self.eps_coherence, self.eps_row_sum
        )?;
        writeln!(
            f,
            "alignment chi:            {:.6}   scale spread kappa_d: {:.6}",
            self.chi, self.kappa_d
        )?;
        writeln!(
            f,
            "selection intensity:      {:.6}   recombinant energy: {:.6}",
            self.alpha, self.beta
        )?;
        writeln!(
            f,
            "efficiency kappa:         {:.6e}  normalized: {:.6}",
            self.kappa, self.kappa_bar
        )?;
        writeln!(
            f,
            "rank fidelity (single-round / recombination): {:.4} / {:.4}",
            self.rho2_rs, self.rho2_cma
        )?;
        writeln!(f, "extreme-value energy:     {:.4}", self.v_n2)?;
        writeln!(
            f,
            "gain ratio (predicted / observed): {:.4} / {:.4}",
            self.predicted_gain_ratio, self.observed_gain_ratio
        )?;
        write!(f, "fitted contraction rate:  {:.6}", self.fitted_contraction)
    }
}
