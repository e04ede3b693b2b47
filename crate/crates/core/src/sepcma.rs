//! Separable CMA-ES: full evolution-strategy machinery with a diagonal
//! covariance model, so each generation costs O(lambda * n).
//!
//! This is a maximizer. `ask` samples lambda candidates around the mean,
//! `tell` ranks them by fitness (descending, ties by index), recombines the
//! top half with log-linear weights, adapts the step size by cumulative
//! step-size adaptation, and updates the per-coordinate scales with the
//! combined rank-one plus rank-mu diagonal rule.

use thiserror::Error;

use crate::rng::RngStream;
use crate::stats;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum CmaError {
    #[error("dimension must be at least 1")]
    InvalidDimension,
    #[error("initial step size {0} must be positive and finite")]
    InvalidSigma(f64),
    #[error("expected {expected} of {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("fitness {index} is not finite")]
    NonFiniteFitness { index: usize },
    #[error("invalid override: {0}")]
    InvalidOverride(String),
}

/// Population size: ceil(4 + 3 ln n).
pub fn default_lambda(n: usize) -> usize {
    (4.0 + 3.0 * (n as f64).ln()).ceil() as usize
}

/// Recombination weights for the top `mu` ranks: w_j proportional to
/// ln(mu + 1/2) - ln j, normalized to sum 1. Positive and non-increasing.
pub fn log_weights(mu: usize) -> Vec<f64> {
    let base = (mu as f64 + 0.5).ln();
    let raw: Vec<f64> = (1..=mu).map(|j| base - (j as f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Optional departures from the standard defaults.
#[derive(Clone, Debug, Default)]
pub struct SepCmaOverrides {
    pub lambda: Option<usize>,
    pub mu: Option<usize>,
    pub c_cov: Option<f64>,
    /// Starting mean; zeros when absent.
    pub mean: Option<Vec<f64>>,
    /// Starting per-coordinate scales; ones when absent.
    pub scales: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SepCmaState {
    n: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_cov: f64,
    /// E||N(0, I_n)||.
    chi_n: f64,
    mean: Vec<f64>,
    sigma: f64,
    /// Per-coordinate standard-deviation multipliers (the diagonal of D).
    scales: Vec<f64>,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    generation: u64,
    best: Option<(Vec<f64>, f64)>,
}

/// Fresh optimizer state with standard sep-CMA constants. c_cov defaults to
/// 2/(n+5), a Theta(1/n) diagonal learning rate.
pub fn sepcma_new(
    n: usize,
    sigma0: f64,
    overrides: SepCmaOverrides,
) -> Result<SepCmaState, CmaError> {
    if n == 0 {
        return Err(CmaError::InvalidDimension);
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(CmaError::InvalidSigma(sigma0));
    }
    let lambda = overrides.lambda.unwrap_or_else(|| default_lambda(n));
    if lambda < 2 {
        return Err(CmaError::InvalidOverride(format!("lambda {lambda} < 2")));
    }
    let mu = overrides.mu.unwrap_or(lambda / 2);
    if mu == 0 || mu > lambda {
        return Err(CmaError::InvalidOverride(format!("mu {mu} outside [1, lambda]")));
    }
    let weights = log_weights(mu);
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let nf = n as f64;
    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + c_sigma + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0);
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_cov = overrides.c_cov.unwrap_or(2.0 / (nf + 5.0));
    if !(0.0..=1.0).contains(&c_cov) {
        return Err(CmaError::InvalidOverride(format!("c_cov {c_cov} outside [0, 1]")));
    }
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
    let mean = match overrides.mean {
        Some(m) if m.len() != n => {
            return Err(CmaError::CountMismatch {
                what: "mean coordinates",
                expected: n,
                got: m.len(),
            })
        }
        Some(m) => m,
        None => vec![0.0; n],
    };
    let scales = match overrides.scales {
        Some(s) if s.len() != n => {
            return Err(CmaError::CountMismatch {
                what: "scale coordinates",
                expected: n,
                got: s.len(),
            })
        }
        Some(s) => {
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(CmaError::InvalidOverride(
                    "scales must be positive and finite".into(),
                ));
            }
            s
        }
        None => vec![1.0; n],
    };
    Ok(SepCmaState {
        n,
        lambda,
        mu,
        weights,
        mu_eff,
        c_sigma,
        d_sigma,
        c_c,
        c_cov,
        chi_n,
        mean,
        sigma: sigma0,
        scales,
        p_sigma: vec![0.0; n],
        p_c: vec![0.0; n],
        generation: 0,
        best: None,
    })
}

impl SepCmaState {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mu_eff(&self) -> f64 {
        self.mu_eff
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Best-ever (candidate, fitness) seen by `tell`.
    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    /// Sample lambda candidates x_i = m + sigma * D z_i, z_i ~ N(0, I).
    /// Does not mutate the state; pass a derived stream for reproducibility.
    pub fn ask(&self, rng: &mut RngStream) -> Vec<Vec<f64>> {
        (0..self.lambda)
            .map(|_| {
                (0..self.n)
                    .map(|i| self.mean[i] + self.sigma * self.scales[i] * rng.gaussian())
                    .collect()
            })
            .collect()
    }

    /// Rank by fitness (descending, ties by candidate index) and update mean,
    /// step size, and diagonal scales.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<(), CmaError> {
        if candidates.len() != self.lambda {
            return Err(CmaError::CountMismatch {
                what: "candidates",
                expected: self.lambda,
                got: candidates.len(),
            });
        }
        if fitnesses.len() != self.lambda {
            return Err(CmaError::CountMismatch {
                what: "fitnesses",
                expected: self.lambda,
                got: fitnesses.len(),
            });
        }
        if let Some(index) = fitnesses.iter().position(|f| !f.is_finite()) {
            return Err(CmaError::NonFiniteFitness { index });
        }
        for (i, c) in candidates.iter().enumerate() {
            if c.len() != self.n {
                return Err(CmaError::CountMismatch {
                    what: "candidate coordinates",
                    expected: self.n,
                    got: candidates[i].len(),
                });
            }
        }

        let order = stats::rank_desc_by_fitness(fitnesses);
        let selected = &order[..self.mu];

        // z_j = D^-1 (x_j - m)/sigma for the selected candidates.
        let z: Vec<Vec<f64>> = selected
            .iter()
            .map(|&idx| {
                (0..self.n)
                    .map(|i| (candidates[idx][i] - self.mean[i]) / (self.sigma * self.scales[i]))
                    .collect()
            })
            .collect();
        let mut z_w = vec![0.0; self.n];
        let mut y_w = vec![0.0; self.n];
        for (j, zj) in z.iter().enumerate() {
            let w = self.weights[j];
            for i in 0..self.n {
                z_w[i] += w * zj[i];
                y_w[i] += w * self.scales[i] * zj[i];
            }
        }

        // Step-size path and CSA update.
        let cs = self.c_sigma;
        let path_scale = (cs * (2.0 - cs) * self.mu_eff).sqrt();
        for i in 0..self.n {
            self.p_sigma[i] = (1.0 - cs) * self.p_sigma[i] + path_scale * z_w[i];
        }
        let p_norm = stats::norm2(&self.p_sigma);
        self.sigma *= ((cs / self.d_sigma) * (p_norm / self.chi_n - 1.0)).exp();

        // Covariance path, gated when the step-size path is blowing up.
        let t = self.generation + 1;
        let denom = (1.0 - (1.0 - cs).powi(2 * t as i32)).sqrt();
        let h_sigma = if p_norm / denom < (1.4 + 2.0 / (self.n as f64 + 1.0)) * self.chi_n {
            1.0
        } else {
            0.0
        };
        let cc = self.c_c;
        let pc_scale = h_sigma * (cc * (2.0 - cc) * self.mu_eff).sqrt();
        for i in 0..self.n {
            self.p_c[i] = (1.0 - cc) * self.p_c[i] + pc_scale * y_w[i];
        }

        // Diagonal covariance: rank-one weighted 1/mu_eff, rank-mu the rest.
        let c1 = self.c_cov / self.mu_eff;
        let cmu = self.c_cov * (1.0 - 1.0 / self.mu_eff);
        let stall = (1.0 - h_sigma) * cc * (2.0 - cc);
        for i in 0..self.n {
            let var_old = self.scales[i] * self.scales[i];
            let mut rank_mu = 0.0;
            for (j, zj) in z.iter().enumerate() {
                let y = self.scales[i] * zj[i];
                rank_mu += self.weights[j] * y * y;
            }
            let var_new = (1.0 - self.c_cov) * var_old
                + c1 * (self.p_c[i] * self.p_c[i] + stall * var_old)
                + cmu * rank_mu;
            self.scales[i] = var_new.sqrt();
        }

        // Recombine the mean and track the best-ever candidate.
        let mut new_mean = vec![0.0; self.n];
        for (j, &idx) in selected.iter().enumerate() {
            let w = self.weights[j];
            for i in 0..self.n {
                new_mean[i] += w * candidates[idx][i];
            }
        }
        self.mean = new_mean;
        let gen_best = order[0];
        if self.best.as_ref().map_or(true, |(_, f)| fitnesses[gen_best] > *f) {
            self.best = Some((candidates[gen_best].clone(), fitnesses[gen_best]));
        }
        self.generation = t;
        Ok(())
    }
}
