//! Coordinator heads: maps from a representation vector to agent+role logits.
//!
//! Four parametrizations share one interface: dense linear, low-rank with an
//! ELU bottleneck, sparse input selection with a learnable active-dimension
//! count, and block-diagonal with per-block weight matrices. All heads
//! flatten to a single parameter vector so black-box trainers can treat them
//! uniformly.
//!
//! Parameter vector layout (stable; checkpoints depend on it):
//! - Linear: `W` row-major, one row per logit (`n_a` rows of `d_h`).
//! - LowRank: `U` row-major (`r` rows of `d_h`), then `V` row-major (`n_a` rows of `r`).
//! - Sparse: `W` row-major (`n_a` rows of `d_h`), then scores `s` (`d_h`),
//!   then sparsity logit, then temperature logit.
//! - BlockDiagonal: each block's matrix row-major, blocks in order.
//! - When `repr_scale_enabled`, `d_h` scale entries are appended at the end.

use crate::rng::RngStream;
use crate::stats;
use std::ops::Range;
use thiserror::Error;

pub const ROLE_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    LowRank,
    Sparse,
    BlockDiagonal(usize),
}

impl HeadKind {
    pub fn name(&self) -> String {
        match self {
            HeadKind::Linear => "linear".into(),
            HeadKind::LowRank => "low-rank".into(),
            HeadKind::Sparse => "sparse".into(),
            HeadKind::BlockDiagonal(b) => format!("block-diagonal-{b}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    Softmax,
    Argmax,
}

/// How exact logit ties are resolved in argmax conversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieBreak {
    UniformRandom,
    LowestIndex,
}

#[derive(Clone, Debug)]
pub struct HeadConfig {
    /// Representation width.
    pub d_h: usize,
    /// Number of selectable agents; the head emits `L + 3` logits.
    pub agents: usize,
    /// Low-rank bottleneck width.
    pub r: usize,
    pub elu_alpha: f64,
    /// Fixed, non-trainable output scale of the low-rank head.
    pub fixed_scale: f64,
    /// Initial Gumbel temperature; learnable thereafter, kept in [1, 20].
    pub gumbel_temperature: f64,
    pub output_mode: OutputMode,
    pub tie_break: TieBreak,
    /// Learnable per-dimension multipliers on h (init 1.0).
    pub repr_scale_enabled: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            d_h: 1024,
            agents: 7,
            r: 14,
            elu_alpha: 0.1,
            fixed_scale: 1.0,
            gumbel_temperature: 10.5,
            output_mode: OutputMode::Softmax,
            tie_break: TieBreak::UniformRandom,
            repr_scale_enabled: false,
        }
    }
}

impl HeadConfig {
    /// Total logit count: agent block then role block.
    pub fn n_out(&self) -> usize {
        self.agents + ROLE_COUNT
    }

    pub fn validate(&self, kind: HeadKind) -> Result<(), HeadError> {
        let n_a = self.n_out();
        if self.agents == 0 {
            return Err(HeadError::InvalidConfig("agent count must be positive".into()));
        }
        if self.d_h < n_a {
            return Err(HeadError::InvalidConfig(format!(
                "d_h = {} must be at least n_a = {n_a}",
                self.d_h
            )));
        }
        if self.r == 0 {
            return Err(HeadError::InvalidConfig("rank must be at least 1".into()));
        }
        if !(1.0..=20.0).contains(&self.gumbel_temperature) {
            return Err(HeadError::InvalidConfig(format!(
                "gumbel temperature {} outside [1, 20]",
                self.gumbel_temperature
            )));
        }
        if let HeadKind::BlockDiagonal(b) = kind {
            if b == 0 || b > n_a.min(self.d_h) {
                return Err(HeadError::InvalidConfig(format!(
                    "block count {b} outside [1, min(d_h, n_a) = {}]",
                    n_a.min(self.d_h)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parameter vector length {got} does not match expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("cannot convert logits: all entries are negative infinity")]
    AllMasked,
    #[error("head kind {0} does not support this operation")]
    Unsupported(String),
}

/// Disjoint, exhaustive split of hidden dims and logit dims into blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub hidden: Vec<Range<usize>>,
    pub logits: Vec<Range<usize>>,
}

impl Partition {
    pub fn block_count(&self) -> usize {
        self.hidden.len()
    }
}

/// Block sizes: one block per logit when B = n_a (remainder dims to earlier
/// blocks); otherwise logits split into runs of ceil(n_a/B) and hidden dims
/// proportionally, with the last block absorbing the rounding remainder.
pub fn block_partition(d_h: usize, n_a: usize, b: usize) -> Result<Partition, HeadError> {
    if b == 0 || b > n_a {
        return Err(HeadError::InvalidConfig(format!(
            "block count {b} outside [1, n_a = {n_a}]"
        )));
    }
    let mut hidden = Vec::with_capacity(b);
    let mut logits = Vec::with_capacity(b);
    if b == n_a {
        let base = d_h / n_a;
        let rem = d_h % n_a;
        let mut start = 0;
        for j in 0..b {
            let size = if j < rem { base + 1 } else { base };
            hidden.push(start..start + size);
            logits.push(j..j + 1);
            start += size;
        }
    } else {
        let per = n_a.div_ceil(b);
        let mut a_start = 0;
        let mut h_start = 0;
        let mut a_sizes = Vec::with_capacity(b);
        for _ in 0..b {
            let a = per.min(n_a - a_start);
            a_sizes.push(a);
            logits.push(a_start..a_start + a);
            a_start += a;
        }
        for (i, &a) in a_sizes.iter().enumerate() {
            let h = if i + 1 < b {
                a * d_h / n_a
            } else {
                d_h - h_start
            };
            hidden.push(h_start..h_start + h);
            h_start += h;
        }
    }
    Ok(Partition { hidden, logits })
}

/// Trainable parameter count for a head kind, excluding repr_scale.
pub fn param_count(kind: HeadKind, cfg: &HeadConfig) -> Result<usize, HeadError> {
    cfg.validate(kind)?;
    let n_a = cfg.n_out();
    Ok(match kind {
        HeadKind::Linear => cfg.d_h * n_a,
        HeadKind::LowRank => cfg.r * cfg.d_h + n_a * cfg.r,
        HeadKind::Sparse => cfg.d_h * n_a + cfg.d_h + 2,
        HeadKind::BlockDiagonal(b) => {
            let p = block_partition(cfg.d_h, n_a, b)?;
            (0..b).map(|i| p.logits[i].len() * p.hidden[i].len()).sum()
        }
    })
}

pub fn sparse_active_k(rho: f64, d_h: usize) -> usize {
    let frac = 1.0 - sigmoid(rho);
    ((d_h as f64 * frac).floor() as usize).max(1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn elu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * (x.exp() - 1.0)
    }
}

fn elu_grad(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha * x.exp()
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub cfg: HeadConfig,
    params: Vec<f64>,
    partition: Option<Partition>,
}

impl Head {
    /// Xavier-uniform initialization: weights ~ U(+-sqrt(6/(fan_in+fan_out)))
    /// per matrix (the low-rank output matrix uses gain 18 in the numerator);
    /// sparse scores and sparsity logit start at 0; repr_scale starts at 1.
    pub fn init(kind: HeadKind, cfg: &HeadConfig, rng: &mut RngStream) -> Result<Head, HeadError> {
        cfg.validate(kind)?;
        let n_a = cfg.n_out();
        let base = param_count(kind, cfg)?;
        let total = base + if cfg.repr_scale_enabled { cfg.d_h } else { 0 };
        let mut params = vec![0.0; total];
        let partition = match kind {
            HeadKind::BlockDiagonal(b) => Some(block_partition(cfg.d_h, n_a, b)?),
            _ => None,
        };
        match kind {
            HeadKind::Linear => {
                let bound = (6.0 / (cfg.d_h + n_a) as f64).sqrt();
                for w in params[..base].iter_mut() {
                    *w = rng.uniform_in(-bound, bound);
                }
            }
            HeadKind::LowRank => {
                let ub = (6.0 / (cfg.d_h + cfg.r) as f64).sqrt();
                let vb = (18.0 / (cfg.r + n_a) as f64).sqrt();
                let u_len = cfg.r * cfg.d_h;
                for w in params[..u_len].iter_mut() {
                    *w = rng.uniform_in(-ub, ub);
                }
                for w in params[u_len..base].iter_mut() {
                    *w = rng.uniform_in(-vb, vb);
                }
            }
            HeadKind::Sparse => {
                let bound = (6.0 / (cfg.d_h + n_a) as f64).sqrt();
                let w_len = cfg.d_h * n_a;
                for w in params[..w_len].iter_mut() {
                    *w = rng.uniform_in(-bound, bound);
                }
                // scores and sparsity logit stay 0; temperature logit from config
                params[base - 1] = logit((cfg.gumbel_temperature - 1.0) / 19.0);
            }
            HeadKind::BlockDiagonal(_) => {
                let p = partition.as_ref().unwrap();
                let mut off = 0;
                for i in 0..p.block_count() {
                    let (a, h) = (p.logits[i].len(), p.hidden[i].len());
                    if a * h == 0 {
                        continue;
                    }
                    let bound = (6.0 / (a + h) as f64).sqrt();
                    for w in params[off..off + a * h].iter_mut() {
                        *w = rng.uniform_in(-bound, bound);
                    }
                    off += a * h;
                }
            }
        }
        if cfg.repr_scale_enabled {
            for s in params[base..].iter_mut() {
                *s = 1.0;
            }
        }
        Ok(Head {
            kind,
            cfg: cfg.clone(),
            params,
            partition,
        })
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    fn base_len(&self) -> usize {
        self.params.len() - if self.cfg.repr_scale_enabled { self.cfg.d_h } else { 0 }
    }

    pub fn repr_scale(&self) -> Option<&[f64]> {
        if self.cfg.repr_scale_enabled {
            Some(&self.params[self.base_len()..])
        } else {
            None
        }
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.params.clone()
    }

    /// Rebuild a head with the same kind/config but the given parameters.
    pub fn from_vector(template: &Head, v: Vec<f64>) -> Result<Head, HeadError> {
        if v.len() != template.params.len() {
            return Err(HeadError::ParamLength {
                expected: template.params.len(),
                got: v.len(),
            });
        }
        Ok(Head {
            kind: template.kind,
            cfg: template.cfg.clone(),
            params: v,
            partition: template.partition.clone(),
        })
    }

    fn scaled_input(&self, h: &[f64]) -> Vec<f64> {
        match self.repr_scale() {
            Some(scale) => h.iter().zip(scale).map(|(x, s)| x * s).collect(),
            None => h.to_vec(),
        }
    }

    /// Deterministic forward pass (sparse heads use the hard top-k mask).
    pub fn forward_eval(&self, h: &[f64]) -> Result<Vec<f64>, HeadError> {
        self.forward_inner(h, None)
    }

    /// Training-mode forward pass; sparse heads draw a Gumbel-noised soft
    /// top-k mask and need randomness, other kinds are unaffected.
    pub fn forward_train(&self, h: &[f64], rng: &mut RngStream) -> Result<Vec<f64>, HeadError> {
        self.forward_inner(h, Some(rng))
    }

    fn forward_inner(&self, h: &[f64], rng: Option<&mut RngStream>) -> Result<Vec<f64>, HeadError> {
        if h.len() != self.cfg.d_h {
            return Err(HeadError::DimMismatch {
                expected: self.cfg.d_h,
                got: h.len(),
            });
        }
        let n_a = self.cfg.n_out();
        let d = self.cfg.d_h;
        let hs = self.scaled_input(h);
        match self.kind {
            HeadKind::Linear => {
                let w = &self.params[..d * n_a];
                Ok((0..n_a).map(|i| stats::dot(&w[i * d..(i + 1) * d], &hs)).collect())
            }
            HeadKind::LowRank => {
                let r = self.cfg.r;
                let u = &self.params[..r * d];
                let v = &self.params[r * d..r * d + n_a * r];
                let mid: Vec<f64> = (0..r)
                    .map(|i| elu(stats::dot(&u[i * d..(i + 1) * d], &hs), self.cfg.elu_alpha))
                    .collect();
                Ok((0..n_a)
                    .map(|i| stats::dot(&v[i * r..(i + 1) * r], &mid) * self.cfg.fixed_scale)
                    .collect())
            }
            HeadKind::Sparse => {
                let mask = match rng {
                    Some(rng) => self.sparse_train_mask(rng),
                    None => self.sparse_eval_mask(),
                };
                let masked: Vec<f64> = hs.iter().zip(&mask).map(|(x, m)| x * m).collect();
                let w = &self.params[..d * n_a];
                Ok((0..n_a)
                    .map(|i| stats::dot(&w[i * d..(i + 1) * d], &masked))
                    .collect())
            }
            HeadKind::BlockDiagonal(_) => {
                let p = self.partition.as_ref().unwrap();
                let mut out = vec![0.0; n_a];
                let mut off = 0;
                for b in 0..p.block_count() {
                    let hr = p.hidden[b].clone();
                    let hw = hr.len();
                    for li in p.logits[b].clone() {
                        out[li] = stats::dot(&self.params[off..off + hw], &hs[hr.clone()]);
                        off += hw;
                    }
                }
                Ok(out)
            }
        }
    }

    fn sparse_fields(&self) -> (&[f64], f64, f64) {
        let d = self.cfg.d_h;
        let n_a = self.cfg.n_out();
        let w_len = d * n_a;
        let scores = &self.params[w_len..w_len + d];
        let rho = self.params[w_len + d];
        let temp_logit = self.params[w_len + d + 1];
        (scores, rho, temp_logit)
    }

    /// Hard top-k binary mask over raw scores; ties go to the lower index.
    fn sparse_eval_mask(&self) -> Vec<f64> {
        let (scores, rho, _) = self.sparse_fields();
        let k = sparse_active_k(rho, self.cfg.d_h);
        let order = stats::rank_desc_by_fitness(scores);
        let mut mask = vec![0.0; self.cfg.d_h];
        for &i in order.iter().take(k) {
            mask[i] = 1.0;
        }
        mask
    }

    /// Gumbel-noised soft top-k mask, renormalized so the entries sum to k.
    fn sparse_train_mask(&self, rng: &mut RngStream) -> Vec<f64> {
        let (scores, rho, temp_logit) = self.sparse_fields();
        let d = self.cfg.d_h;
        let k = sparse_active_k(rho, d);
        let tau = 1.0 + 19.0 * sigmoid(temp_logit);
        let noised: Vec<f64> = scores.iter().map(|&s| (s + rng.gumbel()) / tau).collect();
        let order = stats::rank_desc_by_fitness(&noised);
        // Soft threshold midway between the k-th and (k+1)-th largest value.
        let theta = if k < d {
            (noised[order[k - 1]] + noised[order[k]]) / 2.0
        } else {
            noised[order[d - 1]] - 1.0
        };
        let soft: Vec<f64> = noised.iter().map(|&v| sigmoid(v - theta)).collect();
        let total: f64 = soft.iter().sum();
        let scale = k as f64 / total;
        soft.into_iter().map(|v| v * scale).collect()
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.partition.as_ref()
    }
}

/// Split the logit vector into its agent block and role block.
pub fn split_logits(logits: &[f64], agents: usize) -> Result<(&[f64], &[f64]), HeadError> {
    if logits.len() != agents + ROLE_COUNT {
        return Err(HeadError::DimMismatch {
            expected: agents + ROLE_COUNT,
            got: logits.len(),
        });
    }
    Ok((&logits[..agents], &logits[agents..]))
}

/// Exp-normalized probabilities with the max subtracted for stability.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>, HeadError> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(HeadError::AllMasked);
    }
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Turn logits into a concrete choice: sample the softmax distribution or
/// take the argmax with the configured tie handling.
pub fn convert(
    logits: &[f64],
    mode: OutputMode,
    tie: TieBreak,
    rng: &mut RngStream,
) -> Result<usize, HeadError> {
    if logits.is_empty() {
        return Err(HeadError::DimMismatch { expected: 1, got: 0 });
    }
    match mode {
        OutputMode::Softmax => {
            let probs = softmax_probs(logits)?;
            let u = rng.uniform();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        }
        OutputMode::Argmax => {
            if logits.iter().all(|z| *z == f64::NEG_INFINITY) {
                return Err(HeadError::AllMasked);
            }
            match tie {
                TieBreak::UniformRandom => {
                    stats::argmax_uniform_ties(logits, rng).map_err(|_| HeadError::AllMasked)
                }
                TieBreak::LowestIndex => Ok(stats::rank_desc_by_fitness(logits)[0]),
            }
        }
    }
}


/// Gradient plumbing shared by the gradient-based trainers: backpropagate a
/// gradient on the logits to a gradient on the flat parameter vector.
/// Supported for the differentiable kinds (Linear, LowRank, BlockDiagonal);
/// the sparse head's discrete mask path is rejected.
pub fn backprop_logits(head: &Head, h: &[f64], g_logits: &[f64]) -> Result<Vec<f64>, HeadError> {
    if h.len() != head.cfg.d_h {
        return Err(HeadError::DimMismatch {
            expected: head.cfg.d_h,
            got: h.len(),
        });
    }
    let n_a = head.cfg.n_out();
    if g_logits.len() != n_a {
        return Err(HeadError::DimMismatch {
            expected: n_a,
            got: g_logits.len(),
        });
    }
    let d = head.cfg.d_h;
    let hs = head.scaled_input(h);
    let mut grad = vec![0.0; head.param_len()];
    // d logits / d h_scaled, needed for the repr_scale chain.
    let mut g_hs = vec![0.0; d];
    match head.kind {
        HeadKind::Linear => {
            let w = &head.params[..d * n_a];
            for i in 0..n_a {
                let gi = g_logits[i];
                if gi == 0.0 {
                    continue;
                }
                for j in 0..d {
                    grad[i * d + j] += gi * hs[j];
                    g_hs[j] += gi * w[i * d + j];
                }
            }
        }
        HeadKind::LowRank => {
            let r = head.cfg.r;
            let u = &head.params[..r * d];
            let v = &head.params[r * d..r * d + n_a * r];
            let sigma = head.cfg.fixed_scale;
            let pre: Vec<f64> = (0..r).map(|i| stats::dot(&u[i * d..(i + 1) * d], &hs)).collect();
            let mid: Vec<f64> = pre.iter().map(|&x| elu(x, head.cfg.elu_alpha)).collect();
            // z_i = sigma * sum_k V[i][k] * mid[k]
            let mut g_mid = vec![0.0; r];
            for i in 0..n_a {
                let gi = g_logits[i] * sigma;
                if gi == 0.0 {
                    continue;
                }
                for k in 0..r {
                    grad[r * d + i * r + k] += gi * mid[k];
                    g_mid[k] += gi * v[i * r + k];
                }
            }
            for k in 0..r {
                let gp = g_mid[k] * elu_grad(pre[k], head.cfg.elu_alpha);
                if gp == 0.0 {
                    continue;
                }
                for j in 0..d {
                    grad[k * d + j] += gp * hs[j];
                    g_hs[j] += gp * u[k * d + j];
                }
            }
        }
        HeadKind::BlockDiagonal(_) => {
            let p = head.partition.as_ref().unwrap();
            let mut off = 0;
            for b in 0..p.block_count() {
                let hr = p.hidden[b].clone();
                for li in p.logits[b].clone() {
                    let gi = g_logits[li];
                    for (jj, j) in hr.clone().enumerate() {
                        grad[off + jj] += gi * hs[j];
                        g_hs[j] += gi * head.params[off + jj];
                    }
                    off += hr.len();
                }
            }
        }
        HeadKind::Sparse => {
            return Err(HeadError::Unsupported(
                "sparse head gradients (stochastic discrete mask)".into(),
            ));
        }
    }
    if let Some(scale) = head.repr_scale() {
        let base = head.base_len();
        let _ = scale;
        for j in 0..d {
            grad[base + j] = g_hs[j] * h[j];
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod grad_tests {
    use super::*;

    /// Central finite differences of f(params) = <g, logits(params)>.
    fn fd_grad(head: &Head, h: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let v = head.to_vector();
        (0..v.len())
            .map(|i| {
                let mut plus = v.clone();
                plus[i] += eps;
                let mut minus = v.clone();
                minus[i] -= eps;
                let hp = Head::from_vector(head, plus).unwrap();
                let hm = Head::from_vector(head, minus).unwrap();
                let zp = hp.forward_eval(h).unwrap();
                let zm = hm.forward_eval(h).unwrap();
                (stats::dot(g, &zp) - stats::dot(g, &zm)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for kind in [HeadKind::Linear, HeadKind::LowRank, HeadKind::BlockDiagonal(4)] {
            let c = HeadConfig {
                d_h: 12,
                agents: 3,
                r: 4,
                repr_scale_enabled: true,
                ..HeadConfig::default()
            };
            let mut rng = RngStream::root(20);
            let head = Head::init(kind, &c, &mut rng).unwrap();
            let mut s_rng = RngStream::root(21);
            // Move repr_scale off exactly 1.0 so its gradient is exercised.
            let mut v = head.to_vector();
            let len = v.len();
            for x in v[len - 12..].iter_mut() {
                *x = 1.0 + 0.3 * s_rng.gaussian();
            }
            let head = Head::from_vector(&head, v).unwrap();
            let h: Vec<f64> = (0..12).map(|_| s_rng.gaussian()).collect();
            let g: Vec<f64> = (0..6).map(|_| s_rng.gaussian()).collect();
            let analytic = backprop_logits(&head, &h, &g).unwrap();
            let numeric = fd_grad(&head, &h, &g, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(
                    (a - n).abs() <= 1e-6 + 1e-4 * n.abs().max(a.abs()),
                    "{kind:?}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn sparse_backprop_is_rejected() {
        let c = HeadConfig {
            d_h: 16,
            agents: 2,
            ..HeadConfig::default()
        };
        let mut rng = RngStream::root(22);
        let head = Head::init(HeadKind::Sparse, &c, &mut rng).unwrap();
        let err = backprop_logits(&head, &vec![0.0; 16], &vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, HeadError::Unsupported(_)));
    }
}
