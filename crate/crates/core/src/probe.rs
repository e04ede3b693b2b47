//! Linear analyses of representation spaces: synthetic labeled datasets with
//! a class-separation dial, a scatter-ratio separability index, a
//! one-vs-rest hinge-loss linear probe, and 2-D principal-component
//! coordinates for external plotting.

use std::io;

use thiserror::Error;

use crate::par;
use crate::rng::RngStream;
use crate::stats;

const LBL_GEOM: u64 = 0x47454f4d;
const LBL_NOISE: u64 = 0x4e534531;
const PCA_SEED: u64 = 0x50434132;
/// Sub-lobe offsets relative to the class-center scale: classes stay four
/// times more separated than their internal modes.
const LOBE_SPREAD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ProbeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("class {class} has {count} points; train/test split needs at least 2")]
    DegenerateSplit { class: usize, count: usize },
    #[error("data has no variance")]
    ZeroVariance,
    #[error("csv write failed: {0}")]
    Csv(String),
}

/// What the labels of a dataset mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSemantics {
    /// y is the task-type cluster a point belongs to.
    TaskType,
    /// y is the agent a coordinator selected while seeing the point.
    AgentSelection,
}

/// Labeled representation vectors. Rows of `x` all share one width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub semantics: LabelSemantics,
}

/// Gaussian class clusters with centers drawn once from a unit ball and
/// multiplied by `sep_scale`, so sweeping the scale moves the same geometry
/// apart while the unit within-class noise stays fixed. With `n_clusters`
/// above 1, each class is a mixture of that many sub-lobes (offsets also
/// scale with `sep_scale`, at a quarter of the class-center spread),
/// modeling selection classes that bundle several task modes. Labels are
/// balanced: exactly `per_class` points per class, class-major order.
pub fn synth_repr_dataset(
    d: usize,
    n_classes: usize,
    n_clusters: usize,
    sep_scale: f64,
    per_class: usize,
    rng: &RngStream,
) -> Result<ProbeDataset, ProbeError> {
    if d == 0 {
        return Err(ProbeError::InvalidInput("dimension must be positive".into()));
    }
    if n_classes < 2 {
        return Err(ProbeError::SingleClass(n_classes));
    }
    if n_clusters == 0 {
        return Err(ProbeError::InvalidInput("need at least one cluster per class".into()));
    }
    if per_class < 1 {
        return Err(ProbeError::InvalidInput("per_class must be at least 1".into()));
    }
    if !(sep_scale.is_finite() && sep_scale >= 0.0) {
        return Err(ProbeError::InvalidInput(format!(
            "sep_scale {sep_scale} must be finite and nonnegative"
        )));
    }

    // Unit-scale geometry first, from its own stream: the same root rng at a
    // different sep_scale yields the same configuration, only rescaled.
    let mut geom = rng.derive(LBL_GEOM);
    let mut centers = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let c: Vec<f64> = (0..d).map(|_| sep_scale * geom.gaussian()).collect();
        centers.push(c);
    }
    let mut lobes: Vec<Vec<Vec<f64>>> = Vec::new();
    if n_clusters > 1 {
        for _ in 0..n_classes {
            let class_lobes: Vec<Vec<f64>> = (0..n_clusters)
                .map(|_| {
                    (0..d)
                        .map(|_| sep_scale * LOBE_SPREAD * geom.gaussian())
                        .collect()
                })
                .collect();
            lobes.push(class_lobes);
        }
    }

    let mut noise = rng.derive(LBL_NOISE);
    let mut x = Vec::with_capacity(n_classes * per_class);
    let mut y = Vec::with_capacity(n_classes * per_class);
    for k in 0..n_classes {
        for i in 0..per_class {
            let mut row = centers[k].clone();
            if n_clusters > 1 {
                let lobe = &lobes[k][i % n_clusters];
                for (r, &o) in row.iter_mut().zip(lobe) {
                    *r += o;
                }
            }
            for r in row.iter_mut() {
                *r += noise.gaussian();
            }
            x.push(row);
            y.push(k);
        }
    }
    Ok(ProbeDataset {
        x,
        y,
        semantics: LabelSemantics::TaskType,
    })
}

fn check_rows(x: &[Vec<f64>], y: &[usize]) -> Result<usize, ProbeError> {
    if x.is_empty() {
        return Err(ProbeError::InvalidInput("no data".into()));
    }
    if x.len() != y.len() {
        return Err(ProbeError::InvalidInput(format!(
            "{} rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if d == 0 {
        return Err(ProbeError::InvalidInput("zero-width rows".into()));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(ProbeError::InvalidInput(format!(
                "row {i} has width {}, expected {d}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::InvalidInput(format!("row {i} has a non-finite entry")));
        }
    }
    Ok(d)
}

/// Classes present in `y`, as (class id, count), ascending by id.
fn class_counts(y: &[usize]) -> Vec<(usize, usize)> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &label in y {
        match counts.binary_search_by_key(&label, |&(c, _)| c) {
            Ok(pos) => counts[pos].1 += 1,
            Err(pos) => counts.insert(pos, (label, 1)),
        }
    }
    counts
}

/// Fraction of total scatter that lies between class means: trace of the
/// between-class scatter over trace of the total scatter, in [0, 1]. High
/// values mean class identity explains the spread of the data.
pub fn separability_index(x: &[Vec<f64>], y: &[usize]) -> Result<f64, ProbeError> {
    let d = check_rows(x, y)?;
    let counts = class_counts(y);
    if counts.len() < 2 {
        return Err(ProbeError::SingleClass(counts.len()));
    }
    let n = x.len() as f64;
    let mut global = vec![0.0; d];
    for row in x {
        for (g, &v) in global.iter_mut().zip(row) {
            *g += v;
        }
    }
    for g in global.iter_mut() {
        *g /= n;
    }
    let mut class_means: Vec<Vec<f64>> = vec![vec![0.0; d]; counts.len()];
    for (row, &label) in x.iter().zip(y) {
        let slot = counts.binary_search_by_key(&label, |&(c, _)| c).expect("counted");
        for (m, &v) in class_means[slot].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (mean, &(_, count)) in class_means.iter_mut().zip(&counts) {
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
    }
    let total = stats::kahan_sum(x.iter().flat_map(|row| {
        row.iter()
            .zip(&global)
            .map(|(&v, &g)| (v - g) * (v - g))
    }));
    if total == 0.0 {
        return Err(ProbeError::ZeroVariance);
    }
    let between = stats::kahan_sum(class_means.iter().zip(&counts).flat_map(|(mean, &(_, count))| {
        mean.iter()
            .zip(&global)
            .map(move |(&m, &g)| count as f64 * (m - g) * (m - g))
    }));
    Ok(between / total)
}

/// Hinge-loss training knobs for the linear probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 25,
            learning_rate: 0.05,
            l2: 1e-4,
        }
    }
}

fn fisher_yates(indices: &mut [usize], rng: &mut RngStream) {
    for i in (1..indices.len()).rev() {
        indices.swap(i, rng.below(i + 1));
    }
}

/// Held-out accuracy of a one-vs-rest linear classifier trained by
/// hinge-loss stochastic subgradient descent on a stratified 80/20 split.
/// Prediction takes the class with the highest score, ties to the lowest
/// class id.
pub fn linear_probe(
    x: &[Vec<f64>],
    y: &[usize],
    cfg: &ProbeConfig,
    rng: &RngStream,
) -> Result<f64, ProbeError> {
    let d = check_rows(x, y)?;
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(ProbeError::InvalidInput(
            "epochs must be positive, learning_rate positive, l2 nonnegative".into(),
        ));
    }
    let counts = class_counts(y);
    if counts.len() < 2 {
        return Err(ProbeError::SingleClass(counts.len()));
    }
    for &(class, count) in &counts {
        if count < 2 {
            return Err(ProbeError::DegenerateSplit { class, count });
        }
    }

    // Stratified split: per class, shuffle and put 80% (at least one point
    // on each side) into training.
    let mut split_rng = rng.derive(1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &(class, _) in &counts {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        fisher_yates(&mut members, &mut split_rng);
        let n_k = members.len();
        let n_train = (((n_k as f64) * 0.8).round() as usize).clamp(1, n_k - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }

    // One binary hinge classifier per present class.
    let classes: Vec<usize> = counts.iter().map(|&(c, _)| c).collect();
    let mut w = vec![vec![0.0; d]; classes.len()];
    let mut b = vec![0.0; classes.len()];
    let mut sgd_rng = rng.derive(2);
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        fisher_yates(&mut order, &mut sgd_rng);
        for &i in &order {
            let row = &x[i];
            for (slot, &class) in classes.iter().enumerate() {
                let target = if y[i] == class { 1.0 } else { -1.0 };
                let score = stats::dot(&w[slot], row) + b[slot];
                let decay = 1.0 - cfg.learning_rate * cfg.l2;
                if target * score < 1.0 {
                    for (wj, &xj) in w[slot].iter_mut().zip(row) {
                        *wj = *wj * decay + cfg.learning_rate * target * xj;
                    }
                    b[slot] += cfg.learning_rate * target;
                } else {
                    for wj in w[slot].iter_mut() {
                        *wj *= decay;
                    }
                }
            }
        }
    }

    let mut correct = 0usize;
    for &i in &test {
        let row = &x[i];
        let mut best_slot = 0;
        let mut best_score = f64::NEG_INFINITY;
        for slot in 0..classes.len() {
            let score = stats::dot(&w[slot], row) + b[slot];
            if score > best_score {
                best_score = score;
                best_slot = slot;
            }
        }
        if classes[best_slot] == y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Top-2 principal-component coordinates of the rows of `x`, centered.
/// Components come from power iteration with deflation on the centered
/// scatter; if the data has rank 1, the second coordinate is zero.
pub fn pca2(x: &[Vec<f64>]) -> Result<Vec<[f64; 2]>, ProbeError> {
    if x.len() < 2 {
        return Err(ProbeError::InvalidInput(format!(
            "need at least 2 points, got {}",
            x.len()
        )));
    }
    let labels: Vec<usize> = vec![0; x.len()];
    let d = check_rows(x, &labels)?;
    let n = x.len();

    let mut mean = vec![0.0; d];
    for row in x {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut xc = vec![0.0; n * d];
    for (i, row) in x.iter().enumerate() {
        for j in 0..d {
            xc[i * d + j] = row[j] - mean[j];
        }
    }
    let total: f64 = xc.iter().map(|&v| v * v).sum();
    if total == 0.0 {
        return Err(ProbeError::ZeroVariance);
    }

    let mut coords = vec![[0.0f64; 2]; n];
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    for k in 0..2usize {
        let mut seed = RngStream::root(PCA_SEED).derive(k as u64);
        let mut v: Vec<f64> = (0..d).map(|_| seed.gaussian()).collect();
        for prev in &components {
            let proj = stats::dot(prev, &v);
            for (vj, &pj) in v.iter_mut().zip(prev) {
                *vj -= proj * pj;
            }
        }
        let nv = stats::norm2(&v);
        if nv == 0.0 {
            continue;
        }
        for vj in v.iter_mut() {
            *vj /= nv;
        }
        let mut u = vec![0.0; n];
        let mut rank_deficient = false;
        for _ in 0..300 {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = stats::dot(&xc[i * d..(i + 1) * d], &v);
            }
            let mut w = vec![0.0; d];
            for i in 0..n {
                let ui = u[i];
                for (wj, &xj) in w.iter_mut().zip(&xc[i * d..(i + 1) * d]) {
                    *wj += ui * xj;
                }
            }
            for prev in &components {
                let proj = stats::dot(prev, &w);
                for (wj, &pj) in w.iter_mut().zip(prev) {
                    *wj -= proj * pj;
                }
            }
            let nw = stats::norm2(&w);
            if nw == 0.0 {
                // No variance left orthogonal to earlier components.
                rank_deficient = true;
                break;
            }
            let mut align = 0.0;
            for (wj, &vj) in w.iter().zip(&v) {
                align += wj * vj / nw;
            }
            for (vj, &wj) in v.iter_mut().zip(&w) {
                *vj = wj / nw;
            }
            if 1.0 - align.abs() <= 1e-13 {
                break;
            }
        }
        if rank_deficient {
            continue;
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[k] = stats::dot(&xc[i * d..(i + 1) * d], &v);
        }
        components.push(v);
    }
    Ok(coords)
}

/// One point of a separation sweep: a dataset's dial setting, its measured
/// index, and the probe accuracy a linear classifier reaches on it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub sep_scale: f64,
    pub seed: u64,
    pub index: f64,
    pub accuracy: f64,
}

/// Index and probe accuracy across `levels` x `seeds` synthetic datasets,
/// evaluated in parallel. Points come back level-major, seed-minor.
pub fn separability_sweep(
    d: usize,
    n_classes: usize,
    n_clusters: usize,
    levels: &[f64],
    per_class: usize,
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<Vec<SweepPoint>, ProbeError> {
    if levels.is_empty() || seeds.is_empty() {
        return Err(ProbeError::InvalidInput("need at least one level and one seed".into()));
    }
    let jobs = levels.len() * seeds.len();
    let results: Vec<Result<SweepPoint, ProbeError>> = par::map_indexed(jobs, |j| {
        let level = levels[j / seeds.len()];
        let seed = seeds[j % seeds.len()];
        let rng = RngStream::root(seed);
        let data = synth_repr_dataset(d, n_classes, n_clusters, level, per_class, &rng)?;
        let index = separability_index(&data.x, &data.y)?;
        let accuracy = linear_probe(&data.x, &data.y, cfg, &rng.derive(1))?;
        Ok(SweepPoint {
            sep_scale: level,
            seed,
            index,
            accuracy,
        })
    });
    results.into_iter().collect()
}

/// Writes 2-D coordinates with their labels as CSV (`x,y,label`).
pub fn write_pca2_csv<W: io::Write>(
    coords: &[[f64; 2]],
    labels: &[usize],
    writer: W,
) -> Result<(), ProbeError> {
    if coords.len() != labels.len() {
        return Err(ProbeError::InvalidInput(format!(
            "{} coordinates but {} labels",
            coords.len(),
            labels.len()
        )));
    }
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["x", "y", "label"])
        .map_err(|e| ProbeError::Csv(e.to_string()))?;
    for (c, label) in coords.iter().zip(labels) {
        out.write_record([c[0].to_string(), c[1].to_string(), label.to_string()])
            .map_err(|e| ProbeError::Csv(e.to_string()))?;
    }
    out.flush().map_err(|e| ProbeError::Csv(e.to_string()))
}

/// Writes sweep results as CSV (`sep_scale,seed,separability_index,probe_accuracy`).
pub fn write_sweep_csv<W: io::Write>(
    points: &[SweepPoint],
    writer: W,
) -> Result<(), ProbeError> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["sep_scale", "seed", "separability_index", "probe_accuracy"])
        .map_err(|e| ProbeError::Csv(e.to_string()))?;
    for p in points {
        out.write_record([
            p.sep_scale.to_string(),
            p.seed.to_string(),
            p.index.to_string(),
            p.accuracy.to_string(),
        ])
        .map_err(|e| ProbeError::Csv(e.to_string()))?;
    }
    out.flush().map_err(|e| ProbeError::Csv(e.to_string()))
}
