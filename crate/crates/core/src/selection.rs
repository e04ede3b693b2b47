//! Joint dataset and model subset selection. Given an accuracy matrix over
//! candidate datasets (rows) and candidate models (columns), find the subset
//! pair whose per-dataset-best routing most reduces the error left by the
//! best single model, measured as relative error reduction. Instances are
//! small enough here for exhaustive enumeration behind a hard search-space
//! guard; larger instances would need greedy seeding with beam-style
//! refinement, which is out of scope.

use std::cmp::Ordering;
use std::fmt;
use std::io;

use thiserror::Error;

use crate::par;
use crate::simenv::CompetenceMatrix;
use crate::stats;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SelectionError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("subset is empty")]
    EmptySubset,
    #[error("subset index {index} out of range for {count}")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("subset repeats index {0}")]
    DuplicateIndex(usize),
    #[error("relative error reduction is undefined: the single-model baseline is already perfect")]
    PerfectBaseline,
    #[error("search space 2^{rows} * 2^{cols} subsets exceeds the 2^24 guard")]
    SearchSpaceTooLarge { rows: usize, cols: usize },
    #[error("csv write failed: {0}")]
    Csv(String),
}

/// An instance: accuracy matrix in [0,1] plus caps on how many datasets and
/// models a pick may use. Caps default to the full dimensions (no-op).
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionProblem {
    e: Vec<Vec<f64>>,
    y_max: usize,
    x_max: usize,
}

impl SelectionProblem {
    pub fn new(e: Vec<Vec<f64>>, y_max: usize, x_max: usize) -> Result<Self, SelectionError> {
        if e.is_empty() || e[0].is_empty() {
            return Err(SelectionError::InvalidInput("matrix must be nonempty".into()));
        }
        let cols = e[0].len();
        for (y, row) in e.iter().enumerate() {
            if row.len() != cols {
                return Err(SelectionError::InvalidInput(format!(
                    "row {y} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            for (x, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(SelectionError::InvalidInput(format!(
                        "entry ({y},{x}) = {v} outside [0, 1]"
                    )));
                }
            }
        }
        if y_max == 0 || y_max > e.len() {
            return Err(SelectionError::InvalidInput(format!(
                "dataset cap {y_max} outside 1..={}",
                e.len()
            )));
        }
        if x_max == 0 || x_max > cols {
            return Err(SelectionError::InvalidInput(format!(
                "model cap {x_max} outside 1..={cols}"
            )));
        }
        Ok(Self { e, y_max, x_max })
    }

    /// Caps set to the matrix dimensions.
    pub fn unconstrained(e: Vec<Vec<f64>>) -> Result<Self, SelectionError> {
        let (y, x) = (e.len(), e.first().map_or(0, Vec::len));
        Self::new(e, y.max(1), x.max(1))
    }

    /// Rows are the matrix's task types, columns its agents.
    pub fn from_matrix(
        matrix: &CompetenceMatrix,
        y_max: usize,
        x_max: usize,
    ) -> Result<Self, SelectionError> {
        let e: Vec<Vec<f64>> = (0..matrix.task_type_count())
            .map(|y| (0..matrix.agent_count()).map(|x| matrix.get(y, x)).collect())
            .collect();
        Self::new(e, y_max, x_max)
    }

    pub fn rows(&self) -> usize {
        self.e.len()
    }

    pub fn cols(&self) -> usize {
        self.e[0].len()
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.e
    }
}

fn check_subset(subset: &[usize], count: usize) -> Result<(), SelectionError> {
    if subset.is_empty() {
        return Err(SelectionError::EmptySubset);
    }
    let mut seen = vec![false; count];
    for &i in subset {
        if i >= count {
            return Err(SelectionError::IndexOutOfRange { index: i, count });
        }
        if seen[i] {
            return Err(SelectionError::DuplicateIndex(i));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Routed performance of the pick: mean over datasets in `c` of the best
/// model in `m` for that dataset.
pub fn combination_score(
    e: &[Vec<f64>],
    c: &[usize],
    m: &[usize],
) -> Result<f64, SelectionError> {
    if e.is_empty() {
        return Err(SelectionError::InvalidInput("matrix must be nonempty".into()));
    }
    check_subset(c, e.len())?;
    check_subset(m, e[0].len())?;
    let total = stats::kahan_sum(c.iter().map(|&y| {
        m.iter()
            .map(|&x| e[y][x])
            .fold(f64::NEG_INFINITY, f64::max)
    }));
    Ok(total / c.len() as f64)
}

/// Best single model over the datasets in `c`, restricted to models in `m`:
/// the model index with the highest mean accuracy, ties to the lowest index,
/// and that mean.
pub fn best_single(
    e: &[Vec<f64>],
    c: &[usize],
    m: &[usize],
) -> Result<(usize, f64), SelectionError> {
    if e.is_empty() {
        return Err(SelectionError::InvalidInput("matrix must be nonempty".into()));
    }
    check_subset(c, e.len())?;
    check_subset(m, e[0].len())?;
    let mut best_x = m[0];
    let mut best_mean = f64::NEG_INFINITY;
    for &x in m {
        let mean = stats::kahan_sum(c.iter().map(|&y| e[y][x])) / c.len() as f64;
        if mean > best_mean || (mean == best_mean && x < best_x) {
            best_mean = mean;
            best_x = x;
        }
    }
    Ok((best_x, best_mean))
}

/// Relative error reduction: how much of the error left by the best single
/// model the routed pick removes, (z - s_star) / (1 - s_star). Undefined
/// when the baseline is already perfect.
pub fn rer(z: f64, s_star: f64) -> Result<f64, SelectionError> {
    if !(z.is_finite() && s_star.is_finite()) {
        return Err(SelectionError::InvalidInput(format!(
            "scores must be finite, got z = {z}, s* = {s_star}"
        )));
    }
    if s_star >= 1.0 {
        return Err(SelectionError::PerfectBaseline);
    }
    Ok((z - s_star) / (1.0 - s_star))
}

/// Cells at or above the `q`-th nearest-rank percentile of the flattened
/// matrix, row-major. With q = 0.95 this is the top-5% frontier.
pub fn top_frontier(e: &[Vec<f64>], q: f64) -> Result<Vec<(usize, usize)>, SelectionError> {
    if e.is_empty() || e[0].is_empty() {
        return Err(SelectionError::InvalidInput("matrix must be nonempty".into()));
    }
    let flat: Vec<f64> = e.iter().flatten().copied().collect();
    let threshold = stats::percentile(&flat, q)
        .map_err(|err| SelectionError::InvalidInput(err.to_string()))?;
    let mut pairs = Vec::new();
    for (y, row) in e.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if v >= threshold {
                pairs.push((y, x));
            }
        }
    }
    Ok(pairs)
}

/// A chosen pick with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutcome {
    /// Selected dataset indices, ascending.
    pub datasets: Vec<usize>,
    /// Selected model indices, ascending.
    pub models: Vec<usize>,
    pub z: f64,
    /// Best single model within the pick, and its mean accuracy.
    pub best_model: usize,
    pub s_star: f64,
    pub rer: f64,
}

impl fmt::Display for SelectionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        writeln!(f, "datasets:            {{{}}}", join(&self.datasets))?;
        writeln!(f, "models:              {{{}}}", join(&self.models))?;
        writeln!(f, "routed score:        {:.6}", self.z)?;
        writeln!(
            f,
            "best single model:   {} (score {:.6})",
            self.best_model, self.s_star
        )?;
        write!(f, "relative error reduction: {:.6}", self.rer)
    }
}

/// Writes the outcome as a one-row CSV; index lists are `|`-joined.
pub fn write_outcome_csv<W: io::Write>(
    outcome: &SelectionOutcome,
    writer: W,
) -> Result<(), SelectionError> {
    let join = |v: &[usize]| {
        v.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("|")
    };
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["datasets", "models", "z", "best_model", "s_star", "rer"])
        .map_err(|e| SelectionError::Csv(e.to_string()))?;
    out.write_record([
        join(&outcome.datasets),
        join(&outcome.models),
        outcome.z.to_string(),
        outcome.best_model.to_string(),
        outcome.s_star.to_string(),
        outcome.rer.to_string(),
    ])
    .map_err(|e| SelectionError::Csv(e.to_string()))?;
    out.flush().map_err(|e| SelectionError::Csv(e.to_string()))
}

/// Preference between two equally scoring picks, as (datasets, models)
/// pairs; `Ordering::Greater` means the first pick wins.
pub type TiePreference = fn((&[usize], &[usize]), (&[usize], &[usize])) -> Ordering;

/// Default preference: more datasets, then more models, then
/// lexicographically smaller index lists (datasets first). A deterministic
/// stand-in for diversity-based tie resolution.
pub fn default_tie_preference(a: (&[usize], &[usize]), b: (&[usize], &[usize])) -> Ordering {
    a.0.len()
        .cmp(&b.0.len())
        .then(a.1.len().cmp(&b.1.len()))
        .then_with(|| b.0.cmp(a.0))
        .then_with(|| b.1.cmp(a.1))
}

fn mask_bits(mask: u32) -> Vec<usize> {
    (0..32).filter(|&i| mask & (1 << i) != 0).collect()
}

#[derive(Clone, Copy)]
struct Candidate {
    rer: f64,
    cmask: u32,
    mmask: u32,
}

fn prefer(a: &Candidate, b: &Candidate, tie: TiePreference) -> bool {
    if a.rer != b.rer {
        return a.rer > b.rer;
    }
    let (ac, am) = (mask_bits(a.cmask), mask_bits(a.mmask));
    let (bc, bm) = (mask_bits(b.cmask), mask_bits(b.mmask));
    tie((&ac, &am), (&bc, &bm)) == Ordering::Greater
}

/// Exhaustive search over every nonempty dataset subset (up to the dataset
/// cap) crossed with every nonempty model subset (up to the model cap),
/// maximizing relative error reduction with the given tie preference. Picks
/// whose single-model baseline is perfect leave no error to reduce and score
/// 0. Parallel across dataset subsets; the reduction visits candidates in a
/// fixed order, so results do not depend on thread scheduling.
pub fn enumerate_best_with(
    problem: &SelectionProblem,
    tie: TiePreference,
) -> Result<SelectionOutcome, SelectionError> {
    let rows = problem.rows();
    let cols = problem.cols();
    if rows + cols > 24 {
        return Err(SelectionError::SearchSpaceTooLarge { rows, cols });
    }
    let c_masks: Vec<u32> = (1u32..1 << rows)
        .filter(|m| (m.count_ones() as usize) <= problem.y_max)
        .collect();
    let m_masks: Vec<u32> = (1u32..1 << cols)
        .filter(|m| (m.count_ones() as usize) <= problem.x_max)
        .collect();
    let e = &problem.e;

    let per_c: Vec<Candidate> = par::map_indexed(c_masks.len(), |ci| {
        let cmask = c_masks[ci];
        let c_idx = mask_bits(cmask);
        let len = c_idx.len() as f64;
        // Column sums over the chosen datasets, shared by every model subset.
        let col_sum: Vec<f64> = (0..cols)
            .map(|x| c_idx.iter().map(|&y| e[y][x]).sum())
            .collect();
        let mut best: Option<Candidate> = None;
        for &mmask in &m_masks {
            let m_idx = mask_bits(mmask);
            let z = c_idx
                .iter()
                .map(|&y| {
                    m_idx
                        .iter()
                        .map(|&x| e[y][x])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum::<f64>()
                / len;
            let s_star = m_idx
                .iter()
                .map(|&x| col_sum[x] / len)
                .fold(f64::NEG_INFINITY, f64::max);
            let rer = if s_star >= 1.0 {
                0.0
            } else {
                (z - s_star) / (1.0 - s_star)
            };
            let candidate = Candidate { rer, cmask, mmask };
            if best.is_none() || prefer(&candidate, best.as_ref().unwrap(), tie) {
                best = Some(candidate);
            }
        }
        best.expect("model subsets nonempty")
    });

    let mut winner = per_c[0];
    for candidate in &per_c[1..] {
        if prefer(candidate, &winner, tie) {
            winner = *candidate;
        }
    }
    let datasets = mask_bits(winner.cmask);
    let models = mask_bits(winner.mmask);
    let z = combination_score(e, &datasets, &models)?;
    let (best_model, s_star) = best_single(e, &datasets, &models)?;
    Ok(SelectionOutcome {
        datasets,
        models,
        z,
        best_model,
        s_star,
        rer: winner.rer,
    })
}

/// `enumerate_best_with` under the default tie preference.
pub fn enumerate_best(problem: &SelectionProblem) -> Result<SelectionOutcome, SelectionError> {
    enumerate_best_with(problem, default_tie_preference)
}

/// Enumeration concentrated on the top-`q` frontier: only datasets and
/// models that appear in at least one frontier cell may enter the pick.
/// Scores still use the full matrix; the frontier narrows the search, it
/// never alters accuracies.
pub fn enumerate_best_pruned(
    problem: &SelectionProblem,
    q: f64,
) -> Result<SelectionOutcome, SelectionError> {
    let frontier = top_frontier(&problem.e, q)?;
    let mut row_in = vec![false; problem.rows()];
    let mut col_in = vec![false; problem.cols()];
    for &(y, x) in &frontier {
        row_in[y] = true;
        col_in[x] = true;
    }
    let rows: Vec<usize> = (0..problem.rows()).filter(|&y| row_in[y]).collect();
    let cols: Vec<usize> = (0..problem.cols()).filter(|&x| col_in[x]).collect();
    let sub: Vec<Vec<f64>> = rows
        .iter()
        .map(|&y| cols.iter().map(|&x| problem.e[y][x]).collect())
        .collect();
    let sub_problem = SelectionProblem::new(
        sub,
        problem.y_max.min(rows.len()),
        problem.x_max.min(cols.len()),
    )?;
    let picked = enumerate_best(&sub_problem)?;
    // Map back to original indices.
    let datasets: Vec<usize> = picked.datasets.iter().map(|&y| rows[y]).collect();
    let models: Vec<usize> = picked.models.iter().map(|&x| cols[x]).collect();
    let z = combination_score(&problem.e, &datasets, &models)?;
    let (best_model, s_star) = best_single(&problem.e, &datasets, &models)?;
    Ok(SelectionOutcome {
        datasets,
        models,
        z,
        best_model,
        s_star,
        rer: picked.rer,
    })
}
