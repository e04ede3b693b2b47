//! Run artifacts: history, score, and distribution CSVs plus a short text
//! summary. Column order is pinned, floats print with the shortest exact
//! representation, and the same inputs always produce byte-identical files,
//! which is what makes replay checkable by comparison.

use std::fmt::Write as _;

use trinity_core::trainers::HistoryRecord;

pub fn history_header(agents: usize) -> String {
    let mut h = String::from("generation,mean_fitness,best_fitness,consumed");
    for x in 0..agents {
        let _ = write!(h, ",agent_{x}");
    }
    h.push_str(",role_T,role_W,role_V");
    h
}

/// Render one training history. An empty history yields only the header, so
/// trainers without a generation structure still leave a well-formed file.
pub fn history_csv(agents: usize, history: &[HistoryRecord]) -> String {
    let mut out = history_header(agents);
    out.push('\n');
    for rec in history {
        let _ = write!(
            out,
            "{},{},{},{}",
            rec.generation, rec.mean_fitness, rec.best_fitness, rec.consumed
        );
        debug_assert_eq!(rec.agent_frac.len(), agents);
        for f in &rec.agent_frac {
            let _ = write!(out, ",{f}");
        }
        for f in &rec.role_frac {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

/// How one finished arm spent its turns, evaluated on held-out episodes.
#[derive(Clone, Debug)]
pub struct DistributionRow {
    pub arm: String,
    pub seed: u64,
    pub agent_frac: Vec<f64>,
    pub role_frac: [f64; 3],
}

pub fn distribution_csv(agents: usize, rows: &[DistributionRow]) -> String {
    let mut out = String::from("arm,seed");
    for x in 0..agents {
        let _ = write!(out, ",agent_{x}");
    }
    out.push_str(",role_T,role_W,role_V\n");
    for row in rows {
        let _ = write!(out, "{},{}", row.arm, row.seed);
        for f in &row.agent_frac {
            let _ = write!(out, ",{f}");
        }
        for f in &row.role_frac {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct ScoreRow {
    pub arm: String,
    pub seed: u64,
    pub eval_reward: f64,
    pub best_fitness: f64,
    pub consumed: u64,
}

/// Per-seed scores for a single-trainer run.
pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("arm,seed,eval_reward,best_fitness,consumed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.arm, r.seed, r.eval_reward, r.best_fitness, r.consumed
        );
    }
    out
}

/// Seed-aggregated comparison: one row per trainer, seed list joined with
/// `|`, reward and fitness as seed means, consumption summed.
pub fn comparison_csv(arms: &[(String, Vec<ScoreRow>)]) -> String {
    let mut out = String::from("trainer,seeds,eval_reward,best_fitness,consumed\n");
    for (name, rows) in arms {
        let seeds: Vec<String> = rows.iter().map(|r| r.seed.to_string()).collect();
        let n = rows.len().max(1) as f64;
        let reward = rows.iter().map(|r| r.eval_reward).sum::<f64>() / n;
        let fitness = rows.iter().map(|r| r.best_fitness).sum::<f64>() / n;
        let consumed: u64 = rows.iter().map(|r| r.consumed).sum();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            name,
            seeds.join("|"),
            reward,
            fitness,
            consumed
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct BaselineRow {
    pub seed: u64,
    pub agent: usize,
    pub eval_reward: f64,
}

/// Fixed-agent single-turn reference scores.
pub fn baseline_csv(rows: &[BaselineRow]) -> String {
    let mut out = String::from("seed,agent,eval_reward\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.seed, r.agent, r.eval_reward);
    }
    out
}
