//! Standalone analysis commands: the optimizer-theory report, the
//! representation probe sweep, and joint subset selection. Each builds its
//! inputs from the corresponding config section, runs the core routines, and
//! leaves CSV plus text artifacts in the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use trinity_core::probe::{
    linear_probe, pca2, separability_sweep, synth_repr_dataset, write_pca2_csv, write_sweep_csv,
    ProbeConfig, SweepPoint,
};
use trinity_core::rng::RngStream;
use trinity_core::selection::{
    enumerate_best, enumerate_best_pruned, SelectionOutcome, SelectionProblem, write_outcome_csv,
};
use trinity_core::sepcma::{default_lambda, log_weights};
use trinity_core::stats;
use trinity_core::theory::{
    band_typical_start, budget_matched_comparison, chi_kappa, eps_separability, fit_contraction,
    gain_ratio_prediction, make_synthetic_objective, mc_recombination, noiseless_sphere_trace,
    rank_attenuation_mc, v_squared, ComparisonConfig, CoordinatePartition, RankSelector,
    SeparabilityMode, TheoryReport,
};

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::RunError;

// ---------------------------------------------------------------------------
// Theory report
// ---------------------------------------------------------------------------

/// Measure every quantity of the optimizer-theory report on one synthetic
/// objective: block-separable up to coupling `eps`, curvatures spread over a
/// decade so the diagonal metric has a real condition number. `budget`
/// overrides the iteration count via the budget-matched identity
/// T = floor(B / (m_cma * lambda)).
pub fn build_theory_report(
    cfg: &ExperimentConfig,
    budget: Option<u64>,
    seed: u64,
) -> Result<TheoryReport, RunError> {
    let th = &cfg.theory;
    let n = th.n;
    if th.block == 0 || n == 0 || n % th.block != 0 {
        return Err(ConfigError::Invalid(format!(
            "theory block size {} must divide the dimension {n}",
            th.block
        ))
        .into());
    }
    let sizes = vec![th.block; n / th.block];
    let partition = CoordinatePartition::contiguous(&sizes)?;
    let b = partition.block_count();
    let curvatures: Vec<f64> = (0..b)
        .map(|i| 10f64.powf(i as f64 / (b.max(2) - 1) as f64))
        .collect();

    let root = RngStream::root(seed);
    let obj = make_synthetic_objective(partition, &curvatures, th.eps, th.gamma, &root.derive(1))?;
    let h = obj.hessian();
    let eps_spectral = eps_separability(&h, obj.partition(), SeparabilityMode::SpectralNorm)?;
    let eps_coherence = eps_separability(&h, obj.partition(), SeparabilityMode::MaxCoherence)?;
    let eps_row_sum = eps_separability(&h, obj.partition(), SeparabilityMode::RowSumRatio)?;

    let lambda = default_lambda(n);
    let mu = lambda / 2;
    let weights = log_weights(mu);
    let m_cma = cfg.trainer.m_cma;
    let m_rs = cfg.trainer.m_rs;
    let t = match budget {
        Some(bgt) => ((bgt / (m_cma as u64 * lambda as u64)) as usize).max(2),
        None => th.t,
    };

    let rec = mc_recombination(n, lambda, mu, &weights, th.recombination_trials, &root.derive(2))?;

    // The single-round arm spends the same budget on one pool.
    let n_rs = (m_cma * lambda * t / m_rs).max(1);
    let v_n2 = v_squared(n_rs);
    let att_cma = rank_attenuation_mc(
        th.gamma,
        th.sigma0,
        th.attenuation_m,
        &RankSelector::WeightedRecombination {
            lambda,
            mu,
            weights: weights.clone(),
        },
        th.attenuation_trials,
        &root.derive(3),
    )?;
    let att_rs = rank_attenuation_mc(
        th.gamma,
        th.sigma0,
        m_rs,
        &RankSelector::BestOfPool { candidates: n_rs },
        th.attenuation_trials,
        &root.derive(4),
    )?;
    let eta = if att_rs.rho2 > 0.0 && att_cma.rho2.is_finite() {
        (att_cma.rho2 / att_rs.rho2).sqrt().min(1.0)
    } else {
        1.0
    };
    let predicted_gain_ratio = gain_ratio_prediction(t, lambda, m_cma, m_rs, rec.kappa_bar, eta)?;

    let band = (cfg.trainer.band[0], cfg.trainer.band[1]);
    let cmp = budget_matched_comparison(
        &obj,
        t,
        &ComparisonConfig {
            m_cma,
            m_rs,
            lambda: Some(lambda),
            sigma0: th.sigma0,
            band,
            start: None,
        },
        &root.derive(5),
    )?;

    let trace_gens = t.max(60);
    let trace = noiseless_sphere_trace(n, th.sigma0, trace_gens, Some(lambda), &root.derive(6))?;
    let fitted_contraction = fit_contraction(&trace, 10)?;

    let start = band_typical_start(n, band);
    let grad = obj.gradient(&start);
    let gn = stats::norm2(&grad);
    let u: Vec<f64> = grad.iter().map(|g| g / gn).collect();
    let d: Vec<f64> = (0..n).map(|i| h.entry(i, i)).collect();
    let ck = chi_kappa(&u, &d)?;

    let report = TheoryReport {
        n,
        lambda,
        mu,
        t,
        eps_spectral,
        eps_coherence,
        eps_row_sum,
        chi: ck.chi,
        kappa_d: ck.kappa_d,
        alpha: rec.alpha,
        beta: rec.beta,
        kappa: rec.kappa,
        kappa_bar: rec.kappa_bar,
        rho2_rs: att_rs.rho2,
        rho2_cma: att_cma.rho2,
        v_n2,
        predicted_gain_ratio,
        observed_gain_ratio: cmp.gain_ratio,
        fitted_contraction,
    };
    report.validate()?;
    Ok(report)
}

pub fn run_theory(
    cfg: &ExperimentConfig,
    out: &Path,
    budget: Option<u64>,
    seed: u64,
) -> Result<TheoryReport, RunError> {
    let report = build_theory_report(cfg, budget, seed)?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("theory_report.csv"),
        format!("{}\n{}\n", TheoryReport::csv_header(), report.csv_row()),
    )?;
    fs::write(out.join("theory_report.txt"), report.to_string())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Probe sweep
// ---------------------------------------------------------------------------

pub struct ProbeArtifacts {
    pub points: Vec<SweepPoint>,
    /// Rank correlation between the separation index and probe accuracy.
    pub spearman: f64,
    /// Probe accuracy after label shuffling; should sit at 1/classes.
    pub chance: f64,
}

pub fn run_probe(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<ProbeArtifacts, RunError> {
    let p = &cfg.probe;
    if p.levels == 0 || p.seeds == 0 {
        return Err(ConfigError::Invalid("probe needs at least one level and one seed".into()).into());
    }
    let levels: Vec<f64> =
        (0..p.levels).map(|i| p.level_base * p.level_factor.powi(i as i32)).collect();
    let seeds: Vec<u64> = (0..p.seeds).map(|i| seed + i).collect();
    let probe_cfg = ProbeConfig::default();
    let points =
        separability_sweep(p.d, p.classes, p.clusters, &levels, p.per_class, &seeds, &probe_cfg)?;

    let idx: Vec<f64> = points.iter().map(|pt| pt.index).collect();
    let acc: Vec<f64> = points.iter().map(|pt| pt.accuracy).collect();
    let spearman =
        stats::spearman(&idx, &acc).map_err(|e| RunError::Numeric(e.to_string()))?;

    // Shuffled-label control at the middle separation level.
    let mid = levels[levels.len() / 2];
    let mut chance_sum = 0.0;
    for &s in &seeds {
        let rng = RngStream::root(s);
        let data = synth_repr_dataset(p.d, p.classes, p.clusters, mid, p.per_class, &rng)?;
        let mut labels = data.y.clone();
        let mut shuffle = rng.derive(0x5f);
        for i in (1..labels.len()).rev() {
            labels.swap(i, shuffle.below(i + 1));
        }
        chance_sum += linear_probe(&data.x, &labels, &probe_cfg, &rng.derive(1))?;
    }
    let chance = chance_sum / seeds.len() as f64;

    fs::create_dir_all(out)?;
    let mut sweep_file = fs::File::create(out.join("sweep.csv"))?;
    write_sweep_csv(&points, &mut sweep_file)?;

    // 2-D projection of the widest-separation dataset, for eyeballing.
    let widest =
        synth_repr_dataset(p.d, p.classes, p.clusters, *levels.last().unwrap(), p.per_class, &RngStream::root(seeds[0]))?;
    let coords = pca2(&widest.x)?;
    let mut pca_file = fs::File::create(out.join("pca2.csv"))?;
    write_pca2_csv(&coords, &widest.y, &mut pca_file)?;

    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "separation levels: {} from {} to {}",
        levels.len(),
        levels[0],
        levels[levels.len() - 1]
    );
    let _ = writeln!(summary, "seeds per level: {}", seeds.len());
    let _ = writeln!(summary, "spearman(index, probe accuracy): {spearman:.4}");
    let _ = writeln!(
        summary,
        "shuffled-label probe accuracy: {chance:.4} (uniform chance {:.4})",
        1.0 / p.classes as f64
    );
    fs::write(out.join("summary.txt"), summary)?;
    Ok(ProbeArtifacts {
        points,
        spearman,
        chance,
    })
}

// ---------------------------------------------------------------------------
// Subset selection
// ---------------------------------------------------------------------------

pub fn run_selection(cfg: &ExperimentConfig, out: &Path) -> Result<SelectionOutcome, RunError> {
    let matrix = cfg.selection_matrix()?;
    let y_max = cfg.selection.y_max.unwrap_or(matrix.task_type_count());
    let x_max = cfg.selection.x_max.unwrap_or(matrix.agent_count());
    let problem = SelectionProblem::from_matrix(&matrix, y_max, x_max)?;
    let outcome = match cfg.selection.frontier_q {
        Some(q) => enumerate_best_pruned(&problem, q)?,
        None => enumerate_best(&problem)?,
    };
    fs::create_dir_all(out)?;
    let mut csv = fs::File::create(out.join("subsets.csv"))?;
    write_outcome_csv(&outcome, &mut csv)?;
    fs::write(out.join("subsets.txt"), format!("{outcome}"))?;
    Ok(outcome)
}
