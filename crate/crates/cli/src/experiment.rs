//! End-to-end experiment driver: per-seed training, held-out evaluation
//! against fixed-agent baselines, and artifact emission. Seeds (and trainer
//! arms in comparison mode) run concurrently; every random stream is derived
//! from the seed alone, so a rerun from the resolved config reproduces each
//! artifact byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use trinity_core::budget::BudgetLedger;
use trinity_core::coordination::{
    run_episode, AgentBackend, AgentReply, BackendError, EpisodeOptions, ReprSource, Role,
    Transcript,
};
use trinity_core::heads::Head;
use trinity_core::par;
use trinity_core::remote::{RemoteBackend, RemoteBackendConfig};
use trinity_core::rng::RngStream;
use trinity_core::simenv::{query_text, SimEnv, Task};
use trinity_core::trainers::{
    evaluate_fitness, random_search, sft_fit, sft_labels, train_reinforce, train_sepcma,
    ChoiceCounts, CoordinationEnv, LabeledExample, RandomSearchConfig, ReinforceConfig,
    SepCmaTrainConfig, SftConfig, TrainError, TrainRun,
};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::report::{self, BaselineRow, DistributionRow, ScoreRow};

// Stream labels under a seed's root. Template init and evaluation are shared
// across trainer arms; training draws never collide with either.
const LBL_INIT: u64 = 0x01;
const LBL_TRAIN: u64 = 0x02;
const LBL_EVAL: u64 = 0x03;
const LBL_SFT_TASKS: u64 = 0x04;
const LBL_SFT_REWARDS: u64 = 0x05;
const LBL_SFT_LABELS: u64 = 0x06;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Theory(#[from] trinity_core::theory::TheoryError),
    #[error(transparent)]
    Probe(#[from] trinity_core::probe::ProbeError),
    #[error(transparent)]
    Selection(#[from] trinity_core::selection::SelectionError),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
}

/// Agent pool behind the coordination loop: the simulated pool, or an HTTP
/// service speaking the same turn protocol.
pub enum PoolBackend<'a> {
    Simulated(&'a SimEnv),
    Remote(RemoteBackend),
}

impl AgentBackend for PoolBackend<'_> {
    fn agent_count(&self) -> usize {
        match self {
            PoolBackend::Simulated(env) => AgentBackend::agent_count(*env),
            PoolBackend::Remote(r) => AgentBackend::agent_count(r),
        }
    }

    fn respond(
        &self,
        agent: usize,
        role: Role,
        prompt: &str,
        transcript: &Transcript,
        rng: &mut RngStream,
    ) -> Result<AgentReply, BackendError> {
        match self {
            PoolBackend::Simulated(env) => env.respond(agent, role, prompt, transcript, rng),
            PoolBackend::Remote(r) => r.respond(agent, role, prompt, transcript, rng),
        }
    }
}

pub fn make_backend<'a>(cfg: &ExperimentConfig, env: &'a SimEnv) -> PoolBackend<'a> {
    match &cfg.env.remote_endpoint {
        Some(endpoint) => {
            let mut rc = RemoteBackendConfig::new(endpoint.clone(), env.matrix().agent_count());
            rc.timeout_ms = cfg.env.remote_timeout_ms;
            rc.retries = cfg.env.remote_retries;
            rc.max_chars = cfg.episode.max_chars;
            PoolBackend::Remote(RemoteBackend::new(rc))
        }
        None => PoolBackend::Simulated(env),
    }
}

pub fn episode_options(cfg: &ExperimentConfig) -> EpisodeOptions {
    EpisodeOptions {
        max_turns: cfg.episode.max_turns,
        max_chars: cfg.episode.max_chars,
        fixed_agent: cfg.ablation.fixed_agent,
        no_thinker: cfg.ablation.no_thinker,
        no_tri_role: cfg.ablation.no_tri_role,
        turn_cost: cfg.env.turn_cost,
        ..EpisodeOptions::default()
    }
}

/// Single-roll options for reference scores and label collection: one turn,
/// no retry structure, the given agent pinned.
fn single_roll(cfg: &ExperimentConfig, agent: usize) -> EpisodeOptions {
    EpisodeOptions {
        max_turns: 1,
        no_tri_role: true,
        fixed_agent: Some(agent),
        max_chars: cfg.episode.max_chars,
        turn_cost: cfg.env.turn_cost,
        ..EpisodeOptions::default()
    }
}

fn init_template(cfg: &ExperimentConfig, env: &SimEnv, seed: u64) -> Result<Head, RunError> {
    let kind = cfg.head_kind()?;
    let head_cfg = cfg.head_config(env.matrix().agent_count())?;
    let mut rng = RngStream::root(seed).derive(LBL_INIT);
    Ok(Head::init(kind, &head_cfg, &mut rng).map_err(TrainError::from)?)
}

/// One trained seed: the run itself plus its held-out evaluation.
#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub run: TrainRun,
    pub eval_reward: f64,
    pub eval_counts: ChoiceCounts,
    pub head: Head,
}

/// One trainer across all seeds.
pub struct ArmOutcome {
    pub name: String,
    pub seeds: Vec<SeedOutcome>,
}

impl ArmOutcome {
    pub fn mean_eval_reward(&self) -> f64 {
        self.seeds.iter().map(|s| s.eval_reward).sum::<f64>() / self.seeds.len().max(1) as f64
    }
}

/// Train one seed with the named algorithm, then score the result on the
/// held-out evaluation stream. The stream is derived from the seed alone, so
/// every arm and every baseline sees the same episodes.
pub fn run_seed(cfg: &ExperimentConfig, algorithm: &str, seed: u64) -> Result<SeedOutcome, RunError> {
    let env = cfg.build_env()?;
    let template = init_template(cfg, &env, seed)?;
    let backend = make_backend(cfg, &env);
    let coord = CoordinationEnv::new(&template, &env, &backend).with_opts(episode_options(cfg));
    let train_rng = RngStream::root(seed).derive(LBL_TRAIN);
    let t = &cfg.trainer;
    let run = match algorithm {
        "sepcma" => train_sepcma(
            &coord,
            t.b_env,
            &SepCmaTrainConfig {
                sigma0: t.sigma0,
                m_cma: t.m_cma,
                lambda: t.lambda,
                ..SepCmaTrainConfig::default()
            },
            &train_rng,
        )?,
        "rs" => random_search(
            &coord,
            t.b_env,
            &RandomSearchConfig {
                m_rs: t.m_rs,
                band: (t.band[0], t.band[1]),
            },
            &train_rng,
        )?,
        "reinforce" => train_reinforce(
            &coord,
            &template,
            t.b_env,
            &ReinforceConfig {
                lr: t.reinforce_lr,
                baseline: t.reinforce_baseline,
                m_cma: t.m_cma,
                lambda: t.lambda,
            },
            &train_rng,
        )?,
        "sft" => run_sft(cfg, &env, &backend, &template, seed)?,
        other => {
            return Err(ConfigError::Invalid(format!("unknown trainer algorithm {other:?}")).into())
        }
    };
    // Deploy the final distribution mean when the trainer keeps one: at small
    // replication counts the best-ever fitness is inflated by selection over
    // noise, while the mean is the de-noised converged policy. Trainers
    // without a mean (random search) deploy their best-ever candidate, which
    // is the algorithm's own output rule.
    let deployed = run.final_mean.clone().unwrap_or_else(|| run.best.clone());
    let (eval_reward, eval_counts) = evaluate_policy(cfg, &coord, &deployed, seed)?;
    let head = coord.head_for(&deployed).map_err(TrainError::from)?;
    Ok(SeedOutcome {
        seed,
        run,
        eval_reward,
        eval_counts,
        head,
    })
}

fn evaluate_policy<W, B>(
    cfg: &ExperimentConfig,
    coord: &CoordinationEnv<'_, W, B>,
    theta: &[f64],
    seed: u64,
) -> Result<(f64, ChoiceCounts), RunError>
where
    W: trinity_core::trainers::TaskSource + trinity_core::coordination::ReprSource + Sync,
    B: AgentBackend + Sync,
{
    let m = cfg.run.eval_episodes;
    let mut ledger = BudgetLedger::new(m as u64);
    let eval_rng = RngStream::root(seed).derive(LBL_EVAL);
    let (sample, counts) = evaluate_fitness(0, theta, coord, m, &mut ledger, &eval_rng)?;
    Ok((sample.mean, counts))
}

/// Evaluate a saved head on the held-out stream of `seed`. The checkpoint
/// must fit the template the config describes.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    seed: u64,
) -> Result<(f64, ChoiceCounts), RunError> {
    let env = cfg.build_env()?;
    let template = init_template(cfg, &env, seed)?;
    let (head, _) = checkpoint::load_into_template(ckpt, &template)?;
    let backend = make_backend(cfg, &env);
    let coord = CoordinationEnv::new(&template, &env, &backend).with_opts(episode_options(cfg));
    evaluate_policy(cfg, &coord, &head.to_vector(), seed)
}

/// Score every fixed single agent, one roll per episode, on the same
/// evaluation stream the trained policies saw.
pub fn run_baselines(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<BaselineRow>, RunError> {
    let env = cfg.build_env()?;
    let template = init_template(cfg, &env, seed)?;
    let backend = make_backend(cfg, &env);
    let theta = template.to_vector();
    let agents = env.matrix().agent_count();
    let mut rows = Vec::with_capacity(agents);
    for agent in 0..agents {
        let coord = CoordinationEnv::new(&template, &env, &backend).with_opts(single_roll(cfg, agent));
        let (mean, _) = evaluate_policy(cfg, &coord, &theta, seed)?;
        rows.push(BaselineRow {
            seed,
            agent,
            eval_reward: mean,
        });
    }
    Ok(rows)
}

/// Best fixed agent by cross-seed mean reward; ties go to the lowest index.
pub fn best_baseline(rows: &[BaselineRow]) -> Option<(usize, f64)> {
    let agents = rows.iter().map(|r| r.agent).max()? + 1;
    let seeds = rows.len() / agents;
    (0..agents)
        .map(|a| {
            let mean = rows.iter().filter(|r| r.agent == a).map(|r| r.eval_reward).sum::<f64>()
                / seeds.max(1) as f64;
            (a, mean)
        })
        .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
}

/// Imitation arm. The episode budget buys a labeled dataset instead of
/// search: Q = floor(B / (S * L)) questions, each answered once by all L
/// agents under S independent roll seeds. Per-question labels come from the
/// per-seed argmax plus a majority vote, and the head is fitted by
/// cross-entropy on the turn-zero representations. `best_fitness` reports
/// label accuracy on the training set, since no episode-level fitness is
/// ever measured.
fn run_sft(
    cfg: &ExperimentConfig,
    env: &SimEnv,
    backend: &PoolBackend<'_>,
    template: &Head,
    seed: u64,
) -> Result<TrainRun, RunError> {
    let agents = env.matrix().agent_count();
    let s = cfg.trainer.sft_label_seeds;
    let per_question = (s * agents) as u64;
    let q = (cfg.trainer.b_env / per_question) as usize;
    if q == 0 {
        return Err(TrainError::BudgetTooSmall {
            need: per_question,
            have: cfg.trainer.b_env,
        }
        .into());
    }
    let root = RngStream::root(seed);
    let mut task_rng = root.derive(LBL_SFT_TASKS);
    let tasks: Vec<Task> = (0..q).map(|_| env.sample_task(&mut task_rng)).collect();

    let reward_rng = root.derive(LBL_SFT_REWARDS);
    let total = s * q * agents;
    let flat: Vec<Result<f64, TrainError>> = par::map_indexed(total, |i| {
        let si = i / (q * agents);
        let qi = (i / agents) % q;
        let ai = i % agents;
        let opts = single_roll(cfg, ai);
        let mut rng = reward_rng.derive_path(&[si as u64, qi as u64, ai as u64]);
        let mut ledger = BudgetLedger::new(1);
        let traj = run_episode(template, env, backend, &tasks[qi], &opts, &mut ledger, &mut rng)?;
        Ok(traj.reward)
    });
    let mut rewards = vec![vec![vec![0.0f64; agents]; q]; s];
    for (i, r) in flat.into_iter().enumerate() {
        rewards[i / (q * agents)][(i / agents) % q][i % agents] = r?;
    }

    let mut label_rng = root.derive(LBL_SFT_LABELS);
    let labels = sft_labels(&rewards, &mut label_rng)?;
    let dataset: Vec<LabeledExample> = tasks
        .iter()
        .zip(&labels)
        .map(|(task, &label)| LabeledExample {
            h: env.representation(task, &Transcript::new(*task, query_text(task))),
            label,
        })
        .collect();
    let t = &cfg.trainer;
    let (fitted, _losses) = sft_fit(
        &dataset,
        template,
        &SftConfig {
            lr: t.sft_lr,
            batch: t.sft_batch,
            epochs: t.sft_epochs,
            seed,
            ..SftConfig::default()
        },
    )?;
    let hits = dataset
        .iter()
        .filter(|ex| {
            let logits = fitted.forward_eval(&ex.h).expect("dataset dims match");
            let agent = logits[..agents]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            agent == ex.label
        })
        .count();
    Ok(TrainRun {
        best: fitted.to_vector(),
        best_fitness: hits as f64 / dataset.len() as f64,
        final_mean: None,
        history: Vec::new(),
        consumed: (s * q * agents) as u64,
    })
}

/// All seeds of one arm plus the fixed-agent references, seeds in parallel.
pub fn run_arm(cfg: &ExperimentConfig, algorithm: &str) -> Result<ArmOutcome, RunError> {
    let seeds = &cfg.run.seeds;
    let outcomes: Vec<Result<SeedOutcome, RunError>> =
        par::map_indexed(seeds.len(), |i| run_seed(cfg, algorithm, seeds[i]));
    let seeds = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ArmOutcome {
        name: algorithm.to_string(),
        seeds,
    })
}

pub fn run_all_baselines(cfg: &ExperimentConfig) -> Result<Vec<BaselineRow>, RunError> {
    let seeds = &cfg.run.seeds;
    let per_seed: Vec<Result<Vec<BaselineRow>, RunError>> =
        par::map_indexed(seeds.len(), |i| run_baselines(cfg, seeds[i]));
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| (r.agent, r.seed));
    Ok(rows)
}

fn frac_counts(counts: &ChoiceCounts) -> (Vec<f64>, [f64; 3]) {
    let turns = counts.turns.max(1) as f64;
    let agent = counts.agent.iter().map(|&c| c as f64 / turns).collect();
    let role = [
        counts.role[0] as f64 / turns,
        counts.role[1] as f64 / turns,
        counts.role[2] as f64 / turns,
    ];
    (agent, role)
}

fn distribution_rows(arm: &ArmOutcome) -> Vec<DistributionRow> {
    arm.seeds
        .iter()
        .map(|s| {
            let (agent_frac, role_frac) = frac_counts(&s.eval_counts);
            DistributionRow {
                arm: arm.name.clone(),
                seed: s.seed,
                agent_frac,
                role_frac,
            }
        })
        .collect()
}

fn score_rows(arm: &ArmOutcome) -> Vec<ScoreRow> {
    arm.seeds
        .iter()
        .map(|s| ScoreRow {
            arm: arm.name.clone(),
            seed: s.seed,
            eval_reward: s.eval_reward,
            best_fitness: s.run.best_fitness,
            consumed: s.run.consumed,
        })
        .collect()
}

fn write_arm_files(out: &Path, arm: &ArmOutcome, agents: usize, prefix: bool) -> Result<(), RunError> {
    for s in &arm.seeds {
        let tag = if prefix {
            format!("{}_seed{}", arm.name, s.seed)
        } else {
            format!("seed{}", s.seed)
        };
        fs::write(
            out.join(format!("history_{tag}.csv")),
            report::history_csv(agents, &s.run.history),
        )?;
        checkpoint::save(&s.head, s.seed, &out.join(format!("checkpoint_{tag}.txt")))?;
    }
    Ok(())
}

fn summary_text(
    cfg: &ExperimentConfig,
    arms: &[ArmOutcome],
    baselines: &[BaselineRow],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seeds: {:?}", cfg.run.seeds);
    let _ = writeln!(out, "eval episodes per seed: {}", cfg.run.eval_episodes);
    let _ = writeln!(out, "episode budget per seed: {}", cfg.trainer.b_env);
    let best = best_baseline(baselines);
    if let Some((agent, mean)) = best {
        let _ = writeln!(out, "best fixed single agent: {agent} (mean reward {mean:.4})");
    }
    for arm in arms {
        let per_seed: Vec<String> =
            arm.seeds.iter().map(|s| format!("{:.4}", s.eval_reward)).collect();
        let mean = arm.mean_eval_reward();
        let _ = writeln!(
            out,
            "{}: mean eval reward {:.4} (per seed: {})",
            arm.name,
            mean,
            per_seed.join(", ")
        );
        if let Some((_, base)) = best {
            let _ = writeln!(out, "{}: improvement over best single {:+.4}", arm.name, mean - base);
        }
        let consumed: u64 = arm.seeds.iter().map(|s| s.run.consumed).sum();
        let _ = writeln!(out, "{}: training episodes consumed {consumed}", arm.name);
    }
    out
}

/// Train the configured trainer across seeds and leave the full artifact set
/// in `out`: the resolved config echo, per-seed history CSVs and
/// checkpoints, final scores, selection distributions, fixed-agent
/// baselines, and a text summary.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ArmOutcome, RunError> {
    let mut cfg = cfg.clone();
    cfg.run.mode = "train".into();
    let cfg = &cfg;
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved.toml"), cfg.to_toml_string())?;
    let arm = run_arm(cfg, &cfg.trainer.algorithm)?;
    let baselines = run_all_baselines(cfg)?;
    let agents = cfg.build_env()?.matrix().agent_count();
    write_arm_files(out, &arm, agents, false)?;
    fs::write(out.join("final_scores.csv"), report::scores_csv(&score_rows(&arm)))?;
    fs::write(
        out.join("distribution.csv"),
        report::distribution_csv(agents, &distribution_rows(&arm)),
    )?;
    fs::write(out.join("baseline.csv"), report::baseline_csv(&baselines))?;
    fs::write(
        out.join("summary.txt"),
        summary_text(cfg, std::slice::from_ref(&arm), &baselines),
    )?;
    Ok(arm)
}

/// Run all four trainers on the same seeds, template draws, and evaluation
/// stream, and emit one aggregated score row per trainer.
pub fn run_comparison(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ArmOutcome>, RunError> {
    let mut cfg = cfg.clone();
    cfg.run.mode = "compare".into();
    let cfg = &cfg;
    let mut arm_cfgs = Vec::new();
    for name in crate::config::ALGORITHMS {
        let mut c = cfg.clone();
        c.trainer.algorithm = name.to_string();
        c.validate()?;
        arm_cfgs.push((name, c));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved.toml"), cfg.to_toml_string())?;
    let seeds = cfg.run.seeds.clone();
    let jobs = arm_cfgs.len() * seeds.len();
    let outcomes: Vec<Result<SeedOutcome, RunError>> = par::map_indexed(jobs, |j| {
        let (name, c) = &arm_cfgs[j / seeds.len()];
        run_seed(c, name, seeds[j % seeds.len()])
    });
    let mut flat = Vec::with_capacity(jobs);
    for o in outcomes {
        flat.push(o?);
    }
    let mut arms = Vec::new();
    for (i, (name, _)) in arm_cfgs.iter().enumerate() {
        let seeds_out: Vec<SeedOutcome> =
            flat.drain(..seeds.len()).collect::<Vec<_>>();
        debug_assert_eq!(seeds_out.len(), seeds.len(), "arm {i} seed count");
        arms.push(ArmOutcome {
            name: name.to_string(),
            seeds: seeds_out,
        });
    }
    let baselines = run_all_baselines(cfg)?;
    let agents = cfg.build_env()?.matrix().agent_count();
    let mut dist_rows = Vec::new();
    let mut comparison = Vec::new();
    for arm in &arms {
        write_arm_files(out, arm, agents, true)?;
        dist_rows.extend(distribution_rows(arm));
        comparison.push((arm.name.clone(), score_rows(arm)));
    }
    fs::write(out.join("final_scores.csv"), report::comparison_csv(&comparison))?;
    fs::write(out.join("distribution.csv"), report::distribution_csv(agents, &dist_rows))?;
    fs::write(out.join("baseline.csv"), report::baseline_csv(&baselines))?;
    fs::write(out.join("summary.txt"), summary_text(cfg, &arms, &baselines))?;
    Ok(arms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Small enough to train in well under a second per seed.
    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env.repr.d_h = 16;
        cfg.trainer.b_env = 160;
        cfg.trainer.m_cma = 2;
        cfg.trainer.m_rs = 4;
        cfg.trainer.lambda = Some(8);
        cfg.run.seeds = vec![1, 2];
        cfg.run.eval_episodes = 40;
        cfg.episode.max_turns = 3;
        cfg
    }

    #[test]
    fn experiment_writes_the_full_artifact_set() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let arm = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(arm.seeds.len(), 2);
        for name in [
            "resolved.toml",
            "history_seed1.csv",
            "history_seed2.csv",
            "checkpoint_seed1.txt",
            "checkpoint_seed2.txt",
            "final_scores.csv",
            "distribution.csv",
            "baseline.csv",
            "summary.txt",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        // T = floor(160 / (2 * 8)) = 10 generations of history.
        let history = fs::read_to_string(dir.path().join("history_seed1.csv")).unwrap();
        assert_eq!(history.lines().count(), 11);
        let scores = fs::read_to_string(dir.path().join("final_scores.csv")).unwrap();
        assert!(scores.starts_with("arm,seed,"));
        assert_eq!(scores.lines().count(), 3);
        // 7 agents x 2 seeds of references.
        let baseline = fs::read_to_string(dir.path().join("baseline.csv")).unwrap();
        assert_eq!(baseline.lines().count(), 15);
        let resolved = fs::read_to_string(dir.path().join("resolved.toml")).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&resolved).unwrap(), cfg);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = tiny_config();
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        run_experiment(&cfg, d1.path()).unwrap();
        run_experiment(&cfg, d2.path()).unwrap();
        for entry in fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(d1.path().join(&name)).unwrap();
            let b = fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between identical runs");
        }
    }

    #[test]
    fn fixed_agent_pins_the_whole_distribution() {
        let mut cfg = tiny_config();
        cfg.run.seeds = vec![5];
        cfg.ablation.fixed_agent = Some(3);
        let dir = tempdir().unwrap();
        let arm = run_experiment(&cfg, dir.path()).unwrap();
        let (agent_frac, _) = frac_counts(&arm.seeds[0].eval_counts);
        assert_eq!(agent_frac[3], 1.0);
        assert_eq!(agent_frac.iter().sum::<f64>(), 1.0);
        let dist = fs::read_to_string(dir.path().join("distribution.csv")).unwrap();
        let row = dist.lines().nth(1).unwrap();
        assert!(row.starts_with("sepcma,5,0,0,0,1,"), "row was {row}");
    }

    #[test]
    fn comparison_emits_one_row_per_trainer() {
        let mut cfg = tiny_config();
        cfg.run.seeds = vec![1];
        cfg.run.eval_episodes = 20;
        // Q = floor(160 / (3 * 7)) = 7 questions for the imitation arm.
        let dir = tempdir().unwrap();
        let arms = run_comparison(&cfg, dir.path()).unwrap();
        assert_eq!(arms.len(), 4);
        let scores = fs::read_to_string(dir.path().join("final_scores.csv")).unwrap();
        let lines: Vec<&str> = scores.lines().collect();
        assert_eq!(lines[0], "trainer,seeds,eval_reward,best_fitness,consumed");
        assert_eq!(lines.len(), 5);
        for (line, name) in lines[1..].iter().zip(crate::config::ALGORITHMS) {
            assert!(line.starts_with(&format!("{name},1,")), "line was {line}");
        }
        // Imitation history has no generations, so the file is header-only.
        let sft_history = fs::read_to_string(dir.path().join("history_sft_seed1.csv")).unwrap();
        assert_eq!(sft_history.lines().count(), 1);
    }

    #[test]
    fn sft_needs_at_least_one_question() {
        let mut cfg = tiny_config();
        cfg.trainer.algorithm = "sft".into();
        cfg.trainer.b_env = 20; // below S * L = 21
        let err = run_seed(&cfg, "sft", 1).unwrap_err();
        assert!(matches!(err, RunError::Train(TrainError::BudgetTooSmall { .. })));
    }

    #[test]
    fn unreachable_remote_surfaces_as_transport() {
        let mut cfg = tiny_config();
        // Bind-then-drop leaves a port nothing listens on.
        let port = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        cfg.env.remote_endpoint = Some(format!("http://127.0.0.1:{port}"));
        cfg.env.remote_retries = 0;
        cfg.env.remote_timeout_ms = 200;
        cfg.run.seeds = vec![1];
        let err = run_seed(&cfg, "sepcma", 1).unwrap_err();
        match err {
            RunError::Train(TrainError::Episode(e)) => {
                assert!(matches!(
                    e,
                    trinity_core::coordination::EpisodeError::Transport { .. }
                ));
            }
            other => panic!("expected transport failure, got {other:?}"),
        }
    }

    #[test]
    fn baseline_rows_cover_every_agent_and_seed() {
        let mut cfg = tiny_config();
        cfg.run.eval_episodes = 25;
        let rows = run_all_baselines(&cfg).unwrap();
        assert_eq!(rows.len(), 14);
        let (agent, mean) = best_baseline(&rows).unwrap();
        assert!(agent < 7);
        assert!((0.0..=1.0).contains(&mean));
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.eval_reward));
        }
    }
}
