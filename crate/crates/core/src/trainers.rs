//! Budget-accounted trainers over binary episode rewards: sep-CMA-ES,
//! random search with fitness averaging, REINFORCE, and supervised fitting
//! against oracle labels. All four spend from the same atomic-call ledger so
//! comparisons are budget-matched by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetError, BudgetLedger};
use crate::coordination::{
    run_episode, AgentBackend, EpisodeError, EpisodeOptions, ReprSource, Role,
};
use crate::heads::{
    backprop_logits, softmax_probs, split_logits, Head, HeadError, HeadKind, OutputMode,
};
use crate::par;
use crate::rng::RngStream;
use crate::sepcma::{default_lambda, sepcma_new, CmaError, SepCmaOverrides};
use crate::simenv::{SimEnv, Task};
use crate::stats;

const LBL_ASK: u64 = 0x41534b;
const LBL_EVAL: u64 = 0x4556414c;
const LBL_CAND: u64 = 0x43414e44;
const LBL_BATCH: u64 = 0x4241;
const LBL_SHUF: u64 = 0x53485546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("budget {have} is below the {need} calls one step needs")]
    BudgetTooSmall { need: u64, have: u64 },
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyData(String),
}

/// One (agent, role) choice with the representation it was made from.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub h: Vec<f64>,
    pub agent: usize,
    pub role: Role,
}

/// Result of one episode at a fixed parameter vector.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    /// Terminal reward in {0, 1}.
    pub reward: f64,
    /// Per-turn decisions; empty for environments without a turn structure.
    pub steps: Vec<StepRecord>,
}

/// Anything a trainer can spend budget against: maps a parameter vector to
/// one stochastic episode, charging the ledger exactly once per episode.
pub trait TrainEnv: Sync {
    fn dim(&self) -> usize;

    /// Size of the agent pool, for selection-frequency reporting. Zero when
    /// the environment has no agents.
    fn agent_count(&self) -> usize {
        0
    }

    /// Starting point for iterative trainers.
    fn initial_theta(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// True when episodes sample actions from the unconstrained factorized
    /// softmax, which is what the likelihood-ratio gradient differentiates.
    fn unconstrained_policy(&self) -> bool {
        true
    }

    fn episode(
        &self,
        theta: &[f64],
        ledger: &mut BudgetLedger,
        rng: &mut RngStream,
    ) -> Result<EpisodeOutcome, TrainError>;
}

/// Task provider for episode-based environments.
pub trait TaskSource {
    fn sample_task(&self, rng: &mut RngStream) -> Task;
}

impl TaskSource for SimEnv {
    fn sample_task(&self, rng: &mut RngStream) -> Task {
        SimEnv::sample_task(self, rng)
    }
}

/// Multi-turn coordination episodes: a head decoded from the parameter
/// vector routes turns over `backend`'s agent pool on tasks drawn from
/// `world`.
pub struct CoordinationEnv<'a, W, B>
where
    W: ReprSource + TaskSource + Sync,
    B: AgentBackend + Sync,
{
    pub template: &'a Head,
    pub world: &'a W,
    pub backend: &'a B,
    pub opts: EpisodeOptions,
}

impl<'a, W, B> CoordinationEnv<'a, W, B>
where
    W: ReprSource + TaskSource + Sync,
    B: AgentBackend + Sync,
{
    pub fn new(template: &'a Head, world: &'a W, backend: &'a B) -> Self {
        CoordinationEnv {
            template,
            world,
            backend,
            opts: EpisodeOptions::default(),
        }
    }

    pub fn with_opts(mut self, opts: EpisodeOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Decode a parameter vector against this environment's template.
    pub fn head_for(&self, theta: &[f64]) -> Result<Head, HeadError> {
        Head::from_vector(self.template, theta.to_vec())
    }
}

impl<W, B> TrainEnv for CoordinationEnv<'_, W, B>
where
    W: ReprSource + TaskSource + Sync,
    B: AgentBackend + Sync,
{
    fn dim(&self) -> usize {
        self.template.param_len()
    }

    fn agent_count(&self) -> usize {
        self.backend.agent_count()
    }

    fn initial_theta(&self) -> Vec<f64> {
        self.template.to_vector()
    }

    fn unconstrained_policy(&self) -> bool {
        self.opts.fixed_agent.is_none() && !self.opts.no_thinker && !self.opts.no_tri_role
    }

    fn episode(
        &self,
        theta: &[f64],
        ledger: &mut BudgetLedger,
        rng: &mut RngStream,
    ) -> Result<EpisodeOutcome, TrainError> {
        let head = self.head_for(theta)?;
        let task = self.world.sample_task(rng);
        let traj = run_episode(&head, self.world, self.backend, &task, &self.opts, ledger, rng)?;
        let steps = traj
            .transcript
            .turns
            .iter()
            .zip(traj.reps.iter())
            .map(|(turn, h)| StepRecord {
                h: h.clone(),
                agent: turn.agent,
                role: turn.role,
            })
            .collect();
        Ok(EpisodeOutcome {
            reward: traj.reward,
            steps,
        })
    }
}

/// Mean of m replicated episode rewards for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessSample {
    pub candidate: usize,
    pub m: usize,
    pub mean: f64,
}

/// Turn-level selection tallies, for the per-generation history.
#[derive(Clone, Debug, Default)]
pub struct ChoiceCounts {
    pub agent: Vec<usize>,
    pub role: [usize; 3],
    pub turns: usize,
}

impl ChoiceCounts {
    fn sized(agents: usize) -> Self {
        ChoiceCounts {
            agent: vec![0; agents],
            role: [0; 3],
            turns: 0,
        }
    }

    fn absorb(&mut self, other: &ChoiceCounts) {
        for (a, b) in self.agent.iter_mut().zip(&other.agent) {
            *a += b;
        }
        for (a, b) in self.role.iter_mut().zip(&other.role) {
            *a += b;
        }
        self.turns += other.turns;
    }

    fn record(&mut self, agent: usize, role: Role) {
        if agent < self.agent.len() {
            self.agent[agent] += 1;
        }
        self.role[role.index()] += 1;
        self.turns += 1;
    }

    fn agent_frac(&self) -> Vec<f64> {
        let t = self.turns.max(1) as f64;
        self.agent.iter().map(|&c| c as f64 / t).collect()
    }

    fn role_frac(&self) -> [f64; 3] {
        let t = self.turns.max(1) as f64;
        [
            self.role[0] as f64 / t,
            self.role[1] as f64 / t,
            self.role[2] as f64 / t,
        ]
    }
}

/// Mean reward over `m` independent episodes at `theta`. The ledger must
/// have at least `m` calls left up front; on any failure nothing is kept.
/// Episode j draws from `rng.derive(j)`, so callers that hand clones of one
/// base stream to several candidates get common random numbers across them.
pub fn evaluate_fitness<E: TrainEnv + ?Sized>(
    candidate: usize,
    theta: &[f64],
    env: &E,
    m: usize,
    ledger: &mut BudgetLedger,
    rng: &RngStream,
) -> Result<(FitnessSample, ChoiceCounts), TrainError> {
    if m == 0 {
        return Err(TrainError::Config("replication count m must be positive".into()));
    }
    if ledger.remaining() < m as u64 {
        return Err(TrainError::Budget(BudgetError::Exhausted {
            requested: m as u64,
            remaining: ledger.remaining(),
            limit: ledger.limit(),
        }));
    }
    let mut rewards = Vec::with_capacity(m);
    let mut counts = ChoiceCounts::sized(env.agent_count());
    for j in 0..m {
        let mut ep_rng = rng.derive(j as u64);
        let outcome = env.episode(theta, ledger, &mut ep_rng)?;
        for step in &outcome.steps {
            counts.record(step.agent, step.role);
        }
        rewards.push(outcome.reward);
    }
    let mean = stats::mean(&rewards);
    Ok((
        FitnessSample {
            candidate,
            m,
            mean,
        },
        counts,
    ))
}

/// One generation (or candidate, or iteration) of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub generation: usize,
    pub mean_fitness: f64,
    pub best_fitness: f64,
    /// Ledger total after this entry completed.
    pub consumed: u64,
    /// Fraction of turns routed to each agent.
    pub agent_frac: Vec<f64>,
    /// Fraction of turns placed in each role (thinker, worker, verifier).
    pub role_frac: [f64; 3],
}

/// A finished training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Best-ever candidate by replicated mean fitness.
    pub best: Vec<f64>,
    pub best_fitness: f64,
    /// Final distribution mean, when the trainer keeps one.
    pub final_mean: Option<Vec<f64>>,
    pub history: Vec<HistoryRecord>,
    pub consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepCmaTrainConfig {
    /// Initial global step size. No published value exists for this knob;
    /// 0.2 is this implementation's default and is recorded in run configs.
    pub sigma0: f64,
    /// Episodes per candidate per generation.
    pub m_cma: usize,
    pub lambda: Option<usize>,
    pub mu: Option<usize>,
    pub c_cov: Option<f64>,
}

impl Default for SepCmaTrainConfig {
    fn default() -> Self {
        SepCmaTrainConfig {
            sigma0: 0.2,
            m_cma: 16,
            lambda: None,
            mu: None,
            c_cov: None,
        }
    }
}

/// sep-CMA-ES over episode fitness. Runs exactly T = floor(B_env/(m_cma*λ))
/// generations, charging m_cma*λ calls per generation; candidates within a
/// generation share replication streams (common random numbers) and are
/// evaluated in parallel when the `parallel` feature is on.
pub fn train_sepcma<E: TrainEnv + ?Sized>(
    env: &E,
    b_env: u64,
    cfg: &SepCmaTrainConfig,
    rng: &RngStream,
) -> Result<TrainRun, TrainError> {
    let n = env.dim();
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(n));
    if cfg.m_cma == 0 {
        return Err(TrainError::Config("m_cma must be positive".into()));
    }
    let per_gen = cfg
        .m_cma
        .checked_mul(lambda)
        .ok_or_else(|| TrainError::Config("m_cma * lambda overflows".into()))?;
    if b_env < per_gen as u64 {
        return Err(TrainError::BudgetTooSmall {
            need: per_gen as u64,
            have: b_env,
        });
    }
    let generations = (b_env / per_gen as u64) as usize;
    let mut ledger = BudgetLedger::new(b_env);
    let mut state = sepcma_new(
        n,
        cfg.sigma0,
        SepCmaOverrides {
            lambda: Some(lambda),
            mu: cfg.mu,
            c_cov: cfg.c_cov,
            mean: Some(env.initial_theta()),
            scales: None,
        },
    )?;
    let mut history = Vec::with_capacity(generations);

    for g in 0..generations {
        let candidates = state.ask(&mut rng.derive_path(&[LBL_ASK, g as u64]));
        let eval_base = rng.derive_path(&[LBL_EVAL, g as u64]);
        let m = cfg.m_cma;
        let results = par::map_indexed(lambda, |i| {
            let mut local = BudgetLedger::new(m as u64);
            evaluate_fitness(i, &candidates[i], env, m, &mut local, &eval_base)
        });
        let mut fitnesses = Vec::with_capacity(lambda);
        let mut counts = ChoiceCounts::sized(env.agent_count());
        for r in results {
            let (sample, c) = r?;
            fitnesses.push(sample.mean);
            counts.absorb(&c);
        }
        ledger.charge(per_gen as u64)?;
        state.tell(&candidates, &fitnesses)?;
        history.push(HistoryRecord {
            generation: g + 1,
            mean_fitness: stats::mean(&fitnesses),
            best_fitness: fitnesses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            consumed: ledger.consumed(),
            agent_frac: counts.agent_frac(),
            role_frac: counts.role_frac(),
        });
    }

    let (best, best_fitness) = state.best().expect("at least one generation ran");
    Ok(TrainRun {
        best: best.to_vec(),
        best_fitness,
        final_mean: Some(state.mean().to_vec()),
        history,
        consumed: ledger.consumed(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchConfig {
    /// Episodes per candidate.
    pub m_rs: usize,
    /// Coordinate-wise sampling band, inclusive of lo, exclusive of hi.
    pub band: (f64, f64),
}

impl Default for RandomSearchConfig {
    fn default() -> Self {
        RandomSearchConfig {
            m_rs: 32,
            band: (-0.5, 0.5),
        }
    }
}

/// Uniform random search with fitness averaging: N = floor(B_env/m_rs)
/// candidates, coordinates drawn uniformly from the band, winner by mean
/// fitness (ties to the earlier candidate). All candidates share the same
/// replication streams.
pub fn random_search<E: TrainEnv + ?Sized>(
    env: &E,
    b_env: u64,
    cfg: &RandomSearchConfig,
    rng: &RngStream,
) -> Result<TrainRun, TrainError> {
    let n = env.dim();
    if cfg.m_rs == 0 {
        return Err(TrainError::Config("m_rs must be positive".into()));
    }
    let (lo, hi) = cfg.band;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(TrainError::Config(format!("invalid band [{lo}, {hi}]")));
    }
    if b_env < cfg.m_rs as u64 {
        return Err(TrainError::BudgetTooSmall {
            need: cfg.m_rs as u64,
            have: b_env,
        });
    }
    let count = (b_env / cfg.m_rs as u64) as usize;
    let mut ledger = BudgetLedger::new(b_env);
    let eval_base = rng.derive(LBL_EVAL);
    let m = cfg.m_rs;
    let results = par::map_indexed(count, |c| {
        let mut cand_rng = rng.derive_path(&[LBL_CAND, c as u64]);
        let theta: Vec<f64> = if lo == hi {
            vec![lo; n]
        } else {
            (0..n).map(|_| cand_rng.uniform_in(lo, hi)).collect()
        };
        let mut local = BudgetLedger::new(m as u64);
        evaluate_fitness(c, &theta, env, m, &mut local, &eval_base).map(|(s, cc)| (theta, s, cc))
    });

    let mut history = Vec::with_capacity(count);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in results {
        let (theta, sample, counts) = r?;
        ledger.charge(m as u64)?;
        if best.as_ref().map_or(true, |(_, f)| sample.mean > *f) {
            best = Some((theta, sample.mean));
        }
        let best_so_far = best.as_ref().map(|(_, f)| *f).expect("just set");
        history.push(HistoryRecord {
            generation: sample.candidate + 1,
            mean_fitness: sample.mean,
            best_fitness: best_so_far,
            consumed: ledger.consumed(),
            agent_frac: counts.agent_frac(),
            role_frac: counts.role_frac(),
        });
    }
    let (best, best_fitness) = best.expect("count >= 1");
    Ok(TrainRun {
        best,
        best_fitness,
        final_mean: None,
        history,
        consumed: ledger.consumed(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub lr: f64,
    /// Subtract a running-mean reward baseline.
    pub baseline: bool,
    /// Batch is m_cma * lambda episodes, matching one sep-CMA generation.
    pub m_cma: usize,
    pub lambda: Option<usize>,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            lr: 0.02,
            baseline: false,
            m_cma: 16,
            lambda: None,
        }
    }
}

/// Gradient of log pi(agent, role | h) with respect to the head's logits,
/// plus the log-probability itself, under the factorized softmax policy.
pub fn policy_grad_logits(
    head: &Head,
    h: &[f64],
    agent: usize,
    role: Role,
) -> Result<(Vec<f64>, f64), TrainError> {
    let logits = head.forward_eval(h)?;
    let agents = head.cfg.agents;
    let (agent_logits, role_logits) = split_logits(&logits, agents)?;
    if agent >= agents {
        return Err(TrainError::Config(format!("agent {agent} out of range")));
    }
    let pa = softmax_probs(agent_logits)?;
    let pr = softmax_probs(role_logits)?;
    let mut g = vec![0.0; logits.len()];
    for i in 0..agents {
        g[i] = (if i == agent { 1.0 } else { 0.0 }) - pa[i];
    }
    for r in 0..pr.len() {
        g[agents + r] = (if r == role.index() { 1.0 } else { 0.0 }) - pr[r];
    }
    let logp = pa[agent].ln() + pr[role.index()].ln();
    Ok((g, logp))
}

/// REINFORCE: theta <- theta + lr * sum over batch episodes of
/// (R - b) * sum over turns of grad log pi. Requires the stochastic softmax
/// policy (an argmax head has no likelihood to differentiate) and a head
/// kind with an analytic parameter gradient.
pub fn train_reinforce<E: TrainEnv + ?Sized>(
    env: &E,
    template: &Head,
    b_env: u64,
    cfg: &ReinforceConfig,
    rng: &RngStream,
) -> Result<TrainRun, TrainError> {
    if template.cfg.output_mode != OutputMode::Softmax {
        return Err(TrainError::Config(
            "likelihood-ratio training needs the softmax output mode; argmax is not differentiable"
                .into(),
        ));
    }
    if matches!(template.kind, HeadKind::Sparse) {
        return Err(TrainError::Config(
            "sparse heads have no analytic parameter gradient".into(),
        ));
    }
    if !env.unconstrained_policy() {
        return Err(TrainError::Config(
            "environment constrains the policy; the sampled actions would not match the \
             differentiated distribution"
                .into(),
        ));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(TrainError::Config(format!("invalid learning rate {}", cfg.lr)));
    }
    if template.param_len() != env.dim() {
        return Err(TrainError::Config(format!(
            "template has {} parameters but the environment expects {}",
            template.param_len(),
            env.dim()
        )));
    }
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(env.dim()));
    let batch = cfg
        .m_cma
        .checked_mul(lambda)
        .ok_or_else(|| TrainError::Config("m_cma * lambda overflows".into()))?;
    if batch == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    if b_env < batch as u64 {
        return Err(TrainError::BudgetTooSmall {
            need: batch as u64,
            have: b_env,
        });
    }
    let iterations = (b_env / batch as u64) as usize;
    let mut ledger = BudgetLedger::new(b_env);
    let mut theta = env.initial_theta();
    let mut history = Vec::with_capacity(iterations);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;

    for it in 0..iterations {
        let head = Head::from_vector(template, theta.clone())?;
        let base = rng.derive_path(&[LBL_BATCH, it as u64]);
        let theta_ref = &theta;
        let outcomes = par::map_indexed(batch, |j| {
            let mut ep_rng = base.derive(j as u64);
            let mut local = BudgetLedger::new(1);
            env.episode(theta_ref, &mut local, &mut ep_rng)
        });
        let b = if cfg.baseline && reward_count > 0 {
            reward_sum / reward_count as f64
        } else {
            0.0
        };
        let mut grad = vec![0.0; theta.len()];
        let mut rewards = Vec::with_capacity(batch);
        let mut counts = ChoiceCounts::sized(env.agent_count());
        for r in outcomes {
            let outcome = r?;
            let scale = outcome.reward - b;
            for step in &outcome.steps {
                counts.record(step.agent, step.role);
                if scale != 0.0 {
                    let (g_logits, _) = policy_grad_logits(&head, &step.h, step.agent, step.role)?;
                    let pg = backprop_logits(&head, &step.h, &g_logits)?;
                    for (gi, pi) in grad.iter_mut().zip(&pg) {
                        *gi += scale * pi;
                    }
                }
            }
            rewards.push(outcome.reward);
        }
        ledger.charge(batch as u64)?;
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += cfg.lr * g;
        }
        reward_sum += stats::kahan_sum(rewards.iter().copied());
        reward_count += batch;
        let mean = stats::mean(&rewards);
        if best.as_ref().map_or(true, |(_, f)| mean > *f) {
            best = Some((theta.clone(), mean));
        }
        history.push(HistoryRecord {
            generation: it + 1,
            mean_fitness: mean,
            best_fitness: best.as_ref().map(|(_, f)| *f).expect("just set"),
            consumed: ledger.consumed(),
            agent_frac: counts.agent_frac(),
            role_frac: counts.role_frac(),
        });
    }

    let (best, best_fitness) = best.expect("iterations >= 1");
    Ok(TrainRun {
        best,
        best_fitness,
        final_mean: Some(theta),
        history,
        consumed: ledger.consumed(),
    })
}

/// A representation paired with its oracle agent label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub h: Vec<f64>,
    pub label: usize,
}

/// Distill rewards[seed][question][agent] into one oracle label per
/// question: per-seed argmax over agents (ties sampled uniformly), then a
/// majority vote across seeds (ties again sampled uniformly).
pub fn sft_labels(
    rewards: &[Vec<Vec<f64>>],
    rng: &mut RngStream,
) -> Result<Vec<usize>, TrainError> {
    if rewards.is_empty() {
        return Err(TrainError::EmptyData("no seeds".into()));
    }
    let questions = rewards[0].len();
    if questions == 0 {
        return Err(TrainError::EmptyData("no questions".into()));
    }
    let agents = rewards[0][0].len();
    if agents == 0 {
        return Err(TrainError::EmptyData("no agents".into()));
    }
    for seed_slice in rewards {
        if seed_slice.len() != questions || seed_slice.iter().any(|q| q.len() != agents) {
            return Err(TrainError::Config("ragged reward tensor".into()));
        }
    }
    let mut labels = Vec::with_capacity(questions);
    for q in 0..questions {
        let mut votes = vec![0usize; agents];
        for seed_slice in rewards {
            let pick = stats::argmax_uniform_ties(&seed_slice[q], rng)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            votes[pick] += 1;
        }
        let vote_f: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
        let label = stats::argmax_uniform_ties(&vote_f, rng)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        labels.push(label);
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for epoch shuffling.
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 1e-6,
            batch: 64,
            epochs: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Mean cross-entropy of the agent softmax against the labels, and its
/// gradient with respect to the head parameters.
pub fn sft_minibatch(head: &Head, examples: &[&LabeledExample]) -> Result<(f64, Vec<f64>), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData("empty minibatch".into()));
    }
    let agents = head.cfg.agents;
    let mut grad = vec![0.0; head.param_len()];
    let mut loss = 0.0;
    let scale = 1.0 / examples.len() as f64;
    for ex in examples {
        if ex.label >= agents {
            return Err(TrainError::Config(format!(
                "label {} out of range for {agents} agents",
                ex.label
            )));
        }
        let logits = head.forward_eval(&ex.h)?;
        let (agent_logits, _) = split_logits(&logits, agents)?;
        let p = softmax_probs(agent_logits)?;
        loss -= p[ex.label].ln() * scale;
        let mut g_logits = vec![0.0; logits.len()];
        for i in 0..agents {
            g_logits[i] = (p[i] - if i == ex.label { 1.0 } else { 0.0 }) * scale;
        }
        let pg = backprop_logits(head, &ex.h, &g_logits)?;
        for (gi, pi) in grad.iter_mut().zip(&pg) {
            *gi += pi;
        }
    }
    Ok((loss, grad))
}

/// Fit the agent softmax to oracle labels with Adam. Returns the fitted
/// head and the mean loss per epoch.
pub fn sft_fit(
    dataset: &[LabeledExample],
    template: &Head,
    cfg: &SftConfig,
) -> Result<(Head, Vec<f64>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyData("empty dataset".into()));
    }
    if matches!(template.kind, HeadKind::Sparse) {
        return Err(TrainError::Config(
            "sparse heads have no analytic parameter gradient".into(),
        ));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config("batch and epochs must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(TrainError::Config(format!("invalid learning rate {}", cfg.lr)));
    }
    for ex in dataset {
        if ex.h.len() != template.cfg.d_h {
            return Err(TrainError::Config(format!(
                "example has {} dims, head expects {}",
                ex.h.len(),
                template.cfg.d_h
            )));
        }
    }

    let mut theta = template.to_vector();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut step = 0u32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let shuffle_root = RngStream::root(cfg.seed).derive(LBL_SHUF);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = shuffle_root.derive(epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let head = Head::from_vector(template, theta.clone())?;
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = sft_minibatch(&head, &batch)?;
            losses.push(loss);
            step += 1;
            let b1t = 1.0 - cfg.beta1.powi(step as i32);
            let b2t = 1.0 - cfg.beta2.powi(step as i32);
            for i in 0..theta.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        epoch_losses.push(stats::mean(&losses));
    }
    Ok((Head::from_vector(template, theta)?, epoch_losses))
}
