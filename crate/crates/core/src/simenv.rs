//! Synthetic agent-pool environment.
//!
//! Stands in for a pool of language models: a competence table gives each
//! agent's per-task-type success probability, role effects model what
//! planning and verification turns contribute, and a clustered Gaussian
//! generator produces the representation vectors the coordinator head reads.
//! All stochastic behavior flows through the episode rng, so episodes replay
//! exactly.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{
    AgentBackend, AgentReply, BackendError, Judgment, ReprSource, Role, Transcript,
};
use crate::rng::{gaussian_vec, RngStream};

const LBL_CENTER: u64 = 0x43454e54;
const LBL_NOISE: u64 = 0x4e4f4953;
const LBL_PHASE: u64 = 0x50484153;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EnvError {
    #[error("competence entry ({row},{col}) = {value} outside [0,1]")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("competence matrix must have at least one task type and one agent")]
    Empty,
    #[error("row {row} has {found} entries, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid role effects: {0}")]
    InvalidEffects(String),
    #[error("invalid representation config: {0}")]
    InvalidRepr(String),
    #[error("invalid mixture weights: {0}")]
    InvalidMixture(String),
    #[error("invalid difficulty spread {0}, must be in [0, 0.2]")]
    InvalidSpread(f64),
    #[error("csv: {0}")]
    Csv(String),
}

/// Success probability of each agent on each task type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetenceMatrix {
    task_types: Vec<String>,
    agents: Vec<String>,
    /// Row-major `task_types.len() x agents.len()`.
    values: Vec<f64>,
}

impl CompetenceMatrix {
    pub fn new(
        task_types: Vec<String>,
        agents: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, EnvError> {
        if task_types.is_empty() || agents.is_empty() {
            return Err(EnvError::Empty);
        }
        if values.len() != task_types.len() * agents.len() {
            return Err(EnvError::Ragged {
                row: values.len() / agents.len().max(1),
                expected: task_types.len() * agents.len(),
                found: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(EnvError::InvalidEntry {
                    row: i / agents.len(),
                    col: i % agents.len(),
                    value: v,
                });
            }
        }
        Ok(CompetenceMatrix {
            task_types,
            agents,
            values,
        })
    }

    pub fn task_type_count(&self) -> usize {
        self.task_types.len()
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn task_types(&self) -> &[String] {
        &self.task_types
    }

    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn get(&self, task_type: usize, agent: usize) -> f64 {
        assert!(task_type < self.task_type_count() && agent < self.agent_count());
        self.values[task_type * self.agent_count() + agent]
    }

    /// Mean success of one agent across task types.
    pub fn agent_average(&self, agent: usize) -> f64 {
        (0..self.task_type_count()).map(|y| self.get(y, agent)).sum::<f64>()
            / self.task_type_count() as f64
    }

    /// Best single agent by cross-type average.
    pub fn best_single(&self) -> (usize, f64) {
        (0..self.agent_count())
            .map(|x| (x, self.agent_average(x)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    /// Mean over task types of the per-type best agent: the value of always
    /// routing each question to whoever is strongest on its type.
    pub fn per_question_best(&self) -> f64 {
        (0..self.task_type_count())
            .map(|y| {
                (0..self.agent_count())
                    .map(|x| self.get(y, x))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / self.task_type_count() as f64
    }

    /// Seven-agent, four-task-type benchmark snapshot. Scores are accuracies
    /// in [0,1]; the 0-10 MT-Bench column is divided by 10.
    pub fn preset_table2() -> Self {
        let task_types = ["AIME", "BigCodeBench", "MT-Bench", "GPQA-Diamond"];
        let agents = [
            "Gemini Pro 2.5",
            "GPT-5",
            "Claude-4-Sonnet",
            "Qwen3-32B (reasoning)",
            "DeepSeek-R1-Qwen-32B",
            "Qwen3-32B (direct)",
            "Gemma-3-27B-IT",
        ];
        #[rustfmt::skip]
        let values = vec![
            0.4667, 0.4667, 0.3533, 0.2333, 0.3000, 0.2000, 0.2000,
            0.3510, 0.3380, 0.3580, 0.2090, 0.2430, 0.2300, 0.2030,
            0.9370, 0.9350, 0.9280, 0.8990, 0.8430, 0.9030, 0.8760,
            0.7525, 0.7273, 0.6730, 0.5909, 0.5101, 0.5405, 0.3333,
        ];
        CompetenceMatrix::new(
            task_types.iter().map(|s| s.to_string()).collect(),
            agents.iter().map(|s| s.to_string()).collect(),
            values,
        )
        .expect("preset is valid")
    }

    /// Read a matrix from CSV: header `task_type,<agent>,...`, one row per
    /// task type, entries in [0,1].
    pub fn from_csv<R: io::Read>(reader: R) -> Result<Self, EnvError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| EnvError::Csv(e.to_string()))?;
        if headers.len() < 2 {
            return Err(EnvError::Csv("need a label column and at least one agent".into()));
        }
        let agents: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut task_types = Vec::new();
        let mut values = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| EnvError::Csv(e.to_string()))?;
            if record.len() != agents.len() + 1 {
                return Err(EnvError::Ragged {
                    row: i,
                    expected: agents.len() + 1,
                    found: record.len(),
                });
            }
            task_types.push(record[0].trim().to_string());
            for field in record.iter().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| EnvError::Csv(format!("row {i}: bad number {field:?}")))?;
                values.push(v);
            }
        }
        CompetenceMatrix::new(task_types, agents, values)
    }

    pub fn to_csv<W: io::Write>(&self, writer: W) -> Result<(), EnvError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["task_type".to_string()];
        header.extend(self.agents.iter().cloned());
        wtr.write_record(&header).map_err(|e| EnvError::Csv(e.to_string()))?;
        for (y, name) in self.task_types.iter().enumerate() {
            let mut row = vec![name.clone()];
            for x in 0..self.agent_count() {
                row.push(format!("{}", self.get(y, x)));
            }
            wtr.write_record(&row).map_err(|e| EnvError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| EnvError::Csv(e.to_string()))
    }
}

/// What the three roles contribute in simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleEffects {
    /// Added to Worker success probability once any Thinker turn has run.
    pub thinker_bonus: f64,
    /// P(Verifier accepts | candidate correct).
    pub verifier_tpr: f64,
    /// P(Verifier rejects | candidate incorrect).
    pub verifier_tnr: f64,
    /// Cost units accrued per turn.
    pub turn_cost: f64,
}

impl Default for RoleEffects {
    fn default() -> Self {
        RoleEffects {
            thinker_bonus: 0.15,
            verifier_tpr: 0.9,
            verifier_tnr: 0.9,
            turn_cost: 1.0,
        }
    }
}

impl RoleEffects {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !self.thinker_bonus.is_finite() || self.thinker_bonus < 0.0 {
            return Err(EnvError::InvalidEffects(format!(
                "thinker_bonus {} must be finite and non-negative",
                self.thinker_bonus
            )));
        }
        for (name, v) in [("verifier_tpr", self.verifier_tpr), ("verifier_tnr", self.verifier_tnr)]
        {
            if !(0.5..=1.0).contains(&v) {
                return Err(EnvError::InvalidEffects(format!("{name} {v} outside [0.5, 1]")));
            }
        }
        if !self.turn_cost.is_finite() || self.turn_cost < 0.0 {
            return Err(EnvError::InvalidEffects(format!(
                "turn_cost {} must be finite and non-negative",
                self.turn_cost
            )));
        }
        Ok(())
    }
}

/// One sampled task instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_type: usize,
    /// Latent per-instance difficulty shift in [-0.2, 0.2].
    pub difficulty: f64,
    /// Seed of this instance's within-class representation noise.
    pub repr_seed: u64,
}

pub fn query_text(task: &Task) -> String {
    format!(
        "Solve task instance {:016x} of type {}.",
        task.repr_seed, task.task_type
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprVariant {
    /// Cluster centers at full strength.
    Contextual,
    /// Centers shrunk by `degraded_factor`, washing out task identity.
    Degraded,
}

/// Clustered Gaussian representation generator.
///
/// h = sep_scale * mu_y + noise(task) + phase(turn_count), where mu_y is the
/// type-y center (per-dim sd center_scale/sqrt(d_h)), the noise vector is
/// fixed per task instance, and phase(0) = 0 so turn 0 sees the raw cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprConfig {
    pub d_h: usize,
    pub center_seed: u64,
    pub center_scale: f64,
    /// Multiplier on the centers: the separability knob.
    pub sep_scale: f64,
    pub noise_scale: f64,
    pub phase_scale: f64,
    /// Center shrink factor used by the degraded variant.
    pub degraded_factor: f64,
    pub variant: ReprVariant,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            d_h: 1024,
            center_seed: 7001,
            center_scale: 1.0,
            sep_scale: 3.0,
            noise_scale: 1.0,
            phase_scale: 1.0,
            degraded_factor: 0.3,
            variant: ReprVariant::Contextual,
        }
    }
}

impl ReprConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.d_h == 0 {
            return Err(EnvError::InvalidRepr("d_h must be positive".into()));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("sep_scale", self.sep_scale),
            ("noise_scale", self.noise_scale),
            ("phase_scale", self.phase_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EnvError::InvalidRepr(format!(
                    "{name} {v} must be finite and non-negative"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.degraded_factor) {
            return Err(EnvError::InvalidRepr(format!(
                "degraded_factor {} outside [0, 1)",
                self.degraded_factor
            )));
        }
        Ok(())
    }
}

/// Immutable simulated environment: agent pool, reward semantics, and
/// representation generator in one place.
#[derive(Clone, Debug)]
pub struct SimEnv {
    matrix: CompetenceMatrix,
    effects: RoleEffects,
    repr: ReprConfig,
    /// Per-type centers, already scaled by center_scale/sqrt(d_h).
    centers: Vec<Vec<f64>>,
    /// Task-type mixture weights; uniform when absent.
    mixture: Option<Vec<f64>>,
    difficulty_spread: f64,
}

pub const DEFAULT_DIFFICULTY_SPREAD: f64 = 0.2;

pub fn make_env(
    matrix: CompetenceMatrix,
    effects: RoleEffects,
    repr: ReprConfig,
) -> Result<SimEnv, EnvError> {
    SimEnv::new(matrix, effects, repr)
}

impl SimEnv {
    pub fn new(
        matrix: CompetenceMatrix,
        effects: RoleEffects,
        repr: ReprConfig,
    ) -> Result<Self, EnvError> {
        effects.validate()?;
        repr.validate()?;
        let per_dim = repr.center_scale / (repr.d_h as f64).sqrt();
        let centers = (0..matrix.task_type_count())
            .map(|y| {
                let mut rng = RngStream::root(repr.center_seed).derive_path(&[LBL_CENTER, y as u64]);
                let mut c = gaussian_vec(&mut rng, repr.d_h).expect("d_h validated positive");
                for v in &mut c {
                    *v *= per_dim;
                }
                c
            })
            .collect();
        Ok(SimEnv {
            matrix,
            effects,
            repr,
            centers,
            mixture: None,
            difficulty_spread: DEFAULT_DIFFICULTY_SPREAD,
        })
    }

    pub fn with_mixture(mut self, weights: Vec<f64>) -> Result<Self, EnvError> {
        if weights.len() != self.matrix.task_type_count() {
            return Err(EnvError::InvalidMixture(format!(
                "{} weights for {} task types",
                weights.len(),
                self.matrix.task_type_count()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EnvError::InvalidMixture("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(EnvError::InvalidMixture("weights sum to zero".into()));
        }
        self.mixture = Some(weights);
        Ok(self)
    }

    pub fn with_difficulty_spread(mut self, spread: f64) -> Result<Self, EnvError> {
        if !(0.0..=0.2).contains(&spread) {
            return Err(EnvError::InvalidSpread(spread));
        }
        self.difficulty_spread = spread;
        Ok(self)
    }

    pub fn matrix(&self) -> &CompetenceMatrix {
        &self.matrix
    }

    pub fn effects(&self) -> &RoleEffects {
        &self.effects
    }

    pub fn repr_cfg(&self) -> &ReprConfig {
        &self.repr
    }

    pub fn difficulty_spread(&self) -> f64 {
        self.difficulty_spread
    }

    pub fn task_type_count(&self) -> usize {
        self.matrix.task_type_count()
    }

    /// Type-y cluster center (unscaled by sep_scale).
    pub fn center(&self, task_type: usize) -> &[f64] {
        &self.centers[task_type]
    }

    pub fn sample_task(&self, rng: &mut RngStream) -> Task {
        let task_type = match &self.mixture {
            None => rng.below(self.matrix.task_type_count()),
            Some(weights) => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.uniform() * total;
                let mut chosen = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        chosen = i;
                        break;
                    }
                    u -= w;
                }
                chosen
            }
        };
        let difficulty = if self.difficulty_spread > 0.0 {
            rng.uniform_in(-self.difficulty_spread, self.difficulty_spread)
        } else {
            0.0
        };
        Task {
            task_type,
            difficulty,
            repr_seed: rng.next_u64(),
        }
    }

    fn effective_sep_scale(&self) -> f64 {
        match self.repr.variant {
            ReprVariant::Contextual => self.repr.sep_scale,
            ReprVariant::Degraded => self.repr.sep_scale * self.repr.degraded_factor,
        }
    }

    /// Worker success probability for this agent on this task, given whether
    /// a Thinker has already contributed.
    pub fn worker_success_prob(&self, agent: usize, task: &Task, thinker_seen: bool) -> f64 {
        let mut p = self.matrix.get(task.task_type, agent);
        if thinker_seen {
            p += self.effects.thinker_bonus;
        }
        (p - task.difficulty).clamp(0.0, 1.0)
    }
}

impl ReprSource for SimEnv {
    fn d_h(&self) -> usize {
        self.repr.d_h
    }

    fn representation(&self, task: &Task, transcript: &Transcript) -> Vec<f64> {
        let d = self.repr.d_h;
        let per_dim = 1.0 / (d as f64).sqrt();
        let sep = self.effective_sep_scale();
        let mut h: Vec<f64> =
            self.centers[task.task_type].iter().map(|&c| sep * c).collect();
        if self.repr.noise_scale > 0.0 {
            let mut rng = RngStream::root(task.repr_seed).derive(LBL_NOISE);
            let scale = self.repr.noise_scale * per_dim;
            for v in h.iter_mut() {
                *v += scale * rng.gaussian();
            }
        }
        let turn_count = transcript.turns.len();
        if turn_count > 0 && self.repr.phase_scale > 0.0 {
            let mut rng =
                RngStream::root(self.repr.center_seed).derive_path(&[LBL_PHASE, turn_count as u64]);
            let scale = self.repr.phase_scale * per_dim;
            for v in h.iter_mut() {
                *v += scale * rng.gaussian();
            }
        }
        h
    }
}

impl AgentBackend for SimEnv {
    fn agent_count(&self) -> usize {
        self.matrix.agent_count()
    }

    fn respond(
        &self,
        agent: usize,
        role: Role,
        _prompt: &str,
        transcript: &Transcript,
        rng: &mut RngStream,
    ) -> Result<AgentReply, BackendError> {
        if agent >= self.matrix.agent_count() {
            return Err(BackendError::InvalidAgent {
                agent,
                count: self.matrix.agent_count(),
            });
        }
        let task = &transcript.task;
        let turn = transcript.turns.len() + 1;
        Ok(match role {
            Role::Thinker => AgentReply {
                message: format!(
                    "Plan (turn {turn}): restate the goal, split it into checkable steps, \
                     then hand off to a worker."
                ),
                candidate: None,
                judgment: None,
                diagnosis: None,
                advisory_role: Some(Role::Worker),
            },
            Role::Worker => {
                let p = self.worker_success_prob(agent, task, transcript.thinker_seen());
                let correct = rng.bernoulli(p);
                AgentReply {
                    message: format!(
                        "Candidate answer (turn {turn}) from agent {agent} for a type-{} task.",
                        task.task_type
                    ),
                    candidate: Some(correct),
                    judgment: None,
                    diagnosis: None,
                    advisory_role: None,
                }
            }
            Role::Verifier => {
                let candidate_correct = transcript.last_candidate().unwrap_or(false);
                let accept = if candidate_correct {
                    rng.bernoulli(self.effects.verifier_tpr)
                } else {
                    rng.bernoulli(1.0 - self.effects.verifier_tnr)
                };
                if accept {
                    AgentReply {
                        message: "The candidate satisfies the task constraints.\nJUDGMENT: ACCEPT"
                            .into(),
                        candidate: None,
                        judgment: Some(Judgment::Accept),
                        diagnosis: None,
                        advisory_role: None,
                    }
                } else {
                    let diagnosis = "the latest candidate does not hold up under re-derivation";
                    AgentReply {
                        message: format!("{diagnosis}\nJUDGMENT: REVISE"),
                        candidate: None,
                        judgment: Some(Judgment::Revise),
                        diagnosis: Some(diagnosis.into()),
                        advisory_role: Some(Role::Worker),
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::BudgetLedger;
    use crate::coordination::{run_episode, EpisodeOptions, TurnRecord};
    use crate::heads::{Head, HeadConfig, HeadKind};

    fn small_repr() -> ReprConfig {
        ReprConfig {
            d_h: 64,
            ..ReprConfig::default()
        }
    }

    fn task_of(task_type: usize, seed: u64) -> Task {
        Task {
            task_type,
            difficulty: 0.0,
            repr_seed: seed,
        }
    }

    #[test]
    fn preset_matches_published_scores() {
        let m = CompetenceMatrix::preset_table2();
        assert_eq!(m.task_type_count(), 4);
        assert_eq!(m.agent_count(), 7);
        assert_eq!(m.get(0, 0), 0.4667);
        assert_eq!(m.get(3, 6), 0.3333);
        assert_eq!(m.get(2, 2), 0.928);
        for y in 0..4 {
            for x in 0..7 {
                let v = m.get(y, x);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn per_question_best_beats_every_single_agent() {
        let m = CompetenceMatrix::preset_table2();
        let pqb = m.per_question_best();
        for x in 0..m.agent_count() {
            assert!(
                pqb > m.agent_average(x),
                "agent {x}: {} vs {}",
                m.agent_average(x),
                pqb
            );
        }
        let (best, avg) = m.best_single();
        assert_eq!(best, 0);
        assert!((avg - 0.6268).abs() < 1e-12);
    }

    #[test]
    fn identity_matrix_routes_perfectly() {
        let m = CompetenceMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(m.per_question_best(), 1.0);
        assert_eq!(m.agent_average(0), 0.5);
    }

    #[test]
    fn csv_round_trips() {
        let m = CompetenceMatrix::preset_table2();
        let mut buf = Vec::new();
        m.to_csv(&mut buf).unwrap();
        let back = CompetenceMatrix::from_csv(&buf[..]).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn csv_rejects_bad_input() {
        let out_of_range = "task_type,a,b\nmath,0.5,1.2\n";
        assert!(matches!(
            CompetenceMatrix::from_csv(out_of_range.as_bytes()),
            Err(EnvError::InvalidEntry { .. })
        ));
        let not_a_number = "task_type,a,b\nmath,0.5,often\n";
        assert!(matches!(
            CompetenceMatrix::from_csv(not_a_number.as_bytes()),
            Err(EnvError::Csv(_))
        ));
    }

    #[test]
    fn constructor_rejects_invalid_inputs() {
        assert!(matches!(
            CompetenceMatrix::new(vec![], vec!["a".into()], vec![]),
            Err(EnvError::Empty)
        ));
        assert!(matches!(
            CompetenceMatrix::new(vec!["t".into()], vec!["a".into()], vec![1.5]),
            Err(EnvError::InvalidEntry { .. })
        ));
        let m = CompetenceMatrix::preset_table2();
        let bad_effects = RoleEffects {
            verifier_tpr: 0.4,
            ..RoleEffects::default()
        };
        assert!(matches!(
            SimEnv::new(m.clone(), bad_effects, small_repr()),
            Err(EnvError::InvalidEffects(_))
        ));
        let bad_repr = ReprConfig {
            degraded_factor: 1.0,
            ..small_repr()
        };
        assert!(matches!(
            SimEnv::new(m.clone(), RoleEffects::default(), bad_repr),
            Err(EnvError::InvalidRepr(_))
        ));
        let env = SimEnv::new(m, RoleEffects::default(), small_repr()).unwrap();
        assert!(env.clone().with_mixture(vec![1.0, 2.0]).is_err());
        assert!(env.clone().with_mixture(vec![-1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(env.with_difficulty_spread(0.3).is_err());
    }

    #[test]
    fn task_types_are_sampled_uniformly() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects::default(),
            small_repr(),
        )
        .unwrap();
        let mut rng = RngStream::root(11);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let t = env.sample_task(&mut rng);
            counts[t.task_type] += 1;
            assert!(t.difficulty.abs() <= DEFAULT_DIFFICULTY_SPREAD);
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.24..0.26).contains(&f), "type frequency {f}");
        }
    }

    #[test]
    fn one_hot_mixture_pins_the_type() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects::default(),
            small_repr(),
        )
        .unwrap()
        .with_mixture(vec![1.0, 0.0, 0.0, 0.0])
        .unwrap();
        let mut rng = RngStream::root(12);
        for _ in 0..1000 {
            assert_eq!(env.sample_task(&mut rng).task_type, 0);
        }
    }

    #[test]
    fn task_sampling_is_deterministic() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects::default(),
            small_repr(),
        )
        .unwrap();
        let a: Vec<Task> = {
            let mut rng = RngStream::root(99);
            (0..50).map(|_| env.sample_task(&mut rng)).collect()
        };
        let b: Vec<Task> = {
            let mut rng = RngStream::root(99);
            (0..50).map(|_| env.sample_task(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_unit_scale_turn_zero_is_the_center() {
        let repr = ReprConfig {
            sep_scale: 1.0,
            noise_scale: 0.0,
            ..small_repr()
        };
        let env =
            SimEnv::new(CompetenceMatrix::preset_table2(), RoleEffects::default(), repr).unwrap();
        let task = task_of(2, 5);
        let transcript = Transcript::new(task, query_text(&task));
        let h = env.representation(&task, &transcript);
        assert_eq!(h, env.center(2));
    }

    #[test]
    fn phase_offset_is_shared_across_tasks() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects::default(),
            small_repr(),
        )
        .unwrap();
        let diff_for = |task: Task| {
            let mut transcript = Transcript::new(task, query_text(&task));
            let h0 = env.representation(&task, &transcript);
            transcript.push(TurnRecord {
                turn: 1,
                agent: 0,
                role: Role::Worker,
                output: "x".into(),
                judgment: None,
                diagnosis: None,
                candidate: Some(false),
                advisory_role: None,
            });
            let h1 = env.representation(&task, &transcript);
            (0..h0.len()).map(|i| h1[i] - h0[i]).collect::<Vec<f64>>()
        };
        let da = diff_for(task_of(0, 17));
        let db = diff_for(task_of(3, 91));
        assert!(da.iter().any(|v| v.abs() > 1e-4), "phase offset must be nonzero");
        for i in 0..da.len() {
            assert!((da[i] - db[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sep_scale_collapses_the_types() {
        let repr = ReprConfig {
            sep_scale: 0.0,
            ..small_repr()
        };
        let env =
            SimEnv::new(CompetenceMatrix::preset_table2(), RoleEffects::default(), repr).unwrap();
        let ta = task_of(0, 7);
        let tb = task_of(3, 7);
        let ha = env.representation(&ta, &Transcript::new(ta, String::new()));
        let hb = env.representation(&tb, &Transcript::new(tb, String::new()));
        assert_eq!(ha, hb);
    }

    #[test]
    fn degraded_variant_shrinks_the_centers() {
        let contextual =
            SimEnv::new(CompetenceMatrix::preset_table2(), RoleEffects::default(), ReprConfig {
                noise_scale: 0.0,
                ..small_repr()
            })
            .unwrap();
        let degraded =
            SimEnv::new(CompetenceMatrix::preset_table2(), RoleEffects::default(), ReprConfig {
                noise_scale: 0.0,
                variant: ReprVariant::Degraded,
                ..small_repr()
            })
            .unwrap();
        let task = task_of(1, 3);
        let transcript = Transcript::new(task, String::new());
        let hc = contextual.representation(&task, &transcript);
        let hd = degraded.representation(&task, &transcript);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&hd) / norm(&hc) - 0.3).abs() < 1e-12);
    }

    fn worker_reply(env: &SimEnv, agent: usize, with_thinker: bool, rng: &mut RngStream) -> bool {
        let task = task_of(0, rng.next_u64());
        let mut transcript = Transcript::new(task, query_text(&task));
        if with_thinker {
            transcript.push(TurnRecord {
                turn: 1,
                agent: 0,
                role: Role::Thinker,
                output: "plan".into(),
                judgment: None,
                diagnosis: None,
                candidate: None,
                advisory_role: Some(Role::Worker),
            });
        }
        let reply = env.respond(agent, Role::Worker, "", &transcript, rng).unwrap();
        reply.candidate.unwrap()
    }

    #[test]
    fn sure_and_hopeless_workers_behave() {
        let ones = CompetenceMatrix::new(
            vec!["t".into()],
            vec!["a".into(), "b".into()],
            vec![1.0, 1.0],
        )
        .unwrap();
        let env = SimEnv::new(ones, RoleEffects::default(), small_repr())
            .unwrap()
            .with_difficulty_spread(0.0)
            .unwrap();
        let mut rng = RngStream::root(4);
        for _ in 0..200 {
            assert!(worker_reply(&env, 0, false, &mut rng));
        }

        let zeros =
            CompetenceMatrix::new(vec!["t".into()], vec!["a".into()], vec![0.0]).unwrap();
        let env = SimEnv::new(zeros, RoleEffects::default(), small_repr())
            .unwrap()
            .with_difficulty_spread(0.0)
            .unwrap();
        for _ in 0..200 {
            assert!(!worker_reply(&env, 0, false, &mut rng));
        }
    }

    #[test]
    fn thinker_bonus_shifts_worker_success() {
        let half = CompetenceMatrix::new(vec!["t".into()], vec!["a".into()], vec![0.5]).unwrap();
        let effects = RoleEffects {
            thinker_bonus: 0.2,
            ..RoleEffects::default()
        };
        let env = SimEnv::new(half, effects, small_repr())
            .unwrap()
            .with_difficulty_spread(0.0)
            .unwrap();
        let mut rng = RngStream::root(21);
        let n = 10_000;
        let hits = (0..n).filter(|_| worker_reply(&env, 0, true, &mut rng)).count();
        let freq = hits as f64 / n as f64;
        // 3 standard errors around 0.7
        assert!((freq - 0.7).abs() < 3.0 * (0.7f64 * 0.3 / n as f64).sqrt(), "freq {freq}");
    }

    #[test]
    fn enabling_the_thinker_bonus_increases_success() {
        let half = CompetenceMatrix::new(vec!["t".into()], vec!["a".into()], vec![0.5]).unwrap();
        let with_bonus = SimEnv::new(
            half.clone(),
            RoleEffects::default(),
            small_repr(),
        )
        .unwrap()
        .with_difficulty_spread(0.0)
        .unwrap();
        let without_bonus = SimEnv::new(
            half,
            RoleEffects {
                thinker_bonus: 0.0,
                ..RoleEffects::default()
            },
            small_repr(),
        )
        .unwrap()
        .with_difficulty_spread(0.0)
        .unwrap();
        let n = 10_000;
        let mut rng = RngStream::root(33);
        let on = (0..n).filter(|_| worker_reply(&with_bonus, 0, true, &mut rng)).count() as f64
            / n as f64;
        let mut rng = RngStream::root(33);
        let off = (0..n).filter(|_| worker_reply(&without_bonus, 0, true, &mut rng)).count()
            as f64
            / n as f64;
        // one-sided two-proportion z test at alpha = 0.01
        let pooled = (on + off) / 2.0;
        let se = (2.0 * pooled * (1.0 - pooled) / n as f64).sqrt();
        let z = (on - off) / se;
        assert!(z > 2.326, "z = {z}, on = {on}, off = {off}");
    }

    #[test]
    fn perfect_verifier_always_accepts_correct_candidates() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects {
                verifier_tpr: 1.0,
                ..RoleEffects::default()
            },
            small_repr(),
        )
        .unwrap();
        let task = task_of(0, 9);
        let mut transcript = Transcript::new(task, query_text(&task));
        transcript.push(TurnRecord {
            turn: 1,
            agent: 1,
            role: Role::Worker,
            output: "candidate".into(),
            judgment: None,
            diagnosis: None,
            candidate: Some(true),
            advisory_role: None,
        });
        let mut rng = RngStream::root(8);
        for _ in 0..100 {
            let reply = env.respond(2, Role::Verifier, "", &transcript, &mut rng).unwrap();
            assert_eq!(reply.judgment, Some(Judgment::Accept));
            assert!(reply.message.contains("JUDGMENT: ACCEPT"));
        }
    }

    #[test]
    fn out_of_range_agent_is_rejected() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects::default(),
            small_repr(),
        )
        .unwrap();
        let task = task_of(0, 1);
        let transcript = Transcript::new(task, query_text(&task));
        let err = env
            .respond(7, Role::Worker, "", &transcript, &mut RngStream::root(1))
            .unwrap_err();
        assert_eq!(err, BackendError::InvalidAgent { agent: 7, count: 7 });
    }

    /// With role effects off, one forced Worker turn, and a pinned task type,
    /// episode rewards converge to the competence entry.
    #[test]
    fn episode_rewards_converge_to_competence() {
        let env = SimEnv::new(
            CompetenceMatrix::preset_table2(),
            RoleEffects {
                thinker_bonus: 0.0,
                verifier_tpr: 0.5,
                verifier_tnr: 0.5,
                turn_cost: 0.0,
            },
            small_repr(),
        )
        .unwrap()
        .with_mixture(vec![0.0, 1.0, 0.0, 0.0])
        .unwrap()
        .with_difficulty_spread(0.0)
        .unwrap();
        let (y, x) = (1, 2);
        let expected = env.matrix().get(y, x); // 0.358
        let cfg = HeadConfig {
            d_h: 64,
            agents: 7,
            ..HeadConfig::default()
        };
        let mut rng = RngStream::root(70);
        let head = Head::init(HeadKind::Linear, &cfg, &mut rng).unwrap();
        let opts = EpisodeOptions {
            max_turns: 1,
            fixed_agent: Some(x),
            no_tri_role: true,
            ..EpisodeOptions::default()
        };
        let n = 10_000u64;
        let mut ledger = BudgetLedger::new(n);
        let mut total = 0.0;
        for i in 0..n {
            let mut ep_rng = RngStream::root(500).derive(i);
            let task = env.sample_task(&mut ep_rng);
            let traj =
                run_episode(&head, &env, &env, &task, &opts, &mut ledger, &mut ep_rng).unwrap();
            assert_eq!(traj.horizon(), 1);
            total += traj.reward;
        }
        assert_eq!(ledger.consumed(), n);
        let mean = total / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected}");
    }

    #[test]
    fn all_zero_competence_means_zero_reward() {
        let zeros = CompetenceMatrix::new(
            vec!["t".into()],
            vec!["a".into(), "b".into()],
            vec![0.0, 0.0],
        )
        .unwrap();
        let effects = RoleEffects {
            thinker_bonus: 0.0,
            ..RoleEffects::default()
        };
        let env = SimEnv::new(zeros, effects, small_repr())
            .unwrap()
            .with_difficulty_spread(0.0)
            .unwrap();
        let cfg = HeadConfig {
            d_h: 64,
            agents: 2,
            ..HeadConfig::default()
        };
        let mut rng = RngStream::root(71);
        let head = Head::init(HeadKind::Linear, &cfg, &mut rng).unwrap();
        let mut ledger = BudgetLedger::new(100);
        for i in 0..100u64 {
            let mut ep_rng = RngStream::root(600).derive(i);
            let task = env.sample_task(&mut ep_rng);
            let traj = run_episode(
                &head,
                &env,
                &env,
                &task,
                &EpisodeOptions::default(),
                &mut ledger,
                &mut ep_rng,
            )
            .unwrap();
            assert_eq!(traj.reward, 0.0);
        }
    }

    #[test]
    fn query_text_names_the_instance() {
        let t = task_of(2, 0xabcd);
        let q = query_text(&t);
        assert!(q.contains("type 2"));
        assert!(q.contains("000000000000abcd"));
    }
}
