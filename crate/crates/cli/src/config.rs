//! Experiment configuration: one TOML document of nested sections with
//! key=value pairs. Every key has a default, unknown keys are rejected, and
//! the resolved document can be written back out verbatim so a finished run
//! can be replayed from its own echo.
//!
//! Grammar (all sections and keys optional unless stated):
//!
//! ```toml
//! [env]
//! preset = "table2"          # built-in competence matrix
//! csv = "matrix.csv"         # overrides preset when present
//! difficulty_spread = 0.2    # per-instance success shift, in [0, 0.2]
//! mixture = [1, 1, 1, 1]     # task-type weights, one per type
//! thinker_bonus = 0.15
//! verifier_tpr = 0.9
//! verifier_tnr = 0.9
//! turn_cost = 1.0
//! remote_endpoint = "http://host:port"   # route agent calls over HTTP
//! remote_timeout_ms = 10000
//! remote_retries = 2
//!
//! [env.repr]
//! d_h = 1024                 # representation width, shared with the head
//! center_seed = 7001
//! center_scale = 1.0
//! sep_scale = 3.0
//! noise_scale = 1.0
//! phase_scale = 1.0
//! degraded_factor = 0.3
//!
//! [head]
//! kind = "linear"            # linear | sparse | low_rank | block_diagonal
//! blocks = 10                # block_diagonal only
//! rank = 14                  # low_rank bottleneck
//! output_mode = "softmax"    # softmax | argmax
//! tie_break = "uniform"      # uniform | lowest_index
//! repr_scale = true          # learnable per-dimension input multipliers
//! elu_alpha = 0.1
//! fixed_scale = 1.0
//! gumbel_temperature = 10.5
//!
//! [trainer]
//! algorithm = "sepcma"       # sepcma | rs | reinforce | sft
//! b_env = 20480              # episode budget, 16*32*40 by default
//! m_cma = 16
//! m_rs = 32
//! sigma0 = 0.5
//! lambda = 32                # optional population override
//! band = [-0.5, 0.5]         # random-search sampling interval
//! reinforce_lr = 0.02
//! reinforce_baseline = false
//! sft_lr = 1e-6
//! sft_batch = 64
//! sft_epochs = 1
//! sft_label_seeds = 3
//!
//! [episode]
//! max_turns = 5
//! max_chars = 2000
//!
//! [run]
//! seeds = [1, 2, 3]
//! eval_episodes = 2000
//! mode = "train"             # train | compare; set by the command that
//!                            # wrote the echo, read back by replay
//!
//! [ablation]
//! no_repr_scale = false
//! no_thinker = false
//! no_tri_role = false
//! fixed_agent = 3            # optional agent pin
//! last_token_analog = false  # degraded representation variant
//!
//! [selection]
//! preset = "table2"
//! csv = "matrix.csv"
//! y_max = 4                  # dataset cap, defaults to all rows
//! x_max = 7                  # model cap, defaults to all columns
//! frontier_q = 0.95          # optional pre-pruning percentile
//!
//! [theory]
//! n = 64
//! block = 8
//! eps = 0.05
//! gamma = 0.5
//! sigma0 = 0.15
//! t = 10
//! recombination_trials = 20000
//! attenuation_m = 16
//! attenuation_trials = 3000
//!
//! [probe]
//! d = 16
//! classes = 4
//! clusters = 1
//! per_class = 60
//! levels = 8
//! level_base = 0.05
//! level_factor = 1.8
//! seeds = 3
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use trinity_core::heads::{HeadConfig, HeadKind, OutputMode, TieBreak};
use trinity_core::simenv::{CompetenceMatrix, ReprConfig, ReprVariant, RoleEffects, SimEnv};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprSection {
    pub d_h: usize,
    pub center_seed: u64,
    pub center_scale: f64,
    pub sep_scale: f64,
    pub noise_scale: f64,
    pub phase_scale: f64,
    pub degraded_factor: f64,
}

impl Default for ReprSection {
    fn default() -> Self {
        let r = ReprConfig::default();
        ReprSection {
            d_h: r.d_h,
            center_seed: r.center_seed,
            center_scale: r.center_scale,
            sep_scale: r.sep_scale,
            noise_scale: r.noise_scale,
            phase_scale: r.phase_scale,
            degraded_factor: r.degraded_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    pub difficulty_spread: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<f64>>,
    pub thinker_bonus: f64,
    pub verifier_tpr: f64,
    pub verifier_tnr: f64,
    pub turn_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_endpoint: Option<String>,
    pub remote_timeout_ms: u64,
    pub remote_retries: u32,
    pub repr: ReprSection,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = RoleEffects::default();
        EnvSection {
            preset: "table2".into(),
            csv: None,
            difficulty_spread: trinity_core::simenv::DEFAULT_DIFFICULTY_SPREAD,
            mixture: None,
            thinker_bonus: e.thinker_bonus,
            verifier_tpr: e.verifier_tpr,
            verifier_tnr: e.verifier_tnr,
            turn_cost: e.turn_cost,
            remote_endpoint: None,
            remote_timeout_ms: 10_000,
            remote_retries: 2,
            repr: ReprSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub kind: String,
    pub blocks: usize,
    pub rank: usize,
    pub output_mode: String,
    pub tie_break: String,
    /// The full model trains these input multipliers; the no_repr_scale
    /// ablation strips them.
    #[serde(default = "d_true")]
    pub repr_scale: bool,
    pub elu_alpha: f64,
    pub fixed_scale: f64,
    pub gumbel_temperature: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        HeadSection {
            kind: "linear".into(),
            blocks: 10,
            rank: h.r,
            output_mode: "softmax".into(),
            tie_break: "uniform".into(),
            repr_scale: true,
            elu_alpha: h.elu_alpha,
            fixed_scale: h.fixed_scale,
            gumbel_temperature: h.gumbel_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub algorithm: String,
    pub b_env: u64,
    pub m_cma: usize,
    pub m_rs: usize,
    pub sigma0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<usize>,
    pub band: Vec<f64>,
    pub reinforce_lr: f64,
    pub reinforce_baseline: bool,
    pub sft_lr: f64,
    pub sft_batch: usize,
    pub sft_epochs: usize,
    pub sft_label_seeds: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            algorithm: "sepcma".into(),
            b_env: 16 * 32 * 40,
            m_cma: 16,
            m_rs: 32,
            sigma0: 0.5,
            lambda: None,
            band: vec![-0.5, 0.5],
            reinforce_lr: 0.02,
            reinforce_baseline: false,
            sft_lr: 1e-6,
            sft_batch: 64,
            sft_epochs: 1,
            sft_label_seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub max_turns: usize,
    pub max_chars: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            max_turns: 5,
            max_chars: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    /// Which command wrote this config's echo; replay dispatches on it.
    pub mode: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1, 2, 3],
            eval_episodes: 2000,
            mode: "train".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub no_repr_scale: bool,
    pub no_thinker: bool,
    pub no_tri_role: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_agent: Option<usize>,
    pub last_token_analog: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frontier_q: Option<f64>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            preset: "table2".into(),
            csv: None,
            y_max: None,
            x_max: None,
            frontier_q: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub n: usize,
    /// Coordinates per separable block.
    pub block: usize,
    pub eps: f64,
    pub gamma: f64,
    pub sigma0: f64,
    /// Generations for the budget-matched comparison.
    pub t: usize,
    pub recombination_trials: usize,
    pub attenuation_m: usize,
    pub attenuation_trials: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            n: 64,
            block: 8,
            eps: 0.05,
            gamma: 0.5,
            sigma0: 0.15,
            t: 10,
            recombination_trials: 20_000,
            attenuation_m: 16,
            attenuation_trials: 3_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub d: usize,
    pub classes: usize,
    pub clusters: usize,
    pub per_class: usize,
    pub levels: usize,
    pub level_base: f64,
    pub level_factor: f64,
    pub seeds: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            d: 16,
            classes: 4,
            clusters: 1,
            per_class: 60,
            levels: 8,
            level_base: 0.05,
            level_factor: 1.8,
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub head: HeadSection,
    pub trainer: TrainerSection,
    pub episode: EpisodeSection,
    pub run: RunSection,
    pub ablation: AblationSection,
    pub selection: SelectionSection,
    pub theory: TheorySection,
    pub probe: ProbeSection,
}

pub const ALGORITHMS: [&str; 4] = ["sepcma", "rs", "reinforce", "sft"];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical echo; parsing it back yields an identical config.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.trainer;
        if !ALGORITHMS.contains(&t.algorithm.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown trainer algorithm \"{}\"; expected one of {ALGORITHMS:?}",
                t.algorithm
            )));
        }
        if self.env.csv.is_none() && self.env.preset != "table2" {
            return Err(ConfigError::Invalid(format!(
                "unknown env preset \"{}\"",
                self.env.preset
            )));
        }
        if t.b_env == 0 {
            return Err(ConfigError::Invalid("b_env must be positive".into()));
        }
        if t.m_cma == 0 || t.m_rs == 0 {
            return Err(ConfigError::Invalid("replication counts must be positive".into()));
        }
        if t.band.len() != 2 || !t.band.iter().all(|b| b.is_finite()) || t.band[0] > t.band[1] {
            return Err(ConfigError::Invalid(format!(
                "band must be [lo, hi] with lo <= hi, got {:?}",
                t.band
            )));
        }
        if t.sft_label_seeds == 0 || t.sft_batch == 0 || t.sft_epochs == 0 {
            return Err(ConfigError::Invalid("sft sizes must be positive".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        if self.run.eval_episodes == 0 {
            return Err(ConfigError::Invalid("eval_episodes must be positive".into()));
        }
        if !matches!(self.run.mode.as_str(), "train" | "compare") {
            return Err(ConfigError::Invalid(format!(
                "unknown run mode \"{}\"; expected train or compare",
                self.run.mode
            )));
        }
        if self.episode.max_turns == 0 {
            return Err(ConfigError::Invalid("max_turns must be at least 1".into()));
        }
        self.head_kind()?;
        self.parse_output_mode()?;
        self.parse_tie_break()?;

        // Gradient trainers differentiate the sampled policy; anything that
        // pins or masks actions breaks that correspondence.
        let gradient = matches!(t.algorithm.as_str(), "reinforce" | "sft");
        let a = &self.ablation;
        if gradient && a.fixed_agent.is_some() {
            return Err(ConfigError::Invalid(format!(
                "fixed_agent pins the agent choice, so \"{}\" has no agent logits to train",
                t.algorithm
            )));
        }
        if t.algorithm == "reinforce" {
            if a.no_thinker || a.no_tri_role {
                return Err(ConfigError::Invalid(
                    "role-masking ablations constrain the policy away from the \
                     distribution reinforce differentiates"
                        .into(),
                ));
            }
            if self.head.output_mode != "softmax" {
                return Err(ConfigError::Invalid(
                    "reinforce needs the softmax output mode".into(),
                ));
            }
        }
        if gradient && self.head.kind == "sparse" {
            return Err(ConfigError::Invalid(
                "sparse heads have no analytic parameter gradient".into(),
            ));
        }
        Ok(())
    }

    pub fn head_kind(&self) -> Result<HeadKind, ConfigError> {
        match self.head.kind.as_str() {
            "linear" => Ok(HeadKind::Linear),
            "sparse" => Ok(HeadKind::Sparse),
            "low_rank" => Ok(HeadKind::LowRank),
            "block_diagonal" => Ok(HeadKind::BlockDiagonal(self.head.blocks)),
            other => Err(ConfigError::Invalid(format!(
                "unknown head kind \"{other}\"; expected linear, sparse, low_rank, or block_diagonal"
            ))),
        }
    }

    fn parse_output_mode(&self) -> Result<OutputMode, ConfigError> {
        match self.head.output_mode.as_str() {
            "softmax" => Ok(OutputMode::Softmax),
            "argmax" => Ok(OutputMode::Argmax),
            other => Err(ConfigError::Invalid(format!(
                "unknown output mode \"{other}\""
            ))),
        }
    }

    fn parse_tie_break(&self) -> Result<TieBreak, ConfigError> {
        match self.head.tie_break.as_str() {
            "uniform" => Ok(TieBreak::UniformRandom),
            "lowest_index" => Ok(TieBreak::LowestIndex),
            other => Err(ConfigError::Invalid(format!("unknown tie break \"{other}\""))),
        }
    }

    pub fn competence_matrix(&self) -> Result<CompetenceMatrix, ConfigError> {
        match &self.env.csv {
            Some(path) => {
                let file = fs::File::open(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                CompetenceMatrix::from_csv(file).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            None => Ok(CompetenceMatrix::preset_table2()),
        }
    }

    /// Build the simulated environment, honoring the degraded-representation
    /// ablation.
    pub fn build_env(&self) -> Result<SimEnv, ConfigError> {
        let matrix = self.competence_matrix()?;
        let effects = RoleEffects {
            thinker_bonus: self.env.thinker_bonus,
            verifier_tpr: self.env.verifier_tpr,
            verifier_tnr: self.env.verifier_tnr,
            turn_cost: self.env.turn_cost,
        };
        let r = &self.env.repr;
        let repr = ReprConfig {
            d_h: r.d_h,
            center_seed: r.center_seed,
            center_scale: r.center_scale,
            sep_scale: r.sep_scale,
            noise_scale: r.noise_scale,
            phase_scale: r.phase_scale,
            degraded_factor: r.degraded_factor,
            variant: if self.ablation.last_token_analog {
                ReprVariant::Degraded
            } else {
                ReprVariant::Contextual
            },
        };
        let mut env = SimEnv::new(matrix, effects, repr)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?
            .with_difficulty_spread(self.env.difficulty_spread)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(weights) = &self.env.mixture {
            env = env
                .with_mixture(weights.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(env)
    }

    /// Head configuration against a given agent pool size. The repr_scale
    /// switch is the head setting minus the ablation override.
    pub fn head_config(&self, agents: usize) -> Result<HeadConfig, ConfigError> {
        let output_mode = self.parse_output_mode()?;
        let tie_break = self.parse_tie_break()?;
        Ok(HeadConfig {
            d_h: self.env.repr.d_h,
            agents,
            r: self.head.rank,
            elu_alpha: self.head.elu_alpha,
            fixed_scale: self.head.fixed_scale,
            gumbel_temperature: self.head.gumbel_temperature,
            output_mode,
            tie_break,
            repr_scale_enabled: self.head.repr_scale && !self.ablation.no_repr_scale,
        })
    }

    pub fn selection_matrix(&self) -> Result<CompetenceMatrix, ConfigError> {
        match &self.selection.csv {
            Some(path) => {
                let file = fs::File::open(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                CompetenceMatrix::from_csv(file).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            None => {
                if self.selection.preset != "table2" {
                    return Err(ConfigError::Invalid(format!(
                        "unknown selection preset \"{}\"",
                        self.selection.preset
                    )));
                }
                Ok(CompetenceMatrix::preset_table2())
            }
        }
    }
}
