//! Tri-role multi-turn episode loop.
//!
//! Each turn the coordinator head looks at the current task representation,
//! picks an agent and one of three roles, and the chosen agent answers in
//! that role. A Verifier turn can end the episode early by accepting the
//! current candidate answer; otherwise the episode runs to the turn cap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetError, BudgetLedger};
use crate::heads::{convert, split_logits, Head, HeadError};
use crate::rng::RngStream;
use crate::simenv::{query_text, Task};

/// Default turn cap per episode.
pub const DEFAULT_MAX_TURNS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Thinker,
    Worker,
    Verifier,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Thinker, Role::Worker, Role::Verifier];

    /// Position of this role inside the role-logit block.
    pub fn index(self) -> usize {
        match self {
            Role::Thinker => 0,
            Role::Worker => 1,
            Role::Verifier => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Role> {
        Role::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Thinker => "thinker",
            Role::Worker => "worker",
            Role::Verifier => "verifier",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Judgment {
    Accept,
    Revise,
}

/// One executed turn. `judgment` is present exactly on Verifier turns and
/// `candidate` (the latent correctness of a proposed answer) exactly on
/// Worker turns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based turn index.
    pub turn: usize,
    pub agent: usize,
    pub role: Role,
    /// Post-processed output: truncated message text.
    pub output: String,
    pub judgment: Option<Judgment>,
    pub diagnosis: Option<String>,
    pub candidate: Option<bool>,
    /// A Thinker may suggest the next role; recorded but never binding.
    pub advisory_role: Option<Role>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub query: String,
    pub task: Task,
    pub turns: Vec<TurnRecord>,
}

impl Transcript {
    pub fn new(task: Task, query: String) -> Self {
        Transcript {
            query,
            task,
            turns: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: TurnRecord) {
        debug_assert_eq!(rec.turn, self.turns.len() + 1, "turn indices must be contiguous");
        self.turns.push(rec);
    }

    /// True once any Thinker turn has been recorded.
    pub fn thinker_seen(&self) -> bool {
        self.turns.iter().any(|t| t.role == Role::Thinker)
    }

    /// Latent correctness of the most recent candidate answer, if any.
    pub fn last_candidate(&self) -> Option<bool> {
        self.turns.iter().rev().find_map(|t| t.candidate)
    }
}

/// What a backend returns for one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentReply {
    pub message: String,
    /// Latent correctness of a candidate answer proposed this turn.
    pub candidate: Option<bool>,
    pub judgment: Option<Judgment>,
    pub diagnosis: Option<String>,
    pub advisory_role: Option<Role>,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum BackendError {
    #[error("agent index {agent} out of range for a pool of {count}")]
    InvalidAgent { agent: usize, count: usize },
    #[error("request timed out after {ms} ms")]
    Timeout { ms: u64 },
    #[error("server returned HTTP status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("network failure: {0}")]
    Network(String),
}

/// An agent pool: simulated agents or a remote HTTP service.
pub trait AgentBackend {
    fn agent_count(&self) -> usize;

    /// Produce agent `agent`'s reply for one turn in the given role.
    /// `prompt` is the fully rendered role prompt for this turn; simulated
    /// backends may ignore it and work from the structured transcript.
    fn respond(
        &self,
        agent: usize,
        role: Role,
        prompt: &str,
        transcript: &Transcript,
        rng: &mut RngStream,
    ) -> Result<AgentReply, BackendError>;
}

/// Source of per-turn representation vectors.
pub trait ReprSource {
    fn d_h(&self) -> usize;

    /// Representation the head sees before the next turn; depends on the
    /// task and on how many turns have already run.
    fn representation(&self, task: &Task, transcript: &Transcript) -> Vec<f64>;
}

/// Completed episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transcript: Transcript,
    /// Turn cap the episode ran under.
    pub max_turns: usize,
    /// Termination turn: first Verifier-accepted turn, or the cap.
    pub tau: usize,
    /// Output text of the final turn.
    pub final_answer: String,
    /// Terminal reward, 0.0 or 1.0.
    pub reward: f64,
    /// Accumulated per-turn cost units.
    pub cost: f64,
    /// Representation vector observed at each executed turn.
    pub reps: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Number of turns actually executed.
    pub fn horizon(&self) -> usize {
        self.transcript.turns.len()
    }
}

/// Role prompt wording. The defaults ship fixed strings; deployments can
/// override any of them. `{query}` and `{history}` expand at render time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub thinker: String,
    pub worker: String,
    pub verifier: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            thinker: "You are the Thinker. Study the task, lay out a short plan, and break \
                      the work into steps. Do not give a final answer.\nTask: {query}\n{history}\
                      Reply with your plan."
                .into(),
            worker: "You are the Worker. Carry out the task and produce a concrete candidate \
                     answer.\nTask: {query}\n{history}Reply with your best answer."
                .into(),
            verifier: "You are the Verifier. Check the latest candidate answer against the \
                       task. End your reply with a final line reading exactly \
                       'JUDGMENT: ACCEPT' or 'JUDGMENT: REVISE'; on REVISE, first give a \
                       one-line diagnosis.\nTask: {query}\n{history}"
                .into(),
        }
    }
}

impl PromptTemplates {
    pub fn render(&self, role: Role, transcript: &Transcript) -> String {
        let template = match role {
            Role::Thinker => &self.thinker,
            Role::Worker => &self.worker,
            Role::Verifier => &self.verifier,
        };
        let mut history = String::new();
        for t in &transcript.turns {
            history.push_str(&format!(
                "Turn {} [{} by agent {}]: {}\n",
                t.turn,
                t.role.as_str(),
                t.agent,
                t.output
            ));
        }
        template
            .replace("{query}", &transcript.query)
            .replace("{history}", &history)
    }
}

/// Render the role prompt for the next turn using the default templates.
pub fn build_prompt(role: Role, transcript: &Transcript) -> String {
    PromptTemplates::default().render(role, transcript)
}

/// Extract a Verifier verdict from free text: the last case-insensitive
/// "JUDGMENT: ACCEPT" or "JUDGMENT: REVISE" wins; absent both, REVISE.
pub fn parse_judgment(message: &str) -> Judgment {
    let lower = message.to_ascii_lowercase();
    let accept = lower.rfind("judgment: accept");
    let revise = lower.rfind("judgment: revise");
    match (accept, revise) {
        (Some(a), Some(r)) if a > r => Judgment::Accept,
        (Some(_), None) => Judgment::Accept,
        _ => Judgment::Revise,
    }
}

/// Per-episode knobs, including the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    /// Turn cap K.
    pub max_turns: usize,
    /// Character budget for post-processed outputs.
    pub max_chars: usize,
    /// Force every turn to use this agent.
    pub fixed_agent: Option<usize>,
    /// Mask the Thinker role logit.
    pub no_thinker: bool,
    /// Ignore role logits entirely: Worker every turn, except that the final
    /// turn goes to the Verifier (when the cap exceeds 1), so the arm keeps a
    /// judging step but can never use it to retry.
    pub no_tri_role: bool,
    /// Cost units accrued per executed turn.
    pub turn_cost: f64,
    pub templates: PromptTemplates,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            max_turns: DEFAULT_MAX_TURNS,
            max_chars: 2000,
            fixed_agent: None,
            no_thinker: false,
            no_tri_role: false,
            turn_cost: 1.0,
            templates: PromptTemplates::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("backend failure at turn {turn}: {source}")]
    Transport {
        turn: usize,
        source: BackendError,
        /// Turns completed before the failure.
        transcript: Transcript,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("invalid episode options: {0}")]
    InvalidOptions(String),
}

/// Pick (agent, role) for the next turn from the head's logits under the
/// configured output mode. Agent is drawn first, then role.
pub fn decide(head: &Head, h: &[f64], rng: &mut RngStream) -> Result<(usize, Role), HeadError> {
    decide_constrained(head, h, &EpisodeOptions::default(), false, rng)
}

fn decide_constrained(
    head: &Head,
    h: &[f64],
    opts: &EpisodeOptions,
    final_turn: bool,
    rng: &mut RngStream,
) -> Result<(usize, Role), HeadError> {
    let logits = head.forward_eval(h)?;
    let (agent_logits, role_logits) = split_logits(&logits, head.cfg.agents)?;
    let agent = match opts.fixed_agent {
        Some(a) => a,
        None => convert(agent_logits, head.cfg.output_mode, head.cfg.tie_break, rng)?,
    };
    let role = if opts.no_tri_role {
        if final_turn && opts.max_turns > 1 {
            Role::Verifier
        } else {
            Role::Worker
        }
    } else {
        let role_logits: Vec<f64> = if opts.no_thinker {
            let mut masked = role_logits.to_vec();
            masked[Role::Thinker.index()] = f64::NEG_INFINITY;
            masked
        } else {
            role_logits.to_vec()
        };
        let idx = convert(&role_logits, head.cfg.output_mode, head.cfg.tie_break, rng)?;
        Role::from_index(idx).expect("role index in range")
    };
    Ok((agent, role))
}

fn truncate_chars(s: String, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((byte, _)) => s[..byte].to_string(),
        None => s,
    }
}

/// Run one episode to termination.
///
/// Loop: representation, decide, prompt, respond, post-process, record.
/// Ends at the first accepted Verifier turn or at the turn cap; the reward is
/// the latent correctness of the last candidate answer on record (0 if no
/// Worker ever produced one) and charges the ledger exactly one oracle call.
/// A backend failure aborts the episode, handing back the partial transcript;
/// nothing is charged in that case.
pub fn run_episode<E, B>(
    head: &Head,
    env: &E,
    backend: &B,
    task: &Task,
    opts: &EpisodeOptions,
    ledger: &mut BudgetLedger,
    rng: &mut RngStream,
) -> Result<Trajectory, EpisodeError>
where
    E: ReprSource + ?Sized,
    B: AgentBackend + ?Sized,
{
    if opts.max_turns == 0 {
        return Err(EpisodeError::InvalidOptions("max_turns must be at least 1".into()));
    }
    if let Some(agent) = opts.fixed_agent {
        if agent >= backend.agent_count() {
            return Err(EpisodeError::InvalidOptions(format!(
                "fixed agent {agent} out of range for a pool of {}",
                backend.agent_count()
            )));
        }
    }

    let mut transcript = Transcript::new(*task, query_text(task));
    let mut reps = Vec::with_capacity(opts.max_turns);
    let mut tau = opts.max_turns;
    for k in 1..=opts.max_turns {
        let h = env.representation(task, &transcript);
        let (agent, role) = decide_constrained(head, &h, opts, k == opts.max_turns, rng)?;
        let prompt = opts.templates.render(role, &transcript);
        let reply = match backend.respond(agent, role, &prompt, &transcript, rng) {
            Ok(reply) => reply,
            Err(source) => {
                return Err(EpisodeError::Transport {
                    turn: k,
                    source,
                    transcript,
                })
            }
        };
        let output = truncate_chars(reply.message, opts.max_chars);
        let judgment = match role {
            Role::Verifier => Some(reply.judgment.unwrap_or_else(|| parse_judgment(&output))),
            _ => None,
        };
        let diagnosis = match judgment {
            Some(Judgment::Revise) => reply.diagnosis,
            _ => None,
        };
        reps.push(h);
        transcript.push(TurnRecord {
            turn: k,
            agent,
            role,
            output,
            judgment,
            diagnosis,
            candidate: if role == Role::Worker { reply.candidate } else { None },
            advisory_role: if role == Role::Thinker { reply.advisory_role } else { None },
        });
        if judgment == Some(Judgment::Accept) {
            tau = k;
            break;
        }
    }

    let reward = match transcript.last_candidate() {
        Some(true) => 1.0,
        _ => 0.0,
    };
    ledger.charge(1)?;
    let final_answer = transcript.turns.last().map(|t| t.output.clone()).unwrap_or_default();
    let cost = transcript.turns.len() as f64 * opts.turn_cost;
    Ok(Trajectory {
        transcript,
        max_turns: opts.max_turns,
        tau,
        final_answer,
        reward,
        cost,
        reps,
    })
}
