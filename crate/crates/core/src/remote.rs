//! HTTP client presenting a remote agent service as an agent pool. One
//! coordination turn maps to one POST {endpoint}/v1/respond carrying the
//! agent index, role, query, prior turns, and a reply-length hint; the
//! server answers with a single message. Transport failures are retried,
//! protocol failures are not.

use serde_json::json;

use crate::coordination::{parse_judgment, AgentBackend, AgentReply, BackendError, Role, Transcript};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteBackendConfig {
    /// Base URL, scheme and authority only; the path is fixed.
    pub endpoint: String,
    /// Pool size the server exposes.
    pub agents: usize,
    /// Whole-request timeout per attempt.
    pub timeout_ms: u64,
    /// Extra attempts after a timeout or network failure.
    pub retries: u32,
    /// Reply-length hint forwarded to the server; the episode loop enforces
    /// its own truncation regardless.
    pub max_chars: usize,
}

impl RemoteBackendConfig {
    pub fn new(endpoint: impl Into<String>, agents: usize) -> Self {
        RemoteBackendConfig {
            endpoint: endpoint.into(),
            agents,
            timeout_ms: 10_000,
            retries: 2,
            max_chars: 2_000,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteBackendConfig,
    agent: ureq::Agent,
    url: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteBackendConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_millis(config.timeout_ms))
            .build();
        let url = format!("{}/v1/respond", config.endpoint.trim_end_matches('/'));
        RemoteBackend { config, agent, url }
    }

    pub fn config(&self) -> &RemoteBackendConfig {
        &self.config
    }

    fn classify(&self, err: ureq::Error) -> BackendError {
        match err {
            ureq::Error::Status(code, _) => BackendError::Status(code),
            ureq::Error::Transport(t) => {
                let text = t.to_string();
                if text.to_ascii_lowercase().contains("timed out") {
                    BackendError::Timeout {
                        ms: self.config.timeout_ms,
                    }
                } else {
                    BackendError::Network(text)
                }
            }
        }
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        let response = self
            .agent
            .post(&self.url)
            .send_json(body)
            .map_err(|e| self.classify(e))?;
        let value: serde_json::Value = response
            .into_json()
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        match value.get("message").and_then(serde_json::Value::as_str) {
            Some(message) => Ok(message.to_string()),
            None => Err(BackendError::MalformedResponse(
                "no string field \"message\"".into(),
            )),
        }
    }
}

impl AgentBackend for RemoteBackend {
    fn agent_count(&self) -> usize {
        self.config.agents
    }

    fn respond(
        &self,
        agent: usize,
        role: Role,
        _prompt: &str,
        transcript: &Transcript,
        _rng: &mut RngStream,
    ) -> Result<AgentReply, BackendError> {
        if agent >= self.config.agents {
            return Err(BackendError::InvalidAgent {
                agent,
                count: self.config.agents,
            });
        }
        let turns: Vec<serde_json::Value> = transcript
            .turns
            .iter()
            .map(|t| {
                json!({
                    "turn": t.turn,
                    "role": t.role,
                    "output": t.output,
                })
            })
            .collect();
        let body = json!({
            "agent": agent,
            "role": role,
            "query": transcript.query,
            "transcript": turns,
            "max_chars": self.config.max_chars,
        });

        let mut attempt = 0;
        let message = loop {
            match self.send_once(&body) {
                Ok(message) => break message,
                Err(err @ (BackendError::Timeout { .. } | BackendError::Network(_)))
                    if attempt < self.config.retries =>
                {
                    attempt += 1;
                    let _ = err;
                }
                Err(err) => return Err(err),
            }
        };

        // Latent correctness is unknowable for real agents; the reward
        // oracle has to grade the final answer on its own.
        Ok(AgentReply {
            judgment: match role {
                Role::Verifier => Some(parse_judgment(&message)),
                _ => None,
            },
            message,
            candidate: None,
            diagnosis: None,
            advisory_role: None,
        })
    }
}
