use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::artifacts::RejectedArtifact;
use super::feedback::{FeedbackPacket, Memory};
use crate::digest::{canonical_json, sha256_hex};
use crate::manifest::{Action, RemotePlannerConfig, RunManifest, ScriptEntry};

/// Environment variable holding the remote planner credential.
pub const API_KEY_VAR: &str = "RULEGROUND_PLANNER_API_KEY";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("planner script exhausted")]
    ScriptExhausted,
    #[error("planner transport failed: {0}")]
    Transport(String),
    #[error("remote planner credential `{API_KEY_VAR}` is not set")]
    MissingCredentials,
    #[error("remote planner is not configured in the manifest")]
    NotConfigured,
}

/// Discovery-visible state handed to a planner.
pub struct PlanningContext<'a> {
    pub round: u32,
    pub manifest: &'a RunManifest,
    pub feedback: Option<&'a FeedbackPacket>,
    pub memory: &'a Memory,
    pub frontier_families: &'a [String],
    pub frontier_summary: &'a [String],
    /// Set when the previous attempt this round was rejected.
    pub rejection: Option<&'a RejectedArtifact>,
}

/// One archived request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerExchange {
    pub role: String,
    pub request: String,
    pub response: String,
    pub request_digest: String,
    pub response_digest: String,
}

impl PlannerExchange {
    fn new(role: &str, request: String, response: String) -> PlannerExchange {
        PlannerExchange {
            role: role.to_string(),
            request_digest: sha256_hex(&request),
            response_digest: sha256_hex(&response),
            request,
            response,
        }
    }
}

/// Raw role outputs; nothing here has been validated yet.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerResponse {
    pub strategist: String,
    pub proposer: String,
    pub exchanges: Vec<PlannerExchange>,
}

pub trait Planner {
    fn plan(&mut self, ctx: &PlanningContext) -> Result<PlannerResponse, PlannerError>;
    fn kind(&self) -> &'static str;
}

/// Deterministic planner replaying a manifest script and reacting to the
/// previous round's action.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    script: Vec<ScriptEntry>,
    cursor: usize,
    last: Option<(Value, Value)>,
}

impl ScriptedPlanner {
    pub fn new(script: Vec<ScriptEntry>) -> ScriptedPlanner {
        ScriptedPlanner {
            script,
            cursor: 0,
            last: None,
        }
    }

    pub fn from_manifest(manifest: &RunManifest) -> ScriptedPlanner {
        ScriptedPlanner::new(manifest.planner.script.clone())
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    fn entry(&self, i: usize) -> Result<(Value, Value), PlannerError> {
        self.script
            .get(i)
            .map(|e| (e.strategist.clone(), e.proposer.clone()))
            .ok_or(PlannerError::ScriptExhausted)
    }
}

fn set_prefer(strategist: &mut Value, prefer: &[String]) {
    if let Some(tp) = strategist.get_mut("target_preference").and_then(Value::as_object_mut) {
        tp.insert("prefer".into(), json!(prefer));
    }
}

impl Planner for ScriptedPlanner {
    fn plan(&mut self, ctx: &PlanningContext) -> Result<PlannerResponse, PlannerError> {
        let next = match (&self.last, ctx.rejection, ctx.feedback.map(|f| f.action)) {
            (Some(last), Some(_), _) => last.clone(),
            (None, _, _) | (_, _, None) => self.entry(self.cursor)?,
            (Some(_), None, Some(Action::Replace)) => {
                let e = self.entry(self.cursor + 1)?;
                self.cursor += 1;
                e
            }
            (Some(last), None, Some(Action::Broaden)) => {
                let mut s = last.0.clone();
                set_prefer(&mut s, &[]);
                (s, last.1.clone())
            }
            (Some(last), None, Some(Action::Narrow)) => {
                let mut s = last.0.clone();
                set_prefer(&mut s, ctx.frontier_families);
                (s, last.1.clone())
            }
            (Some(last), None, Some(Action::Preserve)) => last.clone(),
        };
        self.last = Some(next.clone());
        Ok(PlannerResponse {
            strategist: canonical_json(&next.0),
            proposer: canonical_json(&next.1),
            exchanges: Vec::new(),
        })
    }

    fn kind(&self) -> &'static str {
        "scripted"
    }
}

/// Sends one JSON body and returns the response body.
pub trait Transport {
    fn post(&self, endpoint: &str, api_key: &str, body: &str, timeout: Duration) -> Result<String, String>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(&self, endpoint: &str, api_key: &str, body: &str, timeout: Duration) -> Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut resp = agent
            .post(endpoint)
            .header("Authorization", &format!("Bearer {api_key}"))
            .content_type("application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

const STRATEGIST_INSTRUCTION: &str = "You are the strategist. Propose one bounded search direction for rule \
discovery. Reply with a JSON object with exactly the fields direction, status \
(source_supported|model_suggested|feedback_derived), knowledge_ids, grounding_cues, \
target_preference {prefer, avoid}, control_adjustment [{param, delta, reason}], rationale. \
Cite only the listed knowledge ids. Do not claim validation success or report statistics.";

const PROPOSER_INSTRUCTION: &str = "You are the proposer. Map the direction's cues to the listed schema \
features. Reply with a JSON object with exactly the fields semantic_matches [{cue, features, \
windows}], grounding_map {cue: {literal_keys, status}}, candidate_literals [{feature, op, \
value_source}], seed_candidates, invalid_combinations [{cue, reason}], feature_proposals \
[{request, reason}], safety {uses_forbidden_field}. Use only listed features. List every \
unresolved cue in invalid_combinations.";

/// Chat-completions planner at temperature 0 with JSON response mode.
pub struct RemotePlanner {
    cfg: RemotePlannerConfig,
    api_key: String,
    transport: Box<dyn Transport>,
}

impl RemotePlanner {
    pub fn new(cfg: RemotePlannerConfig, api_key: String, transport: Box<dyn Transport>) -> RemotePlanner {
        RemotePlanner { cfg, api_key, transport }
    }

    /// Reads the credential from the environment and uses HTTPS transport.
    pub fn from_env(manifest: &RunManifest) -> Result<RemotePlanner, PlannerError> {
        let cfg = manifest.planner.remote.clone().ok_or(PlannerError::NotConfigured)?;
        let key = std::env::var(API_KEY_VAR).map_err(|_| PlannerError::MissingCredentials)?;
        Ok(RemotePlanner::new(cfg, key, Box::new(UreqTransport)))
    }

    fn call(&self, role: &str, instruction: &str, context: &Value) -> Result<PlannerExchange, PlannerError> {
        let body = canonical_json(&json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": instruction},
                {"role": "user", "content": canonical_json(context)},
            ],
        }));
        let timeout = Duration::from_secs(self.cfg.timeout_secs);
        let mut last_err = String::new();
        for _ in 0..=self.cfg.retries {
            match self.transport.post(&self.cfg.endpoint, &self.api_key, &body, timeout) {
                Ok(text) => return Ok(PlannerExchange::new(role, body, text)),
                Err(e) => last_err = e,
            }
        }
        Err(PlannerError::Transport(last_err))
    }
}

/// Message content of a chat-completions response, or the raw body when
/// the response has another shape (the artifact gate then rejects it).
pub fn message_content(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/choices/0/message/content").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

fn context_json(ctx: &PlanningContext) -> Value {
    let m = ctx.manifest;
    let schema: Vec<Value> = m
        .schema
        .iter()
        .filter(|v| !m.is_leaky(&v.name))
        .map(|v| json!({"name": v.name, "kind": v.kind, "family": v.family, "windows": v.windows}))
        .collect();
    let knowledge: Vec<Value> = m
        .knowledge_records
        .iter()
        .map(|k| json!({"id": k.id, "statement": k.statement, "scope": k.scope}))
        .collect();
    json!({
        "round": ctx.round,
        "scenario_id": m.scenario_id,
        "schema": schema,
        "knowledge_records": knowledge,
        "max_rule_len": m.control_bounds.max_rule_len,
        "feedback": ctx.feedback,
        "memory": ctx.memory,
        "frontier": ctx.frontier_summary,
        "rejection": ctx.rejection.map(|r| &r.reasons),
    })
}

impl Planner for RemotePlanner {
    fn plan(&mut self, ctx: &PlanningContext) -> Result<PlannerResponse, PlannerError> {
        let mut context = context_json(ctx);
        let s = self.call("strategist", STRATEGIST_INSTRUCTION, &context)?;
        let strategist = message_content(&s.response);
        context["direction"] = serde_json::from_str(&strategist).unwrap_or(Value::String(strategist.clone()));
        let p = self.call("proposer", PROPOSER_INSTRUCTION, &context)?;
        let proposer = message_content(&p.response);
        Ok(PlannerResponse {
            strategist,
            proposer,
            exchanges: vec![s, p],
        })
    }

    fn kind(&self) -> &'static str {
        "remote"
    }
}
