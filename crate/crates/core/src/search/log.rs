use serde::{Deserialize, Serialize};

use super::Origin;
use crate::digest::{canonical_json, sha256_hex};

/// Terminal status of one generated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CandidateStatus {
    Accepted { effect: f64, support: usize, coverage: f64 },
    Invalid { reasons: Vec<String> },
    Duplicate,
    LowSupport { reason: String },
}

impl CandidateStatus {
    pub fn name(&self) -> &'static str {
        match self {
            CandidateStatus::Accepted { .. } => "accepted",
            CandidateStatus::Invalid { .. } => "invalid",
            CandidateStatus::Duplicate => "duplicate",
            CandidateStatus::LowSupport { .. } => "low_support",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub attempts: usize,
    pub accepted: usize,
    pub invalid_rate: f64,
    pub low_support_rate: f64,
    pub duplicate_rate: f64,
    pub diversity: f64,
    pub best_effect: Option<f64>,
    pub new_nondominated: bool,
    pub retry_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Candidate {
        generation: u32,
        rule: String,
        key: String,
        origin: Origin,
        #[serde(flatten)]
        status: CandidateStatus,
    },
    Generation(GenerationSummary),
    RetryBudgetExhausted { generation: u32, produced: usize, target: usize },
    EarlyStop { generation: u32, stagnant_generations: u32 },
}

/// Append-only record of one search run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLog {
    events: Vec<LogEvent>,
}

impl ExecutionLog {
    pub fn push(&mut self, e: LogEvent) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn candidates(&self) -> impl Iterator<Item = (&str, &CandidateStatus)> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Candidate { key, status, .. } => Some((key.as_str(), status)),
            _ => None,
        })
    }

    pub fn summaries(&self) -> impl Iterator<Item = &GenerationSummary> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Generation(s) => Some(s),
            _ => None,
        })
    }

    /// One canonical JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&canonical_json(e));
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl())
    }

    /// Share of generated candidates with each status over the whole run.
    pub fn rate(&self, status: &str) -> f64 {
        let total = self.candidates().count();
        if total == 0 {
            return 0.0;
        }
        self.candidates().filter(|(_, s)| s.name() == status).count() as f64 / total as f64
    }
}
