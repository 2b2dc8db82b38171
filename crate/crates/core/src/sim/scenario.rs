//! Scenario files: who shows up, when, and how they behave.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::config::ChorusConfig;
use crate::ids::{UserId, WorkerId};
use crate::recruiting::ClaimLatencyModel;
use crate::time::HOUR_MS;

use super::agent::AgentProfile;
use super::SimError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Original,
    #[default]
    Updated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "model", rename_all = "snake_case")]
#[derive(Default)]
pub enum PlatformModel {
    #[default]
    Calibrated,
    CalibratedHeavyTail,
    Fast,
    Custom(ClaimLatencyModel),
}

impl PlatformModel {
    pub fn latency_model(&self) -> ClaimLatencyModel {
        match self {
            PlatformModel::Calibrated => ClaimLatencyModel::calibrated(),
            PlatformModel::CalibratedHeavyTail => ClaimLatencyModel::calibrated_heavy_tail(),
            PlatformModel::Fast => ClaimLatencyModel::fast(),
            PlatformModel::Custom(m) => *m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WorkerGroup {
    pub count: u32,
    pub id_prefix: String,
    pub profile: AgentProfile,
}

/// One user message. `delay_ms` counts from the previous turn (or the plan
/// start). With `wait_for_reply` it counts from the first crowd reply
/// delivered after the previous turn instead, and the turn is skipped if
/// the session closes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct UserTurn {
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub wait_for_reply: bool,
    pub text: String,
}

/// Crowd side of a directed session, in ms after the session opens. Each
/// reply is proposed and voted through at its offset; rejected proposals are
/// left pending; at `submit_at_ms` two workers submit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct CrowdScript {
    pub replies_at_ms: Vec<u64>,
    #[serde(default)]
    pub rejected_at_ms: Vec<u64>,
    pub submit_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct SessionPlan {
    pub start_ms: u64,
    pub turns: Vec<UserTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crowd: Option<CrowdScript>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct UserScript {
    pub user_id: UserId,
    pub sessions: Vec<SessionPlan>,
}

/// `count` users with the same single-session script, started
/// `spacing_ms` apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct GeneratedUsers {
    pub count: u32,
    pub id_prefix: String,
    #[serde(default)]
    pub first_start_ms: u64,
    pub spacing_ms: u64,
    pub turns: Vec<UserTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AdminCommand {
    Block { user_id: UserId, reason: String },
    Unblock { user_id: UserId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct AdminAction {
    pub at_ms: u64,
    #[serde(flatten)]
    pub command: AdminCommand,
}

fn default_drain() -> u64 {
    2 * HOUR_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub seed: u64,
    /// No user activity is scheduled after this.
    pub duration_ms: u64,
    /// Extra time after `duration_ms` for sessions and retainer slots to wind
    /// down.
    #[serde(default = "default_drain")]
    pub drain_ms: u64,
    #[serde(default)]
    pub preset: Preset,
    /// Dotted config keys, e.g. `incentives.min_points_to_submit: 0`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub platform: PlatformModel,
    pub workers: Vec<WorkerGroup>,
    #[serde(default)]
    pub users: Vec<UserScript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_users: Option<GeneratedUsers>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub admin: Vec<AdminAction>,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    pub fn from_yaml(s: &str) -> Result<Self, SimError> {
        serde_yaml::from_str(s).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    /// Reads `.json`, `.yaml` or `.yml`.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::InvalidScenario(format!("{}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "yaml" | "yml" => Self::from_yaml(&text),
            _ => Self::from_json(&text),
        }
    }

    /// JSON Schema for scenario files, JSON or YAML.
    pub fn json_schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(Scenario)).expect("schema serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn config(&self) -> Result<ChorusConfig, SimError> {
        let base = match self.preset {
            Preset::Original => ChorusConfig::original_deployment(),
            Preset::Updated => ChorusConfig::updated_deployment(),
        };
        let vars = self.config.iter().map(|(k, v)| {
            let key = format!("CHORUS_{}", k.replace('.', "__").to_ascii_uppercase());
            let value = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (key, value)
        });
        base.with_overrides(vars)
            .map_err(|e| SimError::InvalidScenario(format!("config: {e}")))
    }

    pub fn worker_ids(&self) -> Vec<(WorkerId, &AgentProfile)> {
        let mut out = Vec::new();
        for g in &self.workers {
            for i in 0..g.count {
                out.push((
                    WorkerId::new(format!("{}{:03}", g.id_prefix, i + 1)),
                    &g.profile,
                ));
            }
        }
        out
    }

    /// Explicit users followed by generated ones.
    pub fn all_users(&self) -> Vec<UserScript> {
        let mut out = self.users.clone();
        if let Some(g) = &self.generated_users {
            for i in 0..g.count {
                out.push(UserScript {
                    user_id: UserId::new(format!("{}{:04}", g.id_prefix, i + 1)),
                    sessions: vec![SessionPlan {
                        start_ms: g.first_start_ms + u64::from(i) * g.spacing_ms,
                        turns: g.turns.clone(),
                        crowd: None,
                    }],
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.duration_ms == 0 {
            return bad("duration_ms must be positive".into());
        }
        if self.duration_ms > 400 * 24 * HOUR_MS {
            return bad("duration_ms is unreasonably long".into());
        }
        self.config()?;
        if let Err(e) = self.platform.latency_model().validate() {
            return bad(format!("platform: {e}"));
        }
        let mut ids = BTreeSet::new();
        for (w, p) in self.worker_ids() {
            if !ids.insert(w.clone()) {
                return bad(format!("duplicate worker id {w}"));
            }
            p.validate()
                .map_err(|e| SimError::InvalidScenario(format!("worker {w}: {e}")))?;
        }
        let mut users = BTreeSet::new();
        for u in self.all_users() {
            if !users.insert(u.user_id.clone()) {
                return bad(format!("duplicate user id {}", u.user_id));
            }
            for plan in &u.sessions {
                if plan.turns.is_empty() {
                    return bad(format!("user {}: session plan without turns", u.user_id));
                }
                if plan.turns.iter().any(|t| t.text.trim().is_empty()) {
                    return bad(format!("user {}: empty message text", u.user_id));
                }
                if plan.turns[0].wait_for_reply {
                    return bad(format!(
                        "user {}: first turn cannot wait for a reply",
                        u.user_id
                    ));
                }
                if plan.crowd.is_some() && plan.turns.iter().any(|t| t.wait_for_reply) {
                    return bad(format!(
                        "user {}: directed sessions use timed turns only",
                        u.user_id
                    ));
                }
                if plan.start_ms > self.duration_ms {
                    return bad(format!(
                        "user {}: session starts after the run ends",
                        u.user_id
                    ));
                }
            }
        }
        if let Some(g) = &self.generated_users {
            if g.turns.is_empty() || g.spacing_ms == 0 && g.count > 1 {
                return bad("generated_users needs turns and a positive spacing".into());
            }
        }
        for a in &self.admin {
            if a.at_ms > self.duration_ms {
                return bad("admin action after the run ends".into());
            }
        }
        Ok(())
    }
}
