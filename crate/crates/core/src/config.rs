//! Service configuration.
//!
//! Every timeout, point value, and recruiting parameter lives here. A config
//! file (TOML) supplies the base and `CHORUS_<SECTION>__<FIELD>` environment
//! variables override individual fields, e.g.
//! `CHORUS_INCENTIVES__MIN_POINTS_TO_SUBMIT=30`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::money::{Cents, FeeSchedule, MicroDollars};
use crate::time::{MINUTE_MS, SECOND_MS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("environment override {key}: {reason}")]
    Env { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ChorusConfig {
    pub consensus: ConsensusConfig,
    pub lifecycle: LifecycleConfig,
    pub incentives: IncentiveConfig,
    pub recruiting: RecruitingConfig,
    pub gateway: GatewayConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    /// Share of workers on the page whose votes accept a proposal.
    pub acceptance_percent: u32,
    /// A worker counts as on the page if seen within this window.
    pub heartbeat_window_ms: u64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            acceptance_percent: 40,
            heartbeat_window_ms: 30 * SECOND_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifecycleConfig {
    /// Idle limit before the handshake completes, measured from creation.
    pub pre_handshake_timeout_ms: u64,
    /// Idle limit after the handshake, measured from the last user message.
    pub post_handshake_timeout_ms: u64,
    /// Voluntary submissions that end a session.
    pub submissions_to_close: u32,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            pre_handshake_timeout_ms: 45 * MINUTE_MS,
            post_handshake_timeout_ms: 15 * MINUTE_MS,
            submissions_to_close: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointValues {
    pub propose: u32,
    pub vote: u32,
    pub proposal_accepted: u32,
    pub post_fact: u32,
    pub waiting: u32,
}

impl Default for PointValues {
    fn default() -> Self {
        Self {
            propose: 2,
            vote: 1,
            proposal_accepted: 5,
            post_fact: 2,
            waiting: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncentiveConfig {
    pub points_per_action: PointValues,
    pub waiting_interval_ms: u64,
    pub min_points_to_submit: u32,
    pub bonus_per_point: MicroDollars,
    pub base_pay_per_assignment: Cents,
}

impl Default for IncentiveConfig {
    fn default() -> Self {
        Self {
            points_per_action: PointValues::default(),
            waiting_interval_ms: 30 * SECOND_MS,
            min_points_to_submit: 40,
            bonus_per_point: MicroDollars(5_000),
            base_pay_per_assignment: Cents(20),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecruitingPolicy {
    /// Post `target_crowd_size` assignments per session; never dispatch
    /// from the retainer.
    Static,
    /// Dispatch waiting retainer workers first and post only the shortfall.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecruitingConfig {
    pub policy: RecruitingPolicy,
    pub target_crowd_size: u32,
    pub max_assignments_per_hit: u32,
    pub base_pay: Cents,
    pub retainer_duration_ms: u64,
    pub dispatch_promise_ms: u64,
    /// Missed pings tolerated before a retainer assignment is expired.
    pub max_strikes: u32,
    /// Send workers who closed a session below the submission minimum back
    /// to the retainer instead of finishing their assignment.
    pub return_under_minimum_to_retainer: bool,
    /// Fee for retainer waiting pay.
    pub retainer_fee_percent: u32,
    pub fee_schedule: FeeSchedule,
}

impl Default for RecruitingConfig {
    fn default() -> Self {
        Self {
            policy: RecruitingPolicy::Dynamic,
            target_crowd_size: 10,
            max_assignments_per_hit: 100,
            base_pay: Cents(20),
            retainer_duration_ms: 30 * MINUTE_MS,
            dispatch_promise_ms: 20 * SECOND_MS,
            max_strikes: 2,
            return_under_minimum_to_retainer: true,
            retainer_fee_percent: 20,
            fee_schedule: FeeSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoReplyPool {
    pub welcome_messages: Vec<String>,
    pub wait_messages: Vec<String>,
    pub rng_seed: u64,
}

impl Default for AutoReplyPool {
    fn default() -> Self {
        Self {
            welcome_messages: vec![
                "Hi! Welcome to Chorus. Ask me anything and I'll do my best to help.".into(),
                "Hello and welcome! I'm your assistant, just tell me what you need.".into(),
            ],
            wait_messages: vec![
                "What can I help you with? I'll be able to chat in a few minutes.".into(),
                "Please wait for a few minutes...".into(),
                "Got it! Give me a moment, I'll be with you shortly.".into(),
            ],
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub auto_reply: AutoReplyPool,
    pub admin_token: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            auto_reply: AutoReplyPool::default(),
            admin_token: "change-me".into(),
        }
    }
}

impl ChorusConfig {
    /// The configuration the service was first deployed with: ten
    /// assignments per session, no retainer dispatch, no return to retainer.
    pub fn original_deployment() -> Self {
        let mut c = Self::default();
        c.recruiting.policy = RecruitingPolicy::Static;
        c.recruiting.return_under_minimum_to_retainer = false;
        c
    }

    /// Retainer-aware sizing and return-to-retainer, the later deployment.
    pub fn updated_deployment() -> Self {
        Self::default()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ChorusConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a TOML file (if given) and applies `CHORUS_*` overrides from
    /// the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        let cfg = Self::from_toml_str(&base)?;
        cfg.with_overrides(std::env::vars())
    }

    /// Applies `CHORUS_SECTION__FIELD[__SUBFIELD]=value` overrides. Values
    /// are parsed as TOML scalars, falling back to plain strings.
    pub fn with_overrides<I, K, V>(self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree =
            toml::Value::try_from(&self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut touched = false;
        for (key, value) in vars {
            let key = key.as_ref();
            let Some(rest) = key.strip_prefix("CHORUS_") else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
            let parsed = parse_scalar(value.as_ref());
            set_path(&mut tree, &path, parsed).map_err(|reason| ConfigError::Env {
                key: key.to_owned(),
                reason,
            })?;
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        let cfg: ChorusConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.consensus.acceptance_percent == 0 || self.consensus.acceptance_percent > 100 {
            return bad("consensus.acceptance_percent must be in 1..=100");
        }
        if self.incentives.waiting_interval_ms == 0 {
            return bad("incentives.waiting_interval_ms must be positive");
        }
        if self.incentives.base_pay_per_assignment != self.recruiting.base_pay {
            return bad("incentives.base_pay_per_assignment must equal recruiting.base_pay");
        }
        if self.incentives.base_pay_per_assignment.0 < 0 {
            return bad("base pay must be non-negative");
        }
        if self.lifecycle.submissions_to_close == 0 {
            return bad("lifecycle.submissions_to_close must be positive");
        }
        if self.recruiting.max_assignments_per_hit == 0 {
            return bad("recruiting.max_assignments_per_hit must be positive");
        }
        if self.recruiting.max_strikes == 0 {
            return bad("recruiting.max_strikes must be positive");
        }
        let pool = &self.gateway.auto_reply;
        if pool.welcome_messages.is_empty() || pool.wait_messages.is_empty() {
            return bad("auto-reply pools must be non-empty");
        }
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_path(tree: &mut toml::Value, path: &[String], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = tree;
    for p in parents {
        node = node
            .get_mut(p.as_str())
            .ok_or_else(|| format!("unknown section `{p}`"))?;
    }
    let table = node.as_table_mut().ok_or("not a section")?;
    match table.get(last.as_str()) {
        None => Err(format!("unknown field `{last}`")),
        Some(existing) => {
            // Integers written as `30` must not turn into strings, and a
            // string field given `true` should stay a string.
            let value = match (existing, value) {
                (toml::Value::String(_), v) if !v.is_str() => toml::Value::String(v.to_string()),
                (_, v) => v,
            };
            table.insert(last.clone(), value);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ChorusConfig::default().validate().unwrap();
        ChorusConfig::original_deployment().validate().unwrap();
        assert_eq!(
            ChorusConfig::original_deployment().recruiting.policy,
            RecruitingPolicy::Static
        );
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = ChorusConfig::from_toml_str(
            "[incentives]\nmin_points_to_submit = 25\n[recruiting]\npolicy = \"static\"\n",
        )
        .unwrap();
        assert_eq!(cfg.incentives.min_points_to_submit, 25);
        assert_eq!(cfg.recruiting.policy, RecruitingPolicy::Static);
        assert_eq!(cfg.lifecycle.post_handshake_timeout_ms, 15 * MINUTE_MS);
        let s = toml::to_string(&cfg).unwrap();
        assert_eq!(ChorusConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn env_overrides() {
        let cfg = ChorusConfig::default()
            .with_overrides([
                ("CHORUS_INCENTIVES__MIN_POINTS_TO_SUBMIT", "30"),
                ("CHORUS_RECRUITING__POLICY", "static"),
                ("CHORUS_GATEWAY__ADMIN_TOKEN", "12345"),
                ("CHORUS_INCENTIVES__POINTS_PER_ACTION__VOTE", "3"),
                ("PATH", "/usr/bin"),
            ])
            .unwrap();
        assert_eq!(cfg.incentives.min_points_to_submit, 30);
        assert_eq!(cfg.recruiting.policy, RecruitingPolicy::Static);
        assert_eq!(cfg.gateway.admin_token, "12345");
        assert_eq!(cfg.incentives.points_per_action.vote, 3);

        let err = ChorusConfig::default()
            .with_overrides([("CHORUS_INCENTIVES__NOPE", "1")])
            .unwrap_err();
        assert!(matches!(err, ConfigError::Env { .. }));
    }

    #[test]
    fn rejects_mismatched_base_pay() {
        let mut cfg = ChorusConfig::default();
        cfg.recruiting.base_pay = Cents(25);
        assert!(cfg.validate().is_err());
    }
}
