//! Per-session measures and their aggregate.
//!
//! A session's duration runs from the user's first message to the last
//! message the user saw (their own or an accepted crowd message). Idle time
//! before a timeout is not counted. First-response latency is the gap
//! between the user's first message and the first accepted crowd message;
//! sessions the crowd never answered are left out of the latency figures.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mean_sd;
use crate::event::{Event, EventLogEntry};
use crate::ids::{MessageId, SessionId, UserId};
use crate::lifecycle::CloseReason;
use crate::time::{Timestamp, MINUTE_MS, SECOND_MS};

pub const FIRST_RESPONSE_PERCENTILES: [f64; 7] = [10.0, 25.0, 50.0, 60.0, 75.0, 88.3, 90.0];
pub const RESPONSE_WINDOWS_SECS: [u64; 3] = [30, 60, 120];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub user_id: UserId,
    pub opened_at: Timestamp,
    pub closed_at: Option<Timestamp>,
    pub close_reason: Option<CloseReason>,
    pub duration_secs: f64,
    pub user_messages: u32,
    pub crowd_messages: u32,
    /// Proposals that were never accepted.
    pub rejected: u32,
    pub workers: u32,
    pub first_response_secs: Option<f64>,
}

impl SessionSummary {
    pub fn messages(&self) -> u32 {
        self.user_messages + self.crowd_messages
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts[i]` covers `[i * bin_width, (i + 1) * bin_width)`.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: impl IntoIterator<Item = f64>, bin_width: f64) -> Self {
        let mut counts = Vec::new();
        for v in values {
            let i = (v.max(0.0) / bin_width).floor() as usize;
            if counts.len() <= i {
                counts.resize(i + 1, 0);
            }
            counts[i] += 1;
        }
        Self { bin_width, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub percentile: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub n_sessions: usize,
    pub duration_mean_min: f64,
    pub duration_sd_min: f64,
    pub messages_mean: f64,
    pub messages_sd: f64,
    pub user_messages_mean: f64,
    pub user_messages_sd: f64,
    pub crowd_messages_mean: f64,
    pub crowd_messages_sd: f64,
    pub rejected_mean: f64,
    pub rejected_sd: f64,
    /// Share of sessions lasting at most 10 minutes.
    pub share_within_10_min: f64,
    /// 1-minute bins.
    pub duration_histogram: Histogram,
    /// 5-message bins.
    pub message_histogram: Histogram,
    pub sessions_with_response: usize,
    pub first_response_mean_secs: Option<f64>,
    pub first_response_quantiles: Vec<Quantile>,
    /// `(window_secs, share of answered sessions answered within it)`.
    pub first_response_within: Vec<(u64, f64)>,
}

impl SessionStats {
    pub fn within(&self, secs: u64) -> Option<f64> {
        self.first_response_within
            .iter()
            .find(|(w, _)| *w == secs)
            .map(|(_, f)| *f)
    }

    pub fn quantile(&self, percentile: f64) -> Option<f64> {
        self.first_response_quantiles
            .iter()
            .find(|q| q.percentile == percentile)
            .map(|q| q.secs)
    }
}

/// Nearest-rank percentile of sorted data: the smallest value with at least
/// `p` percent of the data at or below it.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

pub fn session_summaries(entries: &[EventLogEntry]) -> Vec<SessionSummary> {
    struct Acc {
        s: SessionSummary,
        first_user: Option<Timestamp>,
        last_visible: Option<Timestamp>,
        proposals: BTreeSet<MessageId>,
        workers: BTreeSet<crate::ids::WorkerId>,
    }
    let mut acc: BTreeMap<SessionId, Acc> = BTreeMap::new();
    for e in entries {
        let Some(sid) = e.session_id else { continue };
        if let Event::SessionOpened { user_id, .. } = &e.event {
            acc.insert(
                sid,
                Acc {
                    s: SessionSummary {
                        session_id: sid,
                        user_id: user_id.clone(),
                        opened_at: e.at,
                        closed_at: None,
                        close_reason: None,
                        duration_secs: 0.0,
                        user_messages: 0,
                        crowd_messages: 0,
                        rejected: 0,
                        workers: 0,
                        first_response_secs: None,
                    },
                    first_user: None,
                    last_visible: None,
                    proposals: BTreeSet::new(),
                    workers: BTreeSet::new(),
                },
            );
            continue;
        }
        let Some(a) = acc.get_mut(&sid) else { continue };
        match &e.event {
            Event::UserMessage { dropped: false, .. } => {
                a.s.user_messages += 1;
                a.first_user.get_or_insert(e.at);
                a.last_visible = Some(e.at);
            }
            Event::ProposalCreated { message_id, .. } => {
                a.proposals.insert(*message_id);
            }
            Event::MessageAccepted { message_id, .. } => {
                if a.proposals.remove(message_id) {
                    a.s.crowd_messages += 1;
                    a.last_visible = Some(e.at);
                    if a.s.first_response_secs.is_none() {
                        if let Some(first) = a.first_user {
                            a.s.first_response_secs =
                                Some(e.at.since(first) as f64 / SECOND_MS as f64);
                        }
                    }
                }
            }
            Event::AssignmentClaimed { worker_id, .. } => {
                a.workers.insert(worker_id.clone());
            }
            Event::RetainerDispatched {
                worker_id,
                phase: crate::recruiting::DispatchPhase::Joined,
                ..
            } => {
                a.workers.insert(worker_id.clone());
            }
            Event::SessionClosed { reason } => {
                a.s.closed_at = Some(e.at);
                a.s.close_reason = Some(*reason);
            }
            _ => {}
        }
    }
    acc.into_values()
        .map(|mut a| {
            a.s.rejected = a.proposals.len() as u32;
            a.s.workers = a.workers.len() as u32;
            if let (Some(f), Some(l)) = (a.first_user, a.last_visible) {
                a.s.duration_secs = l.since(f) as f64 / SECOND_MS as f64;
            }
            a.s
        })
        .collect()
}

pub fn session_statistics(entries: &[EventLogEntry]) -> SessionStats {
    let sessions = session_summaries(entries);
    let col = |f: &dyn Fn(&SessionSummary) -> f64| sessions.iter().map(f).collect::<Vec<f64>>();
    let minute = MINUTE_MS as f64 / SECOND_MS as f64;
    let durations = col(&|s| s.duration_secs / minute);
    let messages = col(&|s| f64::from(s.messages()));
    let (duration_mean_min, duration_sd_min) = mean_sd(&durations);
    let (messages_mean, messages_sd) = mean_sd(&messages);
    let (user_messages_mean, user_messages_sd) = mean_sd(&col(&|s| f64::from(s.user_messages)));
    let (crowd_messages_mean, crowd_messages_sd) = mean_sd(&col(&|s| f64::from(s.crowd_messages)));
    let (rejected_mean, rejected_sd) = mean_sd(&col(&|s| f64::from(s.rejected)));

    let mut latencies: Vec<f64> = sessions
        .iter()
        .filter_map(|s| s.first_response_secs)
        .collect();
    latencies.sort_by(f64::total_cmp);
    let first_response_quantiles = if latencies.is_empty() {
        Vec::new()
    } else {
        FIRST_RESPONSE_PERCENTILES
            .iter()
            .map(|p| Quantile {
                percentile: *p,
                secs: nearest_rank(&latencies, *p).expect("non-empty"),
            })
            .collect()
    };
    let first_response_within = if latencies.is_empty() {
        Vec::new()
    } else {
        RESPONSE_WINDOWS_SECS
            .iter()
            .map(|w| {
                let k = latencies.iter().filter(|l| **l <= *w as f64).count();
                (*w, k as f64 / latencies.len() as f64)
            })
            .collect()
    };
    let share_within_10_min = if sessions.is_empty() {
        0.0
    } else {
        durations.iter().filter(|d| **d <= 10.0).count() as f64 / sessions.len() as f64
    };
    SessionStats {
        n_sessions: sessions.len(),
        duration_mean_min,
        duration_sd_min,
        messages_mean,
        messages_sd,
        user_messages_mean,
        user_messages_sd,
        crowd_messages_mean,
        crowd_messages_sd,
        rejected_mean,
        rejected_sd,
        share_within_10_min,
        duration_histogram: Histogram::build(durations.iter().copied(), 1.0),
        message_histogram: Histogram::build(messages.iter().copied(), 5.0),
        sessions_with_response: latencies.len(),
        first_response_mean_secs: (!latencies.is_empty())
            .then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        first_response_quantiles,
        first_response_within,
    }
}
