//! Worker quality measures and spam flags.
//!
//! Flags are reports for a human to act on; nothing here blocks a worker.
//! A message spammer has enough proposals and too few accepted. A fact
//! spammer floods the board with near-identical or tiny entries. A vote
//! spammer backs nearly every proposal they had time to read, in more
//! than one session.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::event::{Event, EventLogEntry};
use crate::ids::{MessageId, SessionId, WorkerId};
use crate::recruiting::DispatchPhase;
use crate::time::{Timestamp, MINUTE_MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    MessageSpammer,
    FactSpammer,
    VoteSpammer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityThresholds {
    pub min_proposals: u32,
    pub min_acceptance_ratio: f64,
    pub min_facts: u32,
    /// Share of a worker's facts that are near-duplicates of another.
    pub duplicate_share: f64,
    /// Normalized edit similarity at which two facts count as the same.
    pub near_duplicate_similarity: f64,
    pub max_median_fact_len: f64,
    /// Share of pending proposals voted on that counts as a sweep.
    pub vote_share: f64,
    /// A proposal counts as pending for a worker if it was pending this long
    /// while the worker was in the session. Vote spammers together accept
    /// junk within seconds, so this stays tiny.
    pub min_pending_ms: u64,
    /// Sessions with fewer pending proposals are not judged.
    pub min_votable_per_session: u32,
    pub min_sweep_sessions: u32,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            min_proposals: 10,
            min_acceptance_ratio: 0.6,
            min_facts: 10,
            duplicate_share: 0.8,
            near_duplicate_similarity: 0.9,
            max_median_fact_len: 2.0,
            vote_share: 0.9,
            min_pending_ms: 1,
            min_votable_per_session: 5,
            min_sweep_sessions: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerQuality {
    pub worker_id: WorkerId,
    pub sessions: u32,
    pub proposals: u32,
    pub accepted: u32,
    /// `None` without proposals.
    pub acceptance_ratio: Option<f64>,
    pub fact_posts: u32,
    /// Share of facts that have a near-duplicate among the worker's facts.
    pub fact_spam_score: f64,
    pub median_fact_len: Option<f64>,
    pub vote_count: u32,
    pub vote_rate_per_minute: f64,
    /// Sessions in which the worker voted on nearly every pending proposal.
    pub vote_sweep_sessions: u32,
    pub flags: BTreeSet<QualityFlag>,
}

#[derive(Default)]
struct Presence {
    joined: Option<Timestamp>,
    left: Option<Timestamp>,
}

struct Proposal {
    session: SessionId,
    author: WorkerId,
    at: Timestamp,
    resolved: Option<Timestamp>,
    voters: BTreeSet<WorkerId>,
}

#[derive(Default)]
struct Acc {
    proposals: u32,
    accepted: u32,
    facts: Vec<String>,
    votes: u32,
}

/// Share of `facts` with at least one near-duplicate, by greedy clustering
/// on normalized edit similarity.
fn duplicate_share(facts: &[String], similarity: f64) -> f64 {
    if facts.is_empty() {
        return 0.0;
    }
    let mut reps: Vec<(String, usize)> = Vec::new();
    for f in facts {
        let norm = f.trim().to_lowercase();
        match reps
            .iter_mut()
            .find(|(r, _)| strsim::normalized_levenshtein(r, &norm) >= similarity)
        {
            Some((_, n)) => *n += 1,
            None => reps.push((norm, 1)),
        }
    }
    let dup: usize = reps.iter().filter(|(_, n)| *n >= 2).map(|(_, n)| n).sum();
    dup as f64 / facts.len() as f64
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn overlap(a: (Timestamp, Timestamp), b: (Timestamp, Timestamp)) -> u64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    hi.since(lo)
}

pub fn worker_quality(entries: &[EventLogEntry], th: &QualityThresholds) -> Vec<WorkerQuality> {
    let end = entries.last().map(|e| e.at).unwrap_or(Timestamp::ZERO);
    let mut acc: BTreeMap<WorkerId, Acc> = BTreeMap::new();
    let mut presence: BTreeMap<(SessionId, WorkerId), Presence> = BTreeMap::new();
    let mut closed: BTreeMap<SessionId, Timestamp> = BTreeMap::new();
    let mut proposals: BTreeMap<MessageId, Proposal> = BTreeMap::new();

    for e in entries {
        let sid = e.session_id;
        match &e.event {
            Event::AssignmentClaimed { worker_id, .. }
            | Event::RetainerDispatched {
                worker_id,
                phase: DispatchPhase::Joined,
                ..
            } => {
                if let Some(s) = sid {
                    presence.entry((s, worker_id.clone())).or_default().joined = Some(e.at);
                    acc.entry(worker_id.clone()).or_default();
                }
            }
            Event::SubmissionRecorded { worker_id, .. } => {
                if let Some(s) = sid {
                    presence.entry((s, worker_id.clone())).or_default().left = Some(e.at);
                }
            }
            Event::SessionClosed { .. } => {
                if let Some(s) = sid {
                    closed.insert(s, e.at);
                }
            }
            Event::ProposalCreated {
                message_id,
                worker_id,
                ..
            } => {
                acc.entry(worker_id.clone()).or_default().proposals += 1;
                if let Some(s) = sid {
                    proposals.insert(
                        *message_id,
                        Proposal {
                            session: s,
                            author: worker_id.clone(),
                            at: e.at,
                            resolved: None,
                            voters: BTreeSet::new(),
                        },
                    );
                }
            }
            Event::VoteCast {
                message_id,
                worker_id,
            } => {
                acc.entry(worker_id.clone()).or_default().votes += 1;
                if let Some(p) = proposals.get_mut(message_id) {
                    p.voters.insert(worker_id.clone());
                }
            }
            Event::MessageAccepted { message_id, .. } => {
                if let Some(p) = proposals.get_mut(message_id) {
                    p.resolved = Some(e.at);
                    acc.entry(p.author.clone()).or_default().accepted += 1;
                }
            }
            Event::FactPosted {
                worker_id, body, ..
            } => {
                acc.entry(worker_id.clone())
                    .or_default()
                    .facts
                    .push(body.clone());
            }
            _ => {}
        }
    }

    let session_end = |s: SessionId| closed.get(&s).copied().unwrap_or(end);
    let mut present_ms: BTreeMap<WorkerId, u64> = BTreeMap::new();
    let mut votable: BTreeMap<(SessionId, WorkerId), (u32, u32)> = BTreeMap::new();
    for ((s, w), p) in &presence {
        let Some(joined) = p.joined else { continue };
        let left = p.left.unwrap_or_else(|| session_end(*s));
        *present_ms.entry(w.clone()).or_default() += left.since(joined);
        let slot = votable.entry((*s, w.clone())).or_default();
        for prop in proposals
            .values()
            .filter(|m| m.session == *s && &m.author != w)
        {
            let pending = (prop.at, prop.resolved.unwrap_or_else(|| session_end(*s)));
            if overlap(pending, (joined, left)) >= th.min_pending_ms {
                slot.0 += 1;
                if prop.voters.contains(w) {
                    slot.1 += 1;
                }
            }
        }
    }
    let mut sweeps: BTreeMap<WorkerId, u32> = BTreeMap::new();
    let mut sessions: BTreeMap<WorkerId, u32> = BTreeMap::new();
    for ((_, w), (n, voted)) in &votable {
        *sessions.entry(w.clone()).or_default() += 1;
        if *n >= th.min_votable_per_session && f64::from(*voted) >= th.vote_share * f64::from(*n) {
            *sweeps.entry(w.clone()).or_default() += 1;
        }
    }

    acc.into_iter()
        .map(|(w, a)| {
            let acceptance_ratio =
                (a.proposals > 0).then(|| f64::from(a.accepted) / f64::from(a.proposals));
            let fact_spam_score = duplicate_share(&a.facts, th.near_duplicate_similarity);
            let median_fact_len = median(
                a.facts
                    .iter()
                    .map(|f| f.trim().chars().count() as f64)
                    .collect(),
            );
            let minutes = present_ms.get(&w).copied().unwrap_or(0) as f64 / MINUTE_MS as f64;
            let vote_sweep_sessions = sweeps.get(&w).copied().unwrap_or(0);
            let mut flags = BTreeSet::new();
            if a.proposals >= th.min_proposals
                && acceptance_ratio.is_some_and(|r| r < th.min_acceptance_ratio)
            {
                flags.insert(QualityFlag::MessageSpammer);
            }
            if a.facts.len() as u32 >= th.min_facts
                && (fact_spam_score >= th.duplicate_share
                    || median_fact_len.is_some_and(|m| m <= th.max_median_fact_len))
            {
                flags.insert(QualityFlag::FactSpammer);
            }
            if vote_sweep_sessions >= th.min_sweep_sessions {
                flags.insert(QualityFlag::VoteSpammer);
            }
            WorkerQuality {
                sessions: sessions.get(&w).copied().unwrap_or(0),
                proposals: a.proposals,
                accepted: a.accepted,
                acceptance_ratio,
                fact_posts: a.facts.len() as u32,
                fact_spam_score,
                median_fact_len,
                vote_count: a.votes,
                vote_rate_per_minute: if minutes > 0.0 {
                    f64::from(a.votes) / minutes
                } else {
                    0.0
                },
                vote_sweep_sessions,
                flags,
                worker_id: w,
            }
        })
        .collect()
}
