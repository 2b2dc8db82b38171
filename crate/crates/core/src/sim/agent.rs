//! Scripted worker behaviour.
//!
//! An agent wakes up every few seconds while it is in a session, looks at
//! an [`Observation`] of the page, and returns the actions it takes.

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::consensus::MessageKind;
use crate::gateway::SystemState;
use crate::ids::{MessageId, Participant, SessionId, WorkerId};
use crate::time::Timestamp;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Diligent,
    Confirmer,
    SpammerMessage,
    SpammerFact,
    SpammerVote,
    Idler,
    EarlySubmitter,
}

impl Behavior {
    pub fn is_spammer(self) -> bool {
        matches!(
            self,
            Behavior::SpammerMessage | Behavior::SpammerFact | Behavior::SpammerVote
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct MsRange {
    pub min_ms: u64,
    pub max_ms: u64,
}

impl MsRange {
    pub const fn new(min_ms: u64, max_ms: u64) -> Self {
        Self { min_ms, max_ms }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.random_range(self.min_ms..=self.max_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "when", rename_all = "snake_case")]
pub enum SubmitPolicy {
    Never,
    WhenEligible,
    /// Once eligible and the user has said goodbye.
    AfterGoodbye,
    /// Once eligible and this long after joining.
    AfterMs {
        ms: u64,
    },
}

/// A behaviour plus optional overrides of its default timing and
/// propensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AgentProfile {
    pub behavior: Behavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reaction_ms: Option<MsRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_ms: Option<MsRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propose_propensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_propensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_propensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ping_response_ms: Option<MsRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ping_miss_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submit: Option<SubmitPolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentParams {
    /// Delay from joining to the first look at the page.
    pub reaction_ms: MsRange,
    pub think_ms: MsRange,
    pub propose: f64,
    pub vote: f64,
    pub fact: f64,
    pub ping_response_ms: MsRange,
    pub ping_miss: f64,
    pub submit: SubmitPolicy,
}

impl AgentParams {
    pub fn defaults(b: Behavior) -> Self {
        let base = AgentParams {
            reaction_ms: MsRange::new(3_000, 8_000),
            think_ms: MsRange::new(4_000, 12_000),
            propose: 1.0,
            vote: 0.8,
            fact: 0.05,
            ping_response_ms: MsRange::new(2_000, 15_000),
            ping_miss: 0.05,
            submit: SubmitPolicy::AfterGoodbye,
        };
        match b {
            Behavior::Diligent | Behavior::Confirmer => base,
            Behavior::SpammerMessage => AgentParams {
                reaction_ms: MsRange::new(2_000, 5_000),
                think_ms: MsRange::new(4_000, 8_000),
                propose: 0.8,
                vote: 0.0,
                fact: 0.0,
                submit: SubmitPolicy::WhenEligible,
                ..base
            },
            Behavior::SpammerFact => AgentParams {
                think_ms: MsRange::new(3_000, 8_000),
                propose: 0.0,
                vote: 0.0,
                fact: 0.9,
                submit: SubmitPolicy::WhenEligible,
                ..base
            },
            Behavior::SpammerVote => AgentParams {
                reaction_ms: MsRange::new(1_000, 3_000),
                think_ms: MsRange::new(2_000, 3_000),
                propose: 0.0,
                vote: 1.0,
                fact: 0.0,
                submit: SubmitPolicy::WhenEligible,
                ..base
            },
            Behavior::Idler => AgentParams {
                think_ms: MsRange::new(15_000, 25_000),
                propose: 0.0,
                vote: 0.0,
                fact: 0.0,
                submit: SubmitPolicy::Never,
                ..base
            },
            Behavior::EarlySubmitter => AgentParams {
                propose: 0.5,
                vote: 0.5,
                fact: 0.0,
                submit: SubmitPolicy::WhenEligible,
                ..base
            },
        }
    }
}

impl AgentProfile {
    pub fn new(behavior: Behavior) -> Self {
        Self {
            behavior,
            reaction_ms: None,
            think_ms: None,
            propose_propensity: None,
            vote_propensity: None,
            fact_propensity: None,
            ping_response_ms: None,
            ping_miss_probability: None,
            submit: None,
        }
    }

    pub fn with_submit(mut self, policy: SubmitPolicy) -> Self {
        self.submit = Some(policy);
        self
    }

    pub fn params(&self) -> AgentParams {
        let d = AgentParams::defaults(self.behavior);
        AgentParams {
            reaction_ms: self.reaction_ms.unwrap_or(d.reaction_ms),
            think_ms: self.think_ms.unwrap_or(d.think_ms),
            propose: self.propose_propensity.unwrap_or(d.propose),
            vote: self.vote_propensity.unwrap_or(d.vote),
            fact: self.fact_propensity.unwrap_or(d.fact),
            ping_response_ms: self.ping_response_ms.unwrap_or(d.ping_response_ms),
            ping_miss: self.ping_miss_probability.unwrap_or(d.ping_miss),
            submit: self.submit.unwrap_or(d.submit),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = self.params();
        for (name, v) in [
            ("propose_propensity", p.propose),
            ("vote_propensity", p.vote),
            ("fact_propensity", p.fact),
            ("ping_miss_probability", p.ping_miss),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1]"));
            }
        }
        for (name, r) in [
            ("reaction_ms", p.reaction_ms),
            ("think_ms", p.think_ms),
            ("ping_response_ms", p.ping_response_ms),
        ] {
            if r.min_ms > r.max_ms {
                return Err(format!("{name}: min_ms exceeds max_ms"));
            }
        }
        if p.think_ms.min_ms == 0 {
            return Err("think_ms must be positive".into());
        }
        Ok(())
    }
}

pub const CONFIRM_TEXT: &str = "Is there anything else I can help you with?";

pub const REPLY_POOL: &[&str] = &[
    "The closest one is about ten minutes away on foot.",
    "It opens at 9am on weekdays and 11am on weekends.",
    "Most people recommend booking a day ahead.",
    "You can take the 61C bus, it stops right outside.",
    "Reviews say the lunch specials are the best value.",
    "Tickets are cheaper if you buy them online.",
    "I would try the one on Craig Street first.",
    "There is free parking behind the building after 6pm.",
    "That route avoids the highway, so it should be quieter.",
    "They have vegetarian options on the second page of the menu.",
    "The museum is free on the first Sunday of the month.",
    "Yes, they take reservations by phone.",
    "It should take around twenty minutes by taxi.",
    "The weather looks clear for the whole weekend.",
    "Another option is the library, which stays open until midnight.",
    "The train leaves every half hour from the main station.",
    "I found a coupon code on their website for ten percent off.",
    "Their customer service line is open around the clock.",
    "Most flights that day connect through Chicago.",
    "You're welcome, glad we could help!",
    "Check-in starts at 3pm and you can leave bags earlier.",
    "The park has a short loop trail that is good for kids.",
    "That store closes early on holidays, so go before 5pm.",
    "A good alternative is the place two blocks north.",
];

/// Vague filler that careful workers will not vote for.
pub const SPAM_POOL: &[&str] = &[
    "ok", "yes", "hmm", "sure", "lol", "what?", "k", "good", "idk",
];

pub const FACT_SPAM_POOL: &[&str] = &["a", "a", "a", "d", "d"];

const FACT_SUBJECTS: &[&str] = &[
    "user is in",
    "user wants to visit",
    "user prefers",
    "trip dates are",
    "user is asking about",
    "user works near",
    "looking for",
    "user mentioned",
];

const FACT_VALUES: &[&str] = &[
    "Seattle",
    "Pittsburgh downtown",
    "a vegetarian menu",
    "late June",
    "an Italian restaurant",
    "the art museum",
    "a quiet cafe with wifi",
    "public transit only",
    "two kids under ten",
    "a budget hotel",
    "the airport shuttle",
    "weekend brunch spots",
];

pub fn is_spam_text(body: &str) -> bool {
    SPAM_POOL.contains(&body)
}

pub fn is_goodbye(body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    b.contains("thank") || b.contains("bye")
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

pub fn fact_text<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("{} {}", pick(rng, FACT_SUBJECTS), pick(rng, FACT_VALUES))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingProposal {
    pub message_id: MessageId,
    pub author: WorkerId,
    pub body: String,
    pub proposed_at: Timestamp,
    pub voted_by_me: bool,
}

/// What one worker can see of its session at one instant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub session_id: SessionId,
    pub worker_id: WorkerId,
    pub now: Timestamp,
    pub joined_at: Timestamp,
    pub last_user_message: Option<(MessageId, String, Timestamp)>,
    pub last_crowd_reply_at: Option<Timestamp>,
    /// Oldest first.
    pub pending: Vec<PendingProposal>,
    /// Bodies of my proposals made after the latest user message.
    pub my_recent_proposals: Vec<String>,
    pub points: u32,
    pub eligible: bool,
}

impl Observation {
    pub fn from_state(
        state: &SystemState,
        session: SessionId,
        worker: &WorkerId,
        now: Timestamp,
    ) -> Option<Self> {
        let rec = state.session(session)?;
        let joined_at = rec.participants.get(worker)?.joined_at;
        let conv = state.conversations.get(&session)?;
        let mut last_user = None;
        let mut last_crowd = None;
        for m in conv.messages.values() {
            match m.kind {
                MessageKind::User => {
                    last_user = Some((m.message_id, m.body.clone(), m.proposed_at))
                }
                MessageKind::WorkerProposal => {
                    if let Some(at) = m.accepted_at {
                        last_crowd = last_crowd.max(Some(at));
                    }
                }
            }
        }
        let since = last_user.as_ref().map(|u| u.2).unwrap_or(Timestamp::ZERO);
        let pending = conv
            .pending()
            .filter(|m| m.kind == MessageKind::WorkerProposal)
            .filter_map(|m| match &m.author {
                Participant::Worker(a) => Some(PendingProposal {
                    message_id: m.message_id,
                    author: a.clone(),
                    body: m.body.clone(),
                    proposed_at: m.proposed_at,
                    voted_by_me: m.votes.contains(worker),
                }),
                _ => None,
            })
            .collect();
        let mine = conv
            .messages
            .values()
            .filter(|m| m.proposed_at >= since)
            .filter(|m| matches!(&m.author, Participant::Worker(a) if a == worker))
            .map(|m| m.body.clone())
            .collect();
        let ledger = state.ledger(session, worker);
        let points = ledger.map(|l| l.total).unwrap_or(0);
        Some(Observation {
            session_id: session,
            worker_id: worker.clone(),
            now,
            joined_at,
            last_user_message: last_user,
            last_crowd_reply_at: last_crowd,
            pending,
            my_recent_proposals: mine,
            points,
            eligible: points >= state.config.incentives.min_points_to_submit,
        })
    }

    /// The latest user message has no accepted crowd reply after it.
    pub fn unanswered(&self) -> bool {
        match (&self.last_user_message, self.last_crowd_reply_at) {
            (Some(_), None) => true,
            (Some((_, _, at)), Some(reply)) => reply < *at,
            (None, _) => false,
        }
    }

    pub fn user_said_goodbye(&self) -> bool {
        self.last_user_message
            .as_ref()
            .is_some_and(|(_, body, _)| is_goodbye(body))
    }

    fn answer_pending(&self) -> bool {
        let since = self
            .last_user_message
            .as_ref()
            .map(|u| u.2)
            .unwrap_or(Timestamp::ZERO);
        self.pending
            .iter()
            .any(|p| p.proposed_at >= since && !is_spam_text(&p.body))
    }

    fn votable(&self) -> impl Iterator<Item = &PendingProposal> {
        self.pending
            .iter()
            .filter(|p| p.author != self.worker_id && !p.voted_by_me)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Propose { body: String },
    Vote { message_id: MessageId },
    PostFact { body: String },
    Submit,
}

fn submit_ready(policy: SubmitPolicy, obs: &Observation) -> bool {
    obs.eligible
        && match policy {
            SubmitPolicy::Never => false,
            SubmitPolicy::WhenEligible => true,
            SubmitPolicy::AfterGoodbye => obs.user_said_goodbye(),
            SubmitPolicy::AfterMs { ms } => obs.now.since(obs.joined_at) >= ms,
        }
}

fn careful_step<R: Rng + ?Sized>(p: &AgentParams, obs: &Observation, rng: &mut R) -> Vec<Action> {
    let mut out = Vec::new();
    if obs.unanswered() && !obs.answer_pending() {
        if rng.random_bool(p.propose) {
            out.push(Action::Propose {
                body: pick(rng, REPLY_POOL).to_owned(),
            });
        }
    } else if let Some(m) = obs.votable().find(|m| !is_spam_text(&m.body)) {
        if rng.random_bool(p.vote) {
            out.push(Action::Vote {
                message_id: m.message_id,
            });
        }
    }
    if rng.random_bool(p.fact) {
        out.push(Action::PostFact {
            body: fact_text(rng),
        });
    }
    out
}

/// One decision for one agent.
pub fn scripted_step<R: Rng + ?Sized>(
    profile: &AgentProfile,
    obs: &Observation,
    rng: &mut R,
) -> Vec<Action> {
    let p = profile.params();
    if submit_ready(p.submit, obs) {
        return vec![Action::Submit];
    }
    match profile.behavior {
        Behavior::Diligent | Behavior::EarlySubmitter => careful_step(&p, obs, rng),
        Behavior::Confirmer => {
            let confirm_pending = obs.pending.iter().any(|m| m.body == CONFIRM_TEXT);
            let already = obs.my_recent_proposals.iter().any(|b| b == CONFIRM_TEXT);
            if obs.user_said_goodbye() && !confirm_pending && !already {
                vec![Action::Propose {
                    body: CONFIRM_TEXT.to_owned(),
                }]
            } else {
                careful_step(&p, obs, rng)
            }
        }
        Behavior::SpammerMessage => {
            if rng.random_bool(p.propose) {
                vec![Action::Propose {
                    body: pick(rng, SPAM_POOL).to_owned(),
                }]
            } else {
                Vec::new()
            }
        }
        Behavior::SpammerFact => {
            let mut out = Vec::new();
            if rng.random_bool(p.fact) {
                for _ in 0..rng.random_range(1..=2) {
                    out.push(Action::PostFact {
                        body: pick(rng, FACT_SPAM_POOL).to_owned(),
                    });
                }
            }
            out
        }
        Behavior::SpammerVote => obs
            .votable()
            .filter(|_| rng.random_bool(p.vote))
            .map(|m| Action::Vote {
                message_id: m.message_id,
            })
            .collect(),
        Behavior::Idler => Vec::new(),
    }
}
