//! The discrete-event run loop.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ChorusError;
use crate::event::Event;
use crate::gateway::Chorus;
use crate::ids::{SessionId, UserId, WorkerId};
use crate::recruiting::{DispatchPhase, SimulatedPlatform};
use crate::time::Timestamp;

use super::agent::{scripted_step, Action, AgentParams, AgentProfile, Observation};
use super::clock::VirtualClock;
use super::scenario::{AdminCommand, Scenario, SessionPlan, UserScript};
use super::SimError;

/// Agents send a heartbeat when they have been quiet this long.
const HEARTBEAT_EVERY_MS: u64 = 20_000;
/// Directed steps that cannot run yet are retried this often.
const DIRECTOR_RETRY_MS: u64 = 1_000;
const MAX_STEPS: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DirectorStep {
    Reply,
    Reject,
    Submit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Item {
    UserTurn {
        user: usize,
        plan: usize,
        turn: usize,
    },
    Wake {
        worker: WorkerId,
        session: SessionId,
    },
    PingAnswer {
        worker: WorkerId,
    },
    Director {
        session: SessionId,
        step: DirectorStep,
    },
    Admin(usize),
}

struct AgentRt {
    profile: AgentProfile,
    params: AgentParams,
    session: Option<SessionId>,
}

#[derive(Default)]
struct PlanRt {
    session: Option<SessionId>,
    /// Waiting for a crowd reply delivered at or after this time before
    /// sending `next_turn`.
    awaiting_since: Option<Timestamp>,
    next_turn: usize,
}

struct Directed {
    user: usize,
    plan: usize,
    steps: usize,
}

struct UserRt {
    id: UserId,
    plans: Vec<SessionPlan>,
    rt: Vec<PlanRt>,
}

pub(super) struct Harness<'a> {
    scenario: &'a Scenario,
    pub(super) engine: Chorus<SimulatedPlatform>,
    clock: VirtualClock<Item>,
    rng: ChaCha8Rng,
    agents: BTreeMap<WorkerId, AgentRt>,
    users: Vec<UserRt>,
    directed: BTreeMap<SessionId, Directed>,
    seen: u64,
    hard_end: Timestamp,
    pub(super) tolerated: BTreeMap<String, u64>,
}

/// Rejections a real client would also see and shrug off.
fn tolerable(e: &ChorusError) -> Option<&'static str> {
    Some(match e {
        ChorusError::NotEligible { .. } => "not_eligible",
        ChorusError::AlreadyVoted { .. } => "already_voted",
        ChorusError::MessageNotPending(_) => "message_not_pending",
        ChorusError::SessionClosed(_) => "session_closed",
        ChorusError::NotAParticipant { .. } => "not_a_participant",
        ChorusError::NotPinged(_) => "not_pinged",
        ChorusError::WorkerBusy(_) => "worker_busy",
        ChorusError::AlreadyJoined { .. } => "already_joined",
        ChorusError::UnknownUser(_) => "unknown_user",
        _ => return None,
    })
}

impl<'a> Harness<'a> {
    pub(super) fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let config = scenario.config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let workers = scenario.worker_ids();
        let population = workers.iter().map(|(w, _)| w.clone()).collect();
        let platform =
            SimulatedPlatform::new(rng.random(), scenario.platform.latency_model(), population);
        let agents = workers
            .into_iter()
            .map(|(w, p)| {
                (
                    w,
                    AgentRt {
                        profile: p.clone(),
                        params: p.params(),
                        session: None,
                    },
                )
            })
            .collect();
        let users: Vec<UserRt> = scenario
            .all_users()
            .into_iter()
            .map(|UserScript { user_id, sessions }| UserRt {
                id: user_id,
                rt: sessions.iter().map(|_| PlanRt::default()).collect(),
                plans: sessions,
            })
            .collect();
        let mut clock = VirtualClock::new();
        for (u, user) in users.iter().enumerate() {
            for (p, plan) in user.plans.iter().enumerate() {
                clock.schedule(
                    Timestamp(plan.start_ms + plan.turns[0].delay_ms),
                    Item::UserTurn {
                        user: u,
                        plan: p,
                        turn: 0,
                    },
                );
            }
        }
        for (i, a) in scenario.admin.iter().enumerate() {
            clock.schedule(Timestamp(a.at_ms), Item::Admin(i));
        }
        Ok(Self {
            scenario,
            engine: Chorus::new(config, platform),
            clock,
            rng,
            agents,
            users,
            directed: BTreeMap::new(),
            seen: 0,
            hard_end: Timestamp(scenario.duration_ms + scenario.drain_ms),
            tolerated: BTreeMap::new(),
        })
    }

    fn tolerate<T>(&mut self, r: Result<T, ChorusError>) -> Result<Option<T>, SimError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e) => match tolerable(&e) {
                Some(k) => {
                    *self.tolerated.entry(k.to_owned()).or_default() += 1;
                    Ok(None)
                }
                None => Err(SimError::Engine(e)),
            },
        }
    }

    pub(super) fn run(&mut self) -> Result<(), SimError> {
        let mut steps = 0u64;
        loop {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(SimError::Stalled(self.clock.now()));
            }
            let item_at = self.clock.peek_time();
            let tick_at = self.engine.next_deadline();
            let tick_first = match (item_at, tick_at) {
                (None, None) => break,
                (None, Some(_)) => true,
                (Some(_), None) => false,
                (Some(i), Some(t)) => t <= i,
            };
            if tick_first {
                let t = tick_at.expect("tick time").max(self.clock.now());
                if t > self.hard_end {
                    break;
                }
                self.engine.tick(t)?;
                self.clock.advance_to(t);
                self.observe();
                // Every engine deadline at or before `t` is resolved by the tick.
                if self.engine.next_deadline().is_some_and(|n| n <= t) {
                    return Err(SimError::Stalled(t));
                }
            } else {
                let (t, item) = self.clock.pop().expect("peeked");
                if t > self.hard_end {
                    break;
                }
                self.handle(t, item)?;
                self.observe();
            }
        }
        Ok(())
    }

    fn handle(&mut self, now: Timestamp, item: Item) -> Result<(), SimError> {
        match item {
            Item::UserTurn { user, plan, turn } => self.user_turn(now, user, plan, turn),
            Item::Wake { worker, session } => self.wake(now, worker, session),
            Item::PingAnswer { worker } => {
                let r = self.engine.respond_to_ping(&worker, now);
                self.tolerate(r).map(|_| ())
            }
            Item::Director { session, step } => self.direct(now, session, step),
            Item::Admin(i) => {
                let token = self.engine.config().gateway.admin_token.clone();
                let r = match &self.scenario.admin[i].command {
                    AdminCommand::Block { user_id, reason } => {
                        self.engine.block_user(user_id, reason, &token, now)
                    }
                    AdminCommand::Unblock { user_id } => {
                        self.engine.unblock_user(user_id, &token, now)
                    }
                };
                self.tolerate(r).map(|_| ())
            }
        }
    }

    fn user_turn(&mut self, now: Timestamp, u: usize, p: usize, t: usize) -> Result<(), SimError> {
        let id = self.users[u].id.clone();
        let plan = &self.users[u].plans[p];
        let text = plan.turns[t].text.clone();
        let res = self.engine.handle_inbound_user_message(&id, &text, now)?;
        let plan = self.users[u].plans[p].clone();
        let rt = &mut self.users[u].rt[p];
        if res.session_id.is_some() {
            rt.session = res.session_id;
        }
        rt.next_turn = t + 1;
        if let Some(next) = plan.turns.get(t + 1) {
            if next.wait_for_reply {
                rt.awaiting_since = Some(now);
            } else {
                rt.awaiting_since = None;
                self.clock.schedule(
                    now + next.delay_ms,
                    Item::UserTurn {
                        user: u,
                        plan: p,
                        turn: t + 1,
                    },
                );
            }
        }
        if t == 0 {
            if let (Some(crowd), Some(sid)) = (&plan.crowd, res.session_id) {
                if let std::collections::btree_map::Entry::Vacant(e) = self.directed.entry(sid) {
                    e.insert(Directed {
                        user: u,
                        plan: p,
                        steps: 0,
                    });
                    for off in &crowd.replies_at_ms {
                        self.clock.schedule(
                            now + *off,
                            Item::Director {
                                session: sid,
                                step: DirectorStep::Reply,
                            },
                        );
                    }
                    for off in &crowd.rejected_at_ms {
                        self.clock.schedule(
                            now + *off,
                            Item::Director {
                                session: sid,
                                step: DirectorStep::Reject,
                            },
                        );
                    }
                    self.clock.schedule(
                        now + crowd.submit_at_ms,
                        Item::Director {
                            session: sid,
                            step: DirectorStep::Submit,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    fn participants(&self, session: SessionId) -> Vec<WorkerId> {
        self.engine
            .state()
            .session(session)
            .map(|r| r.remaining_workers().map(|(w, _)| w.clone()).collect())
            .unwrap_or_default()
    }

    fn session_open(&self, session: SessionId) -> bool {
        self.engine
            .state()
            .session(session)
            .is_some_and(|r| r.is_open())
    }

    fn direct(
        &mut self,
        now: Timestamp,
        sid: SessionId,
        step: DirectorStep,
    ) -> Result<(), SimError> {
        if !self.session_open(sid) {
            return Ok(());
        }
        let workers = self.participants(sid);
        let needed = match step {
            DirectorStep::Reply => 1,
            DirectorStep::Reject => 3,
            DirectorStep::Submit => self.engine.config().lifecycle.submissions_to_close as usize,
        };
        if workers.len() < needed {
            self.clock.schedule(
                now + DIRECTOR_RETRY_MS,
                Item::Director { session: sid, step },
            );
            return Ok(());
        }
        let Some(d) = self.directed.get_mut(&sid) else {
            return Ok(());
        };
        if step == DirectorStep::Submit {
            let (u, p) = (d.user, d.plan);
            if self.users[u].rt[p].next_turn < self.users[u].plans[p].turns.len() {
                // The script closes the session only after the user is done.
                self.clock.schedule(
                    now + DIRECTOR_RETRY_MS,
                    Item::Director { session: sid, step },
                );
                return Ok(());
            }
        }
        let turn = d.steps;
        d.steps += 1;
        let lead = workers[turn % workers.len()].clone();
        match step {
            DirectorStep::Reply => {
                let body = super::agent::REPLY_POOL[turn % super::agent::REPLY_POOL.len()];
                let mid = self.engine.propose_message(sid, &lead, body, now)?;
                for w in workers.iter().filter(|w| **w != lead) {
                    let pending =
                        self.engine.state().conversations[&sid].messages[&mid].is_pending();
                    if !pending {
                        break;
                    }
                    self.engine.vote_message(sid, w, mid, now)?;
                }
            }
            DirectorStep::Reject => {
                for w in &workers {
                    self.engine.heartbeat(sid, w, now)?;
                }
                let body = format!("draft {turn}: {}", super::agent::fact_text(&mut self.rng));
                self.engine.propose_message(sid, &lead, &body, now)?;
            }
            DirectorStep::Submit => {
                for w in workers.iter().take(needed) {
                    let r = self.engine.submit_hit(sid, w, now);
                    if self.tolerate(r)?.is_none() {
                        self.clock.schedule(
                            now + DIRECTOR_RETRY_MS,
                            Item::Director { session: sid, step },
                        );
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn wake(&mut self, now: Timestamp, worker: WorkerId, sid: SessionId) -> Result<(), SimError> {
        let Some(agent) = self.agents.get(&worker) else {
            return Ok(());
        };
        if agent.session != Some(sid) || !self.session_open(sid) {
            return Ok(());
        }
        let profile = agent.profile.clone();
        let think = agent.params.think_ms;
        let Some(obs) = Observation::from_state(self.engine.state(), sid, &worker, now) else {
            return Ok(());
        };
        let actions = scripted_step(&profile, &obs, &mut self.rng);
        for a in actions {
            let r = match a {
                Action::Propose { body } => self
                    .engine
                    .propose_message(sid, &worker, &body, now)
                    .map(|_| ()),
                Action::Vote { message_id } => self
                    .engine
                    .vote_message(sid, &worker, message_id, now)
                    .map(|_| ()),
                Action::PostFact { body } => {
                    self.engine.post_fact(sid, &worker, &body, now).map(|_| ())
                }
                Action::Submit => self.engine.submit_hit(sid, &worker, now).map(|_| ()),
            };
            self.tolerate(r)?;
        }
        let state = self.engine.state();
        let still_in = state
            .session(sid)
            .is_some_and(|r| r.is_open() && r.is_participant(&worker));
        if !still_in {
            return Ok(());
        }
        let last_seen = state
            .conversations
            .get(&sid)
            .and_then(|c| c.roster.workers.get(&worker).copied());
        if last_seen.is_none_or(|t| now.since(t) >= HEARTBEAT_EVERY_MS) {
            self.engine.heartbeat(sid, &worker, now)?;
        }
        let next = now + think.sample(&mut self.rng);
        self.clock.schedule(
            next,
            Item::Wake {
                worker,
                session: sid,
            },
        );
        Ok(())
    }

    fn on_join(&mut self, worker: &WorkerId, sid: SessionId, at: Timestamp) {
        let directed = self.directed.contains_key(&sid);
        let Some(agent) = self.agents.get_mut(worker) else {
            return;
        };
        if agent.session == Some(sid) {
            return;
        }
        agent.session = Some(sid);
        if !directed {
            let delay = agent.params.reaction_ms.sample(&mut self.rng);
            self.clock.schedule(
                at + delay,
                Item::Wake {
                    worker: worker.clone(),
                    session: sid,
                },
            );
        }
    }

    /// Reacts to everything the engine logged since the last call.
    fn observe(&mut self) {
        let new: Vec<_> = self.engine.log().since(self.seen).to_vec();
        for e in new {
            self.seen = e.seq;
            match &e.event {
                Event::AssignmentClaimed { worker_id, .. }
                | Event::RetainerDispatched {
                    worker_id,
                    phase: DispatchPhase::Joined,
                    ..
                } => {
                    let serving = self.engine.state().serving.get(worker_id).copied();
                    if let (Some(s), Some(sid)) = (serving, e.session_id) {
                        if s == sid {
                            self.on_join(worker_id, sid, e.at);
                        }
                    }
                }
                Event::RetainerDispatched {
                    worker_id,
                    phase: DispatchPhase::Pinged { .. },
                    ..
                } => {
                    let Some(agent) = self.agents.get(worker_id) else {
                        continue;
                    };
                    let p = agent.params;
                    if !self.rng.random_bool(p.ping_miss) {
                        let delay = p.ping_response_ms.sample(&mut self.rng);
                        self.clock.schedule(
                            e.at + delay,
                            Item::PingAnswer {
                                worker: worker_id.clone(),
                            },
                        );
                    }
                }
                Event::SubmissionRecorded { worker_id, .. } => {
                    if let Some(agent) = self.agents.get_mut(worker_id) {
                        if agent.session == e.session_id {
                            agent.session = None;
                        }
                    }
                }
                Event::MessageDelivered { user_id, .. } => {
                    self.on_delivered(user_id, e.session_id, e.at);
                }
                Event::SessionClosed { .. } => {
                    for user in &mut self.users {
                        for rt in &mut user.rt {
                            if rt.session == e.session_id && rt.awaiting_since.is_some() {
                                rt.awaiting_since = None;
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn on_delivered(&mut self, user: &UserId, sid: Option<SessionId>, at: Timestamp) {
        let Some(u) = self.users.iter().position(|x| &x.id == user) else {
            return;
        };
        for p in 0..self.users[u].plans.len() {
            let rt = &self.users[u].rt[p];
            let ready = rt.session == sid && rt.awaiting_since.is_some_and(|s| s <= at);
            if !ready {
                continue;
            }
            let turn = rt.next_turn;
            let delay = self.users[u].plans[p].turns[turn].delay_ms;
            self.users[u].rt[p].awaiting_since = None;
            self.clock.schedule(
                at + delay,
                Item::UserTurn {
                    user: u,
                    plan: p,
                    turn,
                },
            );
        }
    }
}
