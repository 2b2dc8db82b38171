//! The seam to a crowd marketplace.
//!
//! [`CrowdPlatform`] is the only interface to the outside labor market. The
//! service ships two implementations: [`ManualPlatform`], whose claims are
//! pushed in by the HTTP API, and [`SimulatedPlatform`], a seeded model of
//! claim latency used by the simulator.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::ids::{AssignmentId, HitId, WorkerId};
use crate::money::Cents;
use crate::time::{Timestamp, MINUTE_MS, SECOND_MS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlatformError {
    #[error("crowd platform unavailable: {0}")]
    Unavailable(String),
}

/// A worker accepted one assignment of a HIT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimEvent {
    pub hit_id: HitId,
    pub worker_id: WorkerId,
    pub at: Timestamp,
}

pub trait CrowdPlatform {
    fn post_hit(
        &mut self,
        n_assignments: u32,
        base_pay: Cents,
        now: Timestamp,
    ) -> Result<HitId, PlatformError>;

    fn expire_assignment(&mut self, hit: HitId, assignment: AssignmentId, now: Timestamp);

    fn pay_bonus(&mut self, worker: &WorkerId, amount: Cents, now: Timestamp);

    /// Claims that have arrived by `now`. `busy` reports workers that are
    /// already serving a session or waiting in the retainer.
    fn poll_claims(&mut self, now: Timestamp, busy: &dyn Fn(&WorkerId) -> bool) -> Vec<ClaimEvent>;

    /// When the next claim is due, if the platform knows.
    fn next_claim_at(&self) -> Option<Timestamp> {
        None
    }
}

/// Records calls; claims are injected by the caller.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualPlatform {
    next_hit: u64,
    pub posted: Vec<(HitId, u32, Cents, Timestamp)>,
    pub expired: Vec<(HitId, AssignmentId)>,
    pub bonuses: Vec<(WorkerId, Cents)>,
    pub inbound: Vec<ClaimEvent>,
    pub unavailable: bool,
}

impl ManualPlatform {
    pub fn new() -> Self {
        Self::default()
    }

    /// The next HIT id will be `last + 1`. Used when resuming from a log.
    pub fn set_next_hit(&mut self, last: u64) {
        self.next_hit = last;
    }

    pub fn push_claim(&mut self, claim: ClaimEvent) {
        self.inbound.push(claim);
    }
}

impl CrowdPlatform for ManualPlatform {
    fn post_hit(
        &mut self,
        n: u32,
        base_pay: Cents,
        now: Timestamp,
    ) -> Result<HitId, PlatformError> {
        if self.unavailable {
            return Err(PlatformError::Unavailable("manual platform offline".into()));
        }
        self.next_hit += 1;
        let id = HitId(self.next_hit);
        self.posted.push((id, n, base_pay, now));
        Ok(id)
    }

    fn expire_assignment(&mut self, hit: HitId, assignment: AssignmentId, _now: Timestamp) {
        self.expired.push((hit, assignment));
    }

    fn pay_bonus(&mut self, worker: &WorkerId, amount: Cents, _now: Timestamp) {
        self.bonuses.push((worker.clone(), amount));
    }

    fn poll_claims(
        &mut self,
        now: Timestamp,
        _busy: &dyn Fn(&WorkerId) -> bool,
    ) -> Vec<ClaimEvent> {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.inbound)
            .into_iter()
            .partition(|c| c.at <= now);
        self.inbound = later;
        due
    }

    fn next_claim_at(&self) -> Option<Timestamp> {
        self.inbound.iter().map(|c| c.at).min()
    }
}

/// Occasional very slow recruiting (tens of minutes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HeavyTail {
    pub probability: f64,
    pub min_secs: f64,
    pub max_secs: f64,
}

/// Time from posting a HIT to its first claim, plus spacing of later claims.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct ClaimLatencyModel {
    /// Location of ln(seconds) for the first claim.
    pub first_claim_mu: f64,
    /// Scale of ln(seconds) for the first claim.
    pub first_claim_sigma: f64,
    /// Mean seconds between successive claims on the same HIT.
    pub subsequent_gap_mean_secs: f64,
    pub heavy_tail: Option<HeavyTail>,
    /// Extra delay the first time a worker ever joins (the tutorial).
    pub tutorial_delay_secs: f64,
}

impl Default for ClaimLatencyModel {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl ClaimLatencyModel {
    /// Fitted so that first crowd responses land at roughly 25% within
    /// 30 s, 60% within 60 s and 88% within 120 s, once a diligent worker's
    /// reaction time is added.
    pub fn calibrated() -> Self {
        Self {
            first_claim_mu: 3.772,
            first_claim_sigma: 0.836,
            subsequent_gap_mean_secs: 25.0,
            heavy_tail: None,
            tutorial_delay_secs: 0.0,
        }
    }

    /// Same body with a rare 20-30 minute recruiting stall.
    pub fn calibrated_heavy_tail() -> Self {
        Self {
            heavy_tail: Some(HeavyTail {
                probability: 0.01,
                min_secs: 20.0 * 60.0,
                max_secs: 30.0 * 60.0,
            }),
            ..Self::calibrated()
        }
    }

    /// Quick recruiting, for scenarios that are not about latency.
    pub fn fast() -> Self {
        Self {
            first_claim_mu: (10.0f64).ln(),
            first_claim_sigma: 0.4,
            subsequent_gap_mean_secs: 6.0,
            heavy_tail: None,
            tutorial_delay_secs: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.first_claim_sigma.is_finite() && self.first_claim_sigma > 0.0) {
            return Err("first_claim_sigma must be positive".into());
        }
        if !self.first_claim_mu.is_finite() {
            return Err("first_claim_mu must be finite".into());
        }
        if !(self.subsequent_gap_mean_secs.is_finite() && self.subsequent_gap_mean_secs > 0.0) {
            return Err("subsequent_gap_mean_secs must be positive".into());
        }
        if self.tutorial_delay_secs.is_nan() || self.tutorial_delay_secs < 0.0 {
            return Err("tutorial_delay_secs must be non-negative".into());
        }
        if let Some(h) = self.heavy_tail {
            if !(0.0..=1.0).contains(&h.probability)
                || h.min_secs.is_nan()
                || h.max_secs.is_nan()
                || h.min_secs > h.max_secs
            {
                return Err("invalid heavy tail".into());
            }
        }
        Ok(())
    }

    fn sample_first_secs<R: Rng>(&self, rng: &mut R) -> f64 {
        let base = LogNormal::new(self.first_claim_mu, self.first_claim_sigma)
            .expect("validated")
            .sample(rng);
        match self.heavy_tail {
            Some(h) if rng.random::<f64>() < h.probability => {
                rng.random_range(h.min_secs..=h.max_secs)
            }
            _ => base,
        }
    }

    fn sample_gap_secs<R: Rng>(&self, rng: &mut R) -> f64 {
        Exp::new(1.0 / self.subsequent_gap_mean_secs)
            .expect("validated")
            .sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PendingClaim {
    hit: HitId,
    worker: Option<WorkerId>,
    retries: u32,
}

const MAX_CLAIM_RETRIES: u32 = 3;

/// A seeded marketplace with a fixed worker population.
#[derive(Debug, Clone)]
pub struct SimulatedPlatform {
    rng: ChaCha8Rng,
    model: ClaimLatencyModel,
    population: Vec<WorkerId>,
    next_hit: u64,
    next_key: u64,
    pending: BTreeMap<(Timestamp, u64), PendingClaim>,
    reserved: BTreeSet<WorkerId>,
    tutored: BTreeSet<WorkerId>,
    hit_workers: BTreeMap<HitId, BTreeSet<WorkerId>>,
    pub bonuses: Vec<(WorkerId, Cents, Timestamp)>,
    pub expired: Vec<(HitId, AssignmentId)>,
    pub posted: Vec<(HitId, u32, Cents, Timestamp)>,
}

impl SimulatedPlatform {
    pub fn new(seed: u64, model: ClaimLatencyModel, population: Vec<WorkerId>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            model,
            population,
            next_hit: 0,
            next_key: 0,
            pending: BTreeMap::new(),
            reserved: BTreeSet::new(),
            tutored: BTreeSet::new(),
            hit_workers: BTreeMap::new(),
            bonuses: Vec::new(),
            expired: Vec::new(),
            posted: Vec::new(),
        }
    }

    pub fn model(&self) -> &ClaimLatencyModel {
        &self.model
    }

    fn schedule(&mut self, at: Timestamp, claim: PendingClaim) {
        self.next_key += 1;
        self.pending.insert((at, self.next_key), claim);
    }

    fn secs(s: f64) -> u64 {
        (s.max(0.0) * SECOND_MS as f64).round() as u64
    }

    fn pick_worker(&mut self, hit: HitId, busy: &dyn Fn(&WorkerId) -> bool) -> Option<WorkerId> {
        let taken = self.hit_workers.get(&hit);
        let candidates: Vec<&WorkerId> = self
            .population
            .iter()
            .filter(|w| !busy(w) && !self.reserved.contains(*w))
            .filter(|w| taken.is_none_or(|t| !t.contains(*w)))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let i = self.rng.random_range(0..candidates.len());
        Some(candidates[i].clone())
    }
}

impl CrowdPlatform for SimulatedPlatform {
    fn post_hit(
        &mut self,
        n: u32,
        base_pay: Cents,
        now: Timestamp,
    ) -> Result<HitId, PlatformError> {
        self.next_hit += 1;
        let hit = HitId(self.next_hit);
        self.posted.push((hit, n, base_pay, now));
        let mut t = now + Self::secs(self.model.sample_first_secs(&mut self.rng));
        for i in 0..n {
            if i > 0 {
                t = t + Self::secs(self.model.sample_gap_secs(&mut self.rng));
            }
            self.schedule(
                t,
                PendingClaim {
                    hit,
                    worker: None,
                    retries: 0,
                },
            );
        }
        Ok(hit)
    }

    fn expire_assignment(&mut self, hit: HitId, assignment: AssignmentId, _now: Timestamp) {
        self.expired.push((hit, assignment));
    }

    fn pay_bonus(&mut self, worker: &WorkerId, amount: Cents, now: Timestamp) {
        self.bonuses.push((worker.clone(), amount, now));
    }

    fn poll_claims(&mut self, now: Timestamp, busy: &dyn Fn(&WorkerId) -> bool) -> Vec<ClaimEvent> {
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            let (at, _) = *entry.key();
            if at > now {
                break;
            }
            let claim = entry.remove();
            match claim.worker {
                Some(w) => {
                    self.reserved.remove(&w);
                    self.hit_workers
                        .entry(claim.hit)
                        .or_default()
                        .insert(w.clone());
                    out.push(ClaimEvent {
                        hit_id: claim.hit,
                        worker_id: w,
                        at,
                    });
                }
                None => match self.pick_worker(claim.hit, busy) {
                    Some(w) => {
                        let first_time = self.tutored.insert(w.clone());
                        let delay = if first_time {
                            Self::secs(self.model.tutorial_delay_secs)
                        } else {
                            0
                        };
                        if delay > 0 {
                            self.reserved.insert(w.clone());
                            self.schedule(
                                at + delay,
                                PendingClaim {
                                    hit: claim.hit,
                                    worker: Some(w),
                                    retries: claim.retries,
                                },
                            );
                        } else {
                            self.hit_workers
                                .entry(claim.hit)
                                .or_default()
                                .insert(w.clone());
                            out.push(ClaimEvent {
                                hit_id: claim.hit,
                                worker_id: w,
                                at,
                            });
                        }
                    }
                    None if claim.retries < MAX_CLAIM_RETRIES => {
                        let gap = Self::secs(self.model.sample_gap_secs(&mut self.rng))
                            .max(MINUTE_MS / 2);
                        self.schedule(
                            at + gap,
                            PendingClaim {
                                retries: claim.retries + 1,
                                ..claim
                            },
                        );
                    }
                    None => {}
                },
            }
        }
        out
    }

    fn next_claim_at(&self) -> Option<Timestamp> {
        self.pending.keys().next().map(|(t, _)| *t)
    }
}
