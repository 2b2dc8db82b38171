//! Requester cost from a log: base pay with platform fee, bonuses, and
//! retainer waiting pay, per HIT and in total.
//!
//! "Base" follows the usual way of quoting a HIT: assignments times pay,
//! plus the platform fee on that amount. A 10-assignment HIT at $0.20 is
//! $2.80. The per-day figure divides the base total only; bonuses and
//! retainer pay are reported separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::event::{Event, EventLogEntry};
use crate::ids::{AssignmentId, HitId, SessionId, WorkerId};
use crate::money::{div_round_half_up, Cents, FeeSchedule};
use crate::recruiting::{retainer_pay_owed, DispatchPhase, RetainerStay};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("negative assignment count {0}")]
    NegativeAssignments(i64),
}

/// `n × base_pay` plus the default platform fee.
pub fn hit_base_cost(n_assignments: i64, base_pay: Cents) -> Result<Cents, CostError> {
    hit_base_cost_with(n_assignments, base_pay, &FeeSchedule::default())
}

pub fn hit_base_cost_with(
    n_assignments: i64,
    base_pay: Cents,
    fees: &FeeSchedule,
) -> Result<Cents, CostError> {
    if n_assignments < 0 {
        return Err(CostError::NegativeAssignments(n_assignments));
    }
    let pay = base_pay * n_assignments;
    let percent = fees.percent_for(n_assignments.min(i64::from(u32::MAX)) as u32);
    Ok(pay + FeeSchedule::fee(pay, percent))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCost {
    pub hit_id: HitId,
    pub session_id: Option<SessionId>,
    pub assignments: u32,
    pub fee_percent: u32,
    /// Assignments × pay, fee included.
    pub base: Cents,
    /// The fee part of `base`.
    pub fee: Cents,
    pub bonus: Cents,
    /// Waiting pay for retainer stays on this HIT's assignments, fee included.
    pub retainer: Cents,
    pub total: Cents,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub base: Cents,
    pub fee: Cents,
    pub bonus: Cents,
    pub retainer: Cents,
    pub grand: Cents,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_hit: Vec<HitCost>,
    pub totals: CostTotals,
    /// `totals.base / period_days`, rounded half-up.
    pub per_day: Cents,
    pub period_days: u32,
    pub sessions: u32,
    /// Mean of base + bonus over sessions that posted a HIT.
    pub mean_per_session: Cents,
}

/// Whole days between the first and last entry, at least one.
pub fn log_span_days(entries: &[EventLogEntry]) -> u32 {
    match (entries.first(), entries.last()) {
        (Some(a), Some(b)) => b.at.since(a.at).div_ceil(crate::time::DAY_MS).max(1) as u32,
        _ => 1,
    }
}

/// Aggregates a log into a cost report. An empty log gives a zero report.
pub fn deployment_cost_summary(
    entries: &[EventLogEntry],
    period_days: u32,
    fees: &FeeSchedule,
    retainer_rate_per_half_hour: Cents,
    retainer_fee_percent: u32,
) -> CostReport {
    let mut hits: BTreeMap<HitId, HitCost> = BTreeMap::new();
    let mut hit_of: BTreeMap<AssignmentId, HitId> = BTreeMap::new();
    let mut holder: BTreeMap<(SessionId, WorkerId), AssignmentId> = BTreeMap::new();
    let mut open_stays: BTreeMap<WorkerId, (AssignmentId, Timestamp)> = BTreeMap::new();
    let mut stays: BTreeMap<HitId, Vec<RetainerStay>> = BTreeMap::new();
    let mut sessions = 0u32;
    let end = entries.last().map(|e| e.at).unwrap_or(Timestamp::ZERO);

    let mut close_stay = |open: &mut BTreeMap<WorkerId, (AssignmentId, Timestamp)>,
                          hit_of: &BTreeMap<AssignmentId, HitId>,
                          w: &WorkerId,
                          at: Timestamp| {
        if let Some((a, start)) = open.remove(w) {
            if let Some(h) = hit_of.get(&a) {
                stays.entry(*h).or_default().push(RetainerStay {
                    entered_at: start,
                    left_at: at,
                });
            }
        }
    };

    for e in entries {
        match &e.event {
            Event::SessionOpened { .. } => sessions += 1,
            Event::HitPosted {
                hit_id,
                assignments,
                base_pay,
            } => {
                let n = assignments.len() as u32;
                let percent = fees.percent_for(n);
                let base = hit_base_cost_with(i64::from(n), *base_pay, fees).expect("n >= 0");
                for a in assignments {
                    hit_of.insert(*a, *hit_id);
                }
                hits.insert(
                    *hit_id,
                    HitCost {
                        hit_id: *hit_id,
                        session_id: e.session_id,
                        assignments: n,
                        fee_percent: percent,
                        base,
                        fee: base - *base_pay * i64::from(n),
                        bonus: Cents::ZERO,
                        retainer: Cents::ZERO,
                        total: Cents::ZERO,
                    },
                );
            }
            Event::AssignmentClaimed {
                assignment_id,
                worker_id,
                ..
            } => {
                if let Some(s) = e.session_id {
                    holder.insert((s, worker_id.clone()), *assignment_id);
                }
            }
            Event::RetainerEntered {
                assignment_id,
                worker_id: Some(w),
                ..
            } => {
                open_stays.insert(w.clone(), (*assignment_id, e.at));
            }
            Event::RetainerDispatched {
                worker_id,
                assignment_id,
                phase: DispatchPhase::Joined,
            } => {
                close_stay(&mut open_stays, &hit_of, worker_id, e.at);
                if let Some(s) = e.session_id {
                    holder.insert((s, worker_id.clone()), *assignment_id);
                }
            }
            Event::RetainerExpired { worker_id, .. } => {
                close_stay(&mut open_stays, &hit_of, worker_id, e.at);
            }
            Event::BonusSettled {
                worker_id, amount, ..
            } => {
                let hit = e
                    .session_id
                    .and_then(|s| holder.get(&(s, worker_id.clone())))
                    .and_then(|a| hit_of.get(a));
                if let Some(h) = hit.and_then(|h| hits.get_mut(h)) {
                    h.bonus += *amount;
                }
            }
            _ => {}
        }
    }
    let still_open: Vec<WorkerId> = open_stays.keys().cloned().collect();
    for w in still_open {
        close_stay(&mut open_stays, &hit_of, &w, end);
    }

    let mut totals = CostTotals::default();
    let mut session_spend: BTreeMap<SessionId, Cents> = BTreeMap::new();
    for h in hits.values_mut() {
        h.retainer = stays
            .get(&h.hit_id)
            .map(|s| retainer_pay_owed(s, None, retainer_rate_per_half_hour, retainer_fee_percent))
            .unwrap_or(Cents::ZERO);
        h.total = h.base + h.bonus + h.retainer;
        totals.base += h.base;
        totals.fee += h.fee;
        totals.bonus += h.bonus;
        totals.retainer += h.retainer;
        totals.grand += h.total;
        if let Some(s) = h.session_id {
            *session_spend.entry(s).or_default() += h.base + h.bonus;
        }
    }
    let per_day = if period_days == 0 {
        Cents::ZERO
    } else {
        Cents(div_round_half_up(totals.base.0.max(0) as u128, u128::from(period_days)) as i64)
    };
    let mean_per_session = if session_spend.is_empty() {
        Cents::ZERO
    } else {
        let sum: Cents = session_spend.values().copied().sum();
        Cents(div_round_half_up(sum.0.max(0) as u128, session_spend.len() as u128) as i64)
    };
    CostReport {
        per_hit: hits.into_values().collect(),
        totals,
        per_day,
        period_days,
        sessions,
        mean_per_session,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_cost_examples() {
        assert_eq!(hit_base_cost(10, Cents(20)), Ok(Cents(280)));
        assert_eq!(hit_base_cost(5, Cents(20)), Ok(Cents(120)));
        assert_eq!(hit_base_cost(0, Cents(20)), Ok(Cents(0)));
        assert_eq!(
            hit_base_cost(-1, Cents(20)),
            Err(CostError::NegativeAssignments(-1))
        );
    }

    #[test]
    fn empty_log_is_all_zero() {
        let r = deployment_cost_summary(&[], 31, &FeeSchedule::default(), Cents(20), 20);
        assert_eq!(r.totals, CostTotals::default());
        assert_eq!(r.per_day, Cents::ZERO);
        assert!(r.per_hit.is_empty());
    }
}
