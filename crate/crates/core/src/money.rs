//! Exact currency arithmetic.
//!
//! Amounts are whole cents. Sub-cent rates (a bonus of half a cent per point)
//! are carried in micro-dollars and only rounded once, half-up, when they are
//! turned into an amount.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// An amount of money in US cents.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Cents(pub i64);

impl Cents {
    pub const ZERO: Cents = Cents(0);

    pub fn from_dollars(dollars: i64, cents: i64) -> Self {
        Cents(dollars * 100 + cents)
    }

    pub fn as_dollars_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}${}.{:02}", abs / 100, abs % 100)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid currency amount `{0}`")]
pub struct ParseCentsError(String);

impl FromStr for Cents {
    type Err = ParseCentsError;

    /// Accepts `2.80`, `$2.80`, `-$0.05` and `3`; at most two decimals.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseCentsError(s.to_owned());
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let t = t.strip_prefix('$').unwrap_or(t);
        let (whole, frac) = match t.split_once('.') {
            Some((w, f)) => (w, f),
            None => (t, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(err());
        }
        if frac.len() > 2 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
        let whole: i64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| err())?
        };
        let frac_cents: i64 = match frac.len() {
            0 => 0,
            1 => frac.parse::<i64>().map_err(|_| err())? * 10,
            _ => frac.parse().map_err(|_| err())?,
        };
        let v = whole * 100 + frac_cents;
        Ok(Cents(if neg { -v } else { v }))
    }
}

impl Add for Cents {
    type Output = Cents;
    fn add(self, rhs: Cents) -> Cents {
        Cents(self.0 + rhs.0)
    }
}

impl AddAssign for Cents {
    fn add_assign(&mut self, rhs: Cents) {
        self.0 += rhs.0;
    }
}

impl Sub for Cents {
    type Output = Cents;
    fn sub(self, rhs: Cents) -> Cents {
        Cents(self.0 - rhs.0)
    }
}

impl Mul<i64> for Cents {
    type Output = Cents;
    fn mul(self, rhs: i64) -> Cents {
        Cents(self.0 * rhs)
    }
}

impl Sum for Cents {
    fn sum<I: Iterator<Item = Cents>>(iter: I) -> Cents {
        iter.fold(Cents::ZERO, Add::add)
    }
}

/// A rate expressed in millionths of a dollar (10_000 per cent).
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MicroDollars(pub u64);

impl MicroDollars {
    pub const PER_CENT: u64 = 10_000;

    /// `count` units at this rate, rounded half-up to the cent.
    pub fn times(self, count: u64) -> Cents {
        let micros = u128::from(self.0) * u128::from(count);
        Cents(div_round_half_up(micros, u128::from(Self::PER_CENT)) as i64)
    }
}

impl fmt::Display for MicroDollars {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

/// `num / den` rounded half-up. `den` must be non-zero.
pub fn div_round_half_up(num: u128, den: u128) -> u128 {
    assert!(den != 0, "division by zero");
    (2 * num + den) / (2 * den)
}

/// Platform commission charged on top of base pay, in percent.
///
/// The crowd platform charges 40% on postings with ten or more assignments
/// and 20% otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeSchedule {
    pub small_batch_percent: u32,
    pub large_batch_percent: u32,
    pub large_batch_min_assignments: u32,
}

impl Default for FeeSchedule {
    fn default() -> Self {
        Self {
            small_batch_percent: 20,
            large_batch_percent: 40,
            large_batch_min_assignments: 10,
        }
    }
}

impl FeeSchedule {
    pub fn percent_for(&self, n_assignments: u32) -> u32 {
        if n_assignments >= self.large_batch_min_assignments {
            self.large_batch_percent
        } else {
            self.small_batch_percent
        }
    }

    /// Fee on `amount` at `percent`, rounded half-up to the cent.
    pub fn fee(amount: Cents, percent: u32) -> Cents {
        debug_assert!(amount.0 >= 0);
        let v = div_round_half_up(amount.0 as u128 * u128::from(percent), 100);
        Cents(v as i64)
    }
}
