use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Role;

/// Token and call counters for a single backend role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
}

impl RoleUsage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl AddAssign for RoleUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
        self.calls += rhs.calls;
    }
}

/// Additive usage ledger: per-role tokens, checker time and call counts.
///
/// Merging is associative and commutative with `UsageRecord::default()` as
/// identity. Checker time is kept in whole microseconds so that merges stay
/// exact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    #[serde(default)]
    pub roles: BTreeMap<Role, RoleUsage>,
    #[serde(default)]
    pub checker_micros: u64,
    /// Set when any token count in the record came from the whitespace
    /// estimator instead of backend-reported usage.
    #[serde(default)]
    pub approximate: bool,
}

impl UsageRecord {
    pub fn for_call(role: Role, prompt_tokens: u64, completion_tokens: u64, estimated: bool) -> Self {
        let mut roles = BTreeMap::new();
        roles.insert(
            role,
            RoleUsage {
                prompt_tokens,
                completion_tokens,
                calls: 1,
            },
        );
        Self {
            roles,
            checker_micros: 0,
            approximate: estimated,
        }
    }

    pub fn checker_time(elapsed: Duration) -> Self {
        Self {
            checker_micros: elapsed.as_micros() as u64,
            ..Self::default()
        }
    }

    pub fn role(&self, role: Role) -> RoleUsage {
        self.roles.get(&role).copied().unwrap_or_default()
    }

    pub fn tokens(&self, role: Role) -> u64 {
        self.role(role).total_tokens()
    }

    pub fn total_tokens(&self) -> u64 {
        self.roles.values().map(RoleUsage::total_tokens).sum()
    }

    pub fn total_calls(&self) -> u64 {
        self.roles.values().map(|u| u.calls).sum()
    }

    pub fn checker_seconds(&self) -> f64 {
        self.checker_micros as f64 / 1e6
    }

    pub fn merge(&mut self, other: &UsageRecord) {
        for (role, usage) in &other.roles {
            *self.roles.entry(*role).or_default() += *usage;
        }
        self.checker_micros += other.checker_micros;
        self.approximate |= other.approximate;
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

impl Add for UsageRecord {
    type Output = UsageRecord;

    fn add(mut self, rhs: Self) -> Self::Output {
        self.merge(&rhs);
        self
    }
}

impl AddAssign<&UsageRecord> for UsageRecord {
    fn add_assign(&mut self, rhs: &UsageRecord) {
        self.merge(rhs);
    }
}

impl std::iter::Sum for UsageRecord {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(UsageRecord::default(), Add::add)
    }
}

/// Whitespace token estimator used when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
