//! Inference cost: `C = 2N + 2 * n_layer * n_ctx * d_attn` FLOPs per token,
//! multiplied by the tokens each role processed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{Role, UsageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCostConfig {
    pub n_params: u64,
    pub n_layer: u64,
    #[serde(default = "default_ctx")]
    pub n_ctx: u64,
    pub d_attn: u64,
}

fn default_ctx() -> u64 {
    8192
}

impl ModelCostConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_params == 0 || self.n_layer == 0 || self.n_ctx == 0 || self.d_attn == 0 {
            return Err("model cost fields must all be positive".into());
        }
        Ok(())
    }

    pub fn flops_per_token(&self) -> u128 {
        2 * self.n_params as u128 + 2 * self.n_layer as u128 * self.n_ctx as u128 * self.d_attn as u128
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    #[serde(with = "u128_string")]
    pub total: u128,
    #[serde(with = "u128_map")]
    pub per_role: BTreeMap<Role, u128>,
    /// Roles that consumed tokens but have no cost model.
    pub unconfigured: Vec<Role>,
}

pub fn estimate_flops(costs: &BTreeMap<Role, ModelCostConfig>, usage: &UsageRecord) -> FlopEstimate {
    let mut out = FlopEstimate::default();
    for role in Role::ALL {
        let tokens = usage.tokens(role);
        match costs.get(&role) {
            Some(c) => {
                let f = c.flops_per_token() * tokens as u128;
                out.per_role.insert(role, f);
                out.total += f;
            }
            None if tokens > 0 => out.unconfigured.push(role),
            None => {}
        }
    }
    out
}

// JSON numbers cannot hold every u128 losslessly, so totals are strings.
mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

mod u128_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::backends::Role;

    pub fn serialize<S: Serializer>(v: &BTreeMap<Role, u128>, s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|(k, f)| (*k, f.to_string()))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Role, u128>, D::Error> {
        BTreeMap::<Role, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| v.parse().map(|f| (k, f)).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cost(n: u64, l: u64, c: u64, d: u64) -> ModelCostConfig {
        ModelCostConfig {
            n_params: n,
            n_layer: l,
            n_ctx: c,
            d_attn: d,
        }
    }

    #[test]
    fn zero_model_costs_nothing() {
        let costs = BTreeMap::from([(Role::Reasoner, cost(0, 0, 8192, 4096))]);
        let usage = UsageRecord::for_call(Role::Reasoner, 1000, 500, false);
        assert_eq!(estimate_flops(&costs, &usage).total, 0);
    }

    #[test]
    fn unconfigured_roles_are_flagged() {
        let costs = BTreeMap::from([(Role::Reasoner, cost(10, 1, 1, 1))]);
        let mut usage = UsageRecord::for_call(Role::Reasoner, 1, 0, false);
        usage.merge(&UsageRecord::for_call(Role::Prover, 5, 5, false));
        let e = estimate_flops(&costs, &usage);
        assert_eq!(e.total, 22);
        assert_eq!(e.unconfigured, vec![Role::Prover]);
        let back: FlopEstimate = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    proptest! {
        #[test]
        fn linear_in_tokens_and_params(
            n in 0u64..1_000_000_000, l in 0u64..200, c in 1u64..100_000, d in 0u64..20_000,
            t1 in 0u64..1_000_000, t2 in 0u64..1_000_000,
        ) {
            let costs = |n| BTreeMap::from([(Role::Reasoner, cost(n, l, c, d))]);
            let u = |t| UsageRecord::for_call(Role::Reasoner, t, 0, false);
            let f = |n, t| estimate_flops(&costs(n), &u(t)).total;
            prop_assert_eq!(f(n, t1 + t2), f(n, t1) + f(n, t2));
            // Doubling N adds exactly 2N per token.
            prop_assert_eq!(f(2 * n, t1), f(n, t1) + 2 * n as u128 * t1 as u128);
        }
    }
}
