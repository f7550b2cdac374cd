//! Rule-based agents used as baselines and as oracles for mechanism tests.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};
use crate::market::Role;
use crate::microgrid::{max_bid_quantity, MicrogridParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptRule {
    /// Sell the observed surplus near the feed-in tariff, buy the observed
    /// deficit near the emergency price, keep full storage capacity.
    NetPosition,
    /// Uniform draw over the action box.
    Random,
    /// All-zero action: a null buy quote and no usable storage.
    Zero,
}

impl fmt::Display for ScriptRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScriptRule::NetPosition => "net-position",
            ScriptRule::Random => "random",
            ScriptRule::Zero => "zero",
        })
    }
}

impl FromStr for ScriptRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "net-position" => Ok(ScriptRule::NetPosition),
            "random" => Ok(ScriptRule::Random),
            "zero" => Ok(ScriptRule::Zero),
            other => Err(format!("unknown policy rule {other:?}; expected net-position, random or zero")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub rule: ScriptRule,
    /// Distance from the envelope edge as a fraction of `p_e − p_f`.
    pub margin: f64,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        ScriptedPolicy {
            rule: ScriptRule::NetPosition,
            margin: 0.1,
        }
    }
}

impl ScriptedPolicy {
    pub fn new(rule: ScriptRule, margin: f64) -> Self {
        ScriptedPolicy { rule, margin }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(format!("policy.margin must lie in [0, 1], got {}", self.margin));
        }
        Ok(())
    }

    pub fn act<R: Rng>(&self, obs: &Observation, params: &MicrogridParams, dt: f64, rng: &mut R) -> Action {
        match self.rule {
            ScriptRule::Zero => Action::default(),
            ScriptRule::Random => Action::new(rng.random_range(-1.0..=1.0), rng.random(), rng.random()),
            ScriptRule::NetPosition => self.net_position(obs, params, dt),
        }
    }

    fn net_position(&self, obs: &Observation, params: &MicrogridParams, dt: f64) -> Action {
        let Some(slot) = obs.current() else {
            return Action::new(0.0, 0.0, 1.0);
        };
        let net = slot.load - slot.gen - slot.q_da;
        let (role, amount) = if net > 0.0 {
            (Role::Buyer, net)
        } else {
            (Role::Seller, -net)
        };
        let cap = max_bid_quantity(slot.load, slot.gen, role, dt, params);
        let qty_frac = if cap > 0.0 { (amount / cap).clamp(0.0, 1.0) } else { 0.0 };
        let price_raw = match role {
            Role::Buyer => 1.0 - self.margin,
            // a margin of 0 would map to +0.0 and flip the role
            Role::Seller => -self.margin.max(f64::MIN_POSITIVE),
        };
        Action::new(price_raw, qty_frac, 1.0)
    }
}
