//! Order-book construction, quotation validation and market clearing.
//!
//! Every mechanism is a pure function from a slice of [`Quotation`]s to a
//! [`TradeLedger`]. The trading role is carried by the sign of the quoted
//! price: non-negative prices buy, negative prices sell.

mod baselines;
mod jpq;
mod ledger;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{clear_greedy, clear_mrda, clear_vvda, MrdaConfig};
pub use jpq::{clear_jpq, clear_jpq_traced, JpqTrace};
pub use ledger::{Trade, TradeLedger};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("price envelope must satisfy 0 <= feed_in <= day_ahead <= emergency, got ({feed_in}, {day_ahead}, {emergency})")]
    InvalidEnvelope {
        feed_in: f64,
        day_ahead: f64,
        emergency: f64,
    },
    #[error("agent {agent_id}: |price| = {abs_price} outside [{feed_in}, {emergency}]")]
    PriceOutOfEnvelope {
        agent_id: usize,
        abs_price: f64,
        feed_in: f64,
        emergency: f64,
    },
    #[error("agent {agent_id}: quantity {quantity} is negative or not finite")]
    NegativeQuantity { agent_id: usize, quantity: f64 },
    #[error("bid {bid} is below ask {ask}")]
    CrossViolation { bid: f64, ask: f64 },
    #[error("unknown mechanism {0:?} (expected jpq, greedy, mrda or vvda)")]
    UnknownMechanism(String),
}

/// Main-grid prices for one hour: feed-in tariff, day-ahead and emergency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceEnvelope {
    pub feed_in: f64,
    pub day_ahead: f64,
    pub emergency: f64,
}

impl PriceEnvelope {
    pub fn new(feed_in: f64, day_ahead: f64, emergency: f64) -> Result<Self, MarketError> {
        let env = PriceEnvelope {
            feed_in,
            day_ahead,
            emergency,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        let ordered = 0.0 <= self.feed_in
            && self.feed_in <= self.day_ahead
            && self.day_ahead <= self.emergency
            && self.emergency.is_finite();
        if ordered {
            Ok(())
        } else {
            Err(MarketError::InvalidEnvelope {
                feed_in: self.feed_in,
                day_ahead: self.day_ahead,
                emergency: self.emergency,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Buyer,
    Seller,
}

/// One agent's quote for the current hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quotation {
    pub agent_id: usize,
    /// Signed price per kWh; `>= 0` buys, `< 0` sells.
    pub price: f64,
    /// kWh, non-negative.
    pub quantity: f64,
}

impl Quotation {
    pub fn new(agent_id: usize, price: f64, quantity: f64) -> Self {
        Quotation {
            agent_id,
            price,
            quantity,
        }
    }

    pub fn role(&self) -> Role {
        if self.price >= 0.0 {
            Role::Buyer
        } else {
            Role::Seller
        }
    }

    pub fn abs_price(&self) -> f64 {
        self.price.abs()
    }

    pub fn is_null(&self) -> bool {
        self.quantity == 0.0
    }
}

/// Accepts a null quote (zero quantity) or one whose absolute price lies in
/// `[feed_in, emergency]`.
pub fn validate_quotation(q: &Quotation, env: &PriceEnvelope) -> Result<(), MarketError> {
    if !(q.quantity >= 0.0) || !q.quantity.is_finite() {
        return Err(MarketError::NegativeQuantity {
            agent_id: q.agent_id,
            quantity: q.quantity,
        });
    }
    if q.is_null() {
        return Ok(());
    }
    let abs = q.abs_price();
    if !(env.feed_in <= abs && abs <= env.emergency) {
        return Err(MarketError::PriceOutOfEnvelope {
            agent_id: q.agent_id,
            abs_price: abs,
            feed_in: env.feed_in,
            emergency: env.emergency,
        });
    }
    Ok(())
}

/// System imbalance signal: −1 surplus, 0 balanced, +1 deficit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum MarketFactor {
    Surplus,
    Balanced,
    Deficit,
}

impl MarketFactor {
    pub fn value(self) -> i8 {
        match self {
            MarketFactor::Surplus => -1,
            MarketFactor::Balanced => 0,
            MarketFactor::Deficit => 1,
        }
    }

    pub const ALL: [MarketFactor; 3] = [
        MarketFactor::Surplus,
        MarketFactor::Balanced,
        MarketFactor::Deficit,
    ];
}

impl From<MarketFactor> for i8 {
    fn from(m: MarketFactor) -> i8 {
        m.value()
    }
}

impl TryFrom<i8> for MarketFactor {
    type Error = String;
    fn try_from(v: i8) -> Result<Self, String> {
        match v {
            -1 => Ok(MarketFactor::Surplus),
            0 => Ok(MarketFactor::Balanced),
            1 => Ok(MarketFactor::Deficit),
            other => Err(format!("market factor must be -1, 0 or 1, got {other}")),
        }
    }
}

/// Splits quotes by role, dropping null quotes. Submission order is kept.
pub fn partition(quotes: &[Quotation]) -> (Vec<Quotation>, Vec<Quotation>) {
    let mut buyers = Vec::new();
    let mut sellers = Vec::new();
    for q in quotes.iter().filter(|q| q.quantity > 0.0) {
        match q.role() {
            Role::Buyer => buyers.push(*q),
            Role::Seller => sellers.push(*q),
        }
    }
    (buyers, sellers)
}

fn by_key_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn by_key_asc(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Market-driven ordering of both sides of the book.
///
/// Buyer keys are `p` and `p·q`; seller keys are `|p|` and `(p_e − |p|)·q`.
/// Under surplus buyers go by `p·q` (absorption), under deficit sellers go by
/// `(p_e − |p|)·q` (welfare contribution); otherwise plain price priority.
/// Ties fall back to the lower agent id.
pub fn sort_order_book(
    buyers: &mut [Quotation],
    sellers: &mut [Quotation],
    m: MarketFactor,
    emergency_price: f64,
) {
    let buyer_volume = |q: &Quotation| q.price * q.quantity;
    let seller_welfare = |q: &Quotation| (emergency_price - q.abs_price()) * q.quantity;

    match m {
        MarketFactor::Surplus => buyers.sort_by(|a, b| {
            by_key_desc(buyer_volume(a), buyer_volume(b)).then(a.agent_id.cmp(&b.agent_id))
        }),
        MarketFactor::Deficit | MarketFactor::Balanced => buyers
            .sort_by(|a, b| by_key_desc(a.price, b.price).then(a.agent_id.cmp(&b.agent_id))),
    }
    match m {
        MarketFactor::Deficit => sellers.sort_by(|a, b| {
            by_key_desc(seller_welfare(a), seller_welfare(b)).then(a.agent_id.cmp(&b.agent_id))
        }),
        MarketFactor::Surplus | MarketFactor::Balanced => sellers.sort_by(|a, b| {
            by_key_asc(a.abs_price(), b.abs_price()).then(a.agent_id.cmp(&b.agent_id))
        }),
    }
}

/// Plain price priority: buyers by descending bid, sellers by ascending ask.
pub(crate) fn sort_price_priority(buyers: &mut [Quotation], sellers: &mut [Quotation]) {
    sort_order_book(buyers, sellers, MarketFactor::Balanced, 0.0);
}

pub fn midpoint_price(bid: f64, ask_abs: f64) -> Result<f64, MarketError> {
    if bid < ask_abs {
        return Err(MarketError::CrossViolation { bid, ask: ask_abs });
    }
    Ok((bid + ask_abs) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Jpq,
    Greedy,
    Mrda,
    Vvda,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 4] = [
        MechanismKind::Jpq,
        MechanismKind::Greedy,
        MechanismKind::Mrda,
        MechanismKind::Vvda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Jpq => "jpq",
            MechanismKind::Greedy => "greedy",
            MechanismKind::Mrda => "mrda",
            MechanismKind::Vvda => "vvda",
        }
    }

    /// Whether the mechanism settles every trade at a single mid-point price.
    pub fn is_budget_balanced(self) -> bool {
        !matches!(self, MechanismKind::Vvda)
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = MarketError;
    fn from_str(s: &str) -> Result<Self, MarketError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jpq" => Ok(MechanismKind::Jpq),
            "greedy" => Ok(MechanismKind::Greedy),
            "mrda" => Ok(MechanismKind::Mrda),
            "vvda" => Ok(MechanismKind::Vvda),
            _ => Err(MarketError::UnknownMechanism(s.to_string())),
        }
    }
}

/// A configured clearing mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    Jpq,
    Greedy,
    Mrda(MrdaConfig),
    Vvda,
}

impl Mechanism {
    pub fn kind(&self) -> MechanismKind {
        match self {
            Mechanism::Jpq => MechanismKind::Jpq,
            Mechanism::Greedy => MechanismKind::Greedy,
            Mechanism::Mrda(_) => MechanismKind::Mrda,
            Mechanism::Vvda => MechanismKind::Vvda,
        }
    }

    pub fn from_kind(kind: MechanismKind, mrda: MrdaConfig) -> Self {
        match kind {
            MechanismKind::Jpq => Mechanism::Jpq,
            MechanismKind::Greedy => Mechanism::Greedy,
            MechanismKind::Mrda => Mechanism::Mrda(mrda),
            MechanismKind::Vvda => Mechanism::Vvda,
        }
    }

    /// Clears one hour. `m` only affects JPQ; the envelope bounds MRDA concessions.
    pub fn clear(&self, quotes: &[Quotation], m: MarketFactor, env: &PriceEnvelope) -> TradeLedger {
        match self {
            Mechanism::Jpq => clear_jpq(quotes, m, env.emergency),
            Mechanism::Greedy => clear_greedy(quotes),
            Mechanism::Mrda(cfg) => clear_mrda(quotes, cfg, env),
            Mechanism::Vvda => clear_vvda(quotes),
        }
    }
}
