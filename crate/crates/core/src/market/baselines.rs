//! Reference mechanisms for comparison with JPQ: greedy price priority,
//! multi-round concession (MRDA) and a McAfee-style Vickrey variant (VVDA).

use serde::{Deserialize, Serialize};

use super::{partition, sort_price_priority, PriceEnvelope, Quotation, Trade, TradeLedger};

/// Working copy of one side of the book during a multi-round auction.
#[derive(Debug, Clone)]
struct Order {
    agent_id: usize,
    /// Current absolute price.
    price: f64,
    residual: f64,
}

impl Order {
    fn from_quote(q: &Quotation) -> Self {
        Order {
            agent_id: q.agent_id,
            price: q.abs_price(),
            residual: q.quantity,
        }
    }
}

fn price_priority(buyers: &mut [Order], sellers: &mut [Order]) {
    buyers.sort_by(|a, b| {
        b.price
            .partial_cmp(&a.price)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.agent_id.cmp(&b.agent_id))
    });
    sellers.sort_by(|a, b| {
        a.price
            .partial_cmp(&b.price)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.agent_id.cmp(&b.agent_id))
    });
}

/// Sequential mid-point matching over price-sorted books; stops at the first
/// non-crossing pair.
fn greedy_pass(buyers: &mut [Order], sellers: &mut [Order], ledger: &mut TradeLedger) {
    let (mut i, mut j) = (0, 0);
    loop {
        while i < buyers.len() && buyers[i].residual <= 0.0 {
            i += 1;
        }
        while j < sellers.len() && sellers[j].residual <= 0.0 {
            j += 1;
        }
        if i == buyers.len() || j == sellers.len() {
            break;
        }
        let (bid, ask) = (buyers[i].price, sellers[j].price);
        if bid < ask {
            break;
        }
        let quantity = buyers[i].residual.min(sellers[j].residual);
        ledger.record(Trade::uniform(
            buyers[i].agent_id,
            sellers[j].agent_id,
            quantity,
            bid,
            ask,
            (bid + ask) / 2.0,
        ));
        buyers[i].residual -= quantity;
        sellers[j].residual -= quantity;
    }
}

/// Price-priority matching at the mid-point price.
pub fn clear_greedy(quotes: &[Quotation]) -> TradeLedger {
    let (buyers, sellers) = partition(quotes);
    let mut ledger = TradeLedger::new(&buyers, &sellers);
    let mut b: Vec<Order> = buyers.iter().map(Order::from_quote).collect();
    let mut s: Vec<Order> = sellers.iter().map(Order::from_quote).collect();
    price_priority(&mut b, &mut s);
    greedy_pass(&mut b, &mut s, &mut ledger);
    ledger
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrdaConfig {
    pub rounds: usize,
    /// Fraction of the remaining distance to the envelope edge conceded per round.
    pub concession: f64,
}

impl Default for MrdaConfig {
    fn default() -> Self {
        MrdaConfig {
            rounds: 3,
            concession: 0.5,
        }
    }
}

impl MrdaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rounds < 1 {
            return Err("mrda.rounds must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.concession) {
            return Err(format!("mrda.concession must lie in [0, 1), got {}", self.concession));
        }
        Ok(())
    }
}

/// Multi-round double auction.
///
/// Round one is a greedy pass on the submitted prices. Before each later
/// round every unfilled buyer raises its bid by `concession·(p_e − bid)` and
/// every unfilled seller lowers its ask by `concession·(ask − p_f)`; the
/// residual book is then matched greedily again and settled at the conceded
/// prices.
pub fn clear_mrda(quotes: &[Quotation], cfg: &MrdaConfig, env: &PriceEnvelope) -> TradeLedger {
    let (buyers, sellers) = partition(quotes);
    let mut ledger = TradeLedger::new(&buyers, &sellers);
    let mut b: Vec<Order> = buyers.iter().map(Order::from_quote).collect();
    let mut s: Vec<Order> = sellers.iter().map(Order::from_quote).collect();

    for round in 0..cfg.rounds.max(1) {
        if round > 0 {
            for o in b.iter_mut().filter(|o| o.residual > 0.0) {
                o.price += cfg.concession * (env.emergency - o.price);
            }
            for o in s.iter_mut().filter(|o| o.residual > 0.0) {
                o.price -= cfg.concession * (o.price - env.feed_in);
            }
        }
        price_priority(&mut b, &mut s);
        greedy_pass(&mut b, &mut s, &mut ledger);
        if b.iter().all(|o| o.residual <= 0.0) || s.iter().all(|o| o.residual <= 0.0) {
            break;
        }
    }
    ledger
}

/// McAfee-style Vickrey variant.
///
/// With buyers by descending bid and sellers by ascending ask, let `k` be the
/// largest rank where `bid(k) >= ask(k)`. Ranks `1..k-1` trade; buyers pay
/// `bid(k)` and sellers receive `ask(k)`. The spread stays with the operator.
pub fn clear_vvda(quotes: &[Quotation]) -> TradeLedger {
    let (buyers, sellers) = partition(quotes);
    let mut ledger = TradeLedger::new(&buyers, &sellers);
    let (mut b, mut s) = (buyers, sellers);
    sort_price_priority(&mut b, &mut s);

    let breakeven = b
        .iter()
        .zip(&s)
        .take_while(|(bq, sq)| bq.price >= sq.abs_price())
        .count();
    if breakeven < 2 {
        return ledger;
    }
    let buyer_price = b[breakeven - 1].price;
    let seller_price = s[breakeven - 1].abs_price();

    let mut b_res: Vec<f64> = b[..breakeven - 1].iter().map(|q| q.quantity).collect();
    let mut s_res: Vec<f64> = s[..breakeven - 1].iter().map(|q| q.quantity).collect();
    let (mut i, mut j) = (0, 0);
    while i < b_res.len() && j < s_res.len() {
        let quantity = b_res[i].min(s_res[j]);
        ledger.record(Trade::split(
            b[i].agent_id,
            s[j].agent_id,
            quantity,
            b[i].price,
            s[j].abs_price(),
            buyer_price,
            seller_price,
        ));
        b_res[i] -= quantity;
        s_res[j] -= quantity;
        if b_res[i] <= 0.0 {
            i += 1;
        }
        if s_res[j] <= 0.0 {
            j += 1;
        }
    }
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::Money;

    fn q(id: usize, price: f64, qty: f64) -> Quotation {
        Quotation::new(id, price, qty)
    }

    fn trades(ledger: &TradeLedger) -> Vec<(usize, usize, f64, f64)> {
        ledger
            .trades
            .iter()
            .map(|t| (t.buyer_id, t.seller_id, t.quantity, t.buyer_price))
            .collect()
    }

    #[test]
    fn greedy_keeps_filling_the_top_buyer() {
        // JPQ (balanced) stops after (1, 3); greedy lets buyer 1's leftover
        // kWh cross seller 4 because 1.0 >= 0.9.
        let quotes = [q(1, 1.0, 5.0), q(2, 0.8, 3.0), q(3, -0.5, 4.0), q(4, -0.9, 6.0)];
        let got = trades(&clear_greedy(&quotes));
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], (1, 3, 4.0, 0.75));
        assert_eq!((got[1].0, got[1].1, got[1].2), (1, 4, 1.0));
        assert!((got[1].3 - 0.95).abs() < 1e-12);
    }

    #[test]
    fn greedy_no_cross_is_empty() {
        let quotes = [q(0, 0.5, 2.0), q(1, 0.6, 2.0), q(2, -0.7, 1.0), q(3, -0.9, 4.0)];
        assert!(clear_greedy(&quotes).is_empty());
    }

    #[test]
    fn greedy_sequential_fill() {
        let quotes = [q(0, 1.2, 2.0), q(1, 1.1, 2.0), q(2, -1.0, 3.0)];
        let got = trades(&clear_greedy(&quotes));
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].0, got[0].1, got[0].2), (0, 2, 2.0));
        assert!((got[0].3 - 1.1).abs() < 1e-12);
        assert_eq!((got[1].0, got[1].1, got[1].2), (1, 2, 1.0));
        assert!((got[1].3 - 1.05).abs() < 1e-12);
    }

    fn env() -> PriceEnvelope {
        PriceEnvelope::new(0.2, 1.0, 1.5).unwrap()
    }

    #[test]
    fn mrda_single_round_is_greedy() {
        let quotes = [q(0, 1.2, 2.0), q(1, 1.1, 2.0), q(2, -1.0, 3.0), q(3, -1.3, 1.0)];
        let cfg = MrdaConfig {
            rounds: 1,
            concession: 0.5,
        };
        assert_eq!(clear_mrda(&quotes, &cfg, &env()), clear_greedy(&quotes));
    }

    #[test]
    fn mrda_concession_creates_a_cross() {
        let quotes = [q(0, 0.8, 2.0), q(1, -0.9, 2.0)];
        let ledger = clear_mrda(&quotes, &MrdaConfig::default(), &env());
        assert_eq!(ledger.trades.len(), 1);
        let t = ledger.trades[0];
        assert_eq!(t.quantity, 2.0);
        assert!((t.bid - 1.15).abs() < 1e-12);
        assert!((t.ask - 0.55).abs() < 1e-12);
        assert!((t.buyer_price - 0.85).abs() < 1e-12);
        assert_eq!(ledger.operator_surplus(), Money::ZERO);
    }

    #[test]
    fn mrda_without_sellers_is_empty() {
        let quotes = [q(0, 0.8, 2.0), q(1, 1.4, 2.0)];
        let cfg = MrdaConfig {
            rounds: 7,
            concession: 0.9,
        };
        assert!(clear_mrda(&quotes, &cfg, &env()).is_empty());
    }

    #[test]
    fn mrda_config_validation() {
        assert!(MrdaConfig::default().validate().is_ok());
        assert!(MrdaConfig { rounds: 0, concession: 0.5 }.validate().is_err());
        assert!(MrdaConfig { rounds: 2, concession: 1.0 }.validate().is_err());
    }

    #[test]
    fn vvda_breakeven_at_first_rank_trades_nothing() {
        let quotes = [q(0, 1.0, 5.0), q(1, 0.8, 3.0), q(2, -0.5, 4.0), q(3, -0.9, 6.0)];
        assert!(clear_vvda(&quotes).is_empty());
        assert!(clear_vvda(&[q(0, 1.0, 1.0), q(1, -0.5, 1.0)]).is_empty());
    }

    #[test]
    fn vvda_mcafee_prices() {
        let quotes = [
            q(0, 1.2, 2.0),
            q(1, 1.0, 2.0),
            q(2, 0.6, 2.0),
            q(3, -0.4, 2.0),
            q(4, -0.7, 2.0),
            q(5, -1.1, 2.0),
        ];
        let ledger = clear_vvda(&quotes);
        assert_eq!(ledger.trades.len(), 1);
        let t = ledger.trades[0];
        assert_eq!((t.buyer_id, t.seller_id, t.quantity), (0, 3, 2.0));
        assert_eq!(t.buyer_price, 1.0);
        assert_eq!(t.seller_price, 0.7);
        assert_eq!(ledger.payment(0), Money::from_f64(2.0));
        assert_eq!(ledger.receipt(3), Money::from_f64(1.4));
        assert_eq!(ledger.operator_surplus(), Money::from_f64(0.6));
        ledger.check_invariants(&quotes).unwrap();
    }
}
