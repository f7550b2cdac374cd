use std::io;

use serde::{Deserialize, Serialize};

use super::Quotation;
use crate::money::Money;

/// One executed match.
///
/// `bid` and `ask` are the quotes in force when the match happened (for MRDA
/// these are the conceded values of that round); `ask` is an absolute price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub buyer_id: usize,
    pub seller_id: usize,
    pub quantity: f64,
    pub bid: f64,
    pub ask: f64,
    /// Price per kWh the buyer pays.
    pub buyer_price: f64,
    /// Price per kWh the seller receives.
    pub seller_price: f64,
    pub buyer_value: Money,
    pub seller_value: Money,
}

impl Trade {
    /// A trade settled at a single price for both sides.
    pub fn uniform(buyer_id: usize, seller_id: usize, quantity: f64, bid: f64, ask: f64, price: f64) -> Self {
        Trade::split(buyer_id, seller_id, quantity, bid, ask, price, price)
    }

    pub fn split(
        buyer_id: usize,
        seller_id: usize,
        quantity: f64,
        bid: f64,
        ask: f64,
        buyer_price: f64,
        seller_price: f64,
    ) -> Self {
        let buyer_value = Money::of_trade(buyer_price, quantity);
        // One rounding for both sides when the prices agree keeps sums exact.
        let seller_value = if seller_price == buyer_price {
            buyer_value
        } else {
            Money::of_trade(seller_price, quantity)
        };
        Trade {
            buyer_id,
            seller_id,
            quantity,
            bid,
            ask,
            buyer_price,
            seller_price,
            buyer_value,
            seller_value,
        }
    }
}

/// Cleared quantity matrix `Q` and price matrix `Π` for one hour.
///
/// Rows are buyers and columns sellers, both in submission order. `prices`
/// holds what the buyer pays, `seller_prices` what the seller receives; the
/// two differ only for VVDA.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    pub buyer_ids: Vec<usize>,
    pub seller_ids: Vec<usize>,
    pub quantities: Vec<Vec<f64>>,
    pub prices: Vec<Vec<f64>>,
    pub seller_prices: Vec<Vec<f64>>,
    pub trades: Vec<Trade>,
}

impl TradeLedger {
    pub fn new(buyers: &[Quotation], sellers: &[Quotation]) -> Self {
        let nb = buyers.len();
        let ns = sellers.len();
        TradeLedger {
            buyer_ids: buyers.iter().map(|q| q.agent_id).collect(),
            seller_ids: sellers.iter().map(|q| q.agent_id).collect(),
            quantities: vec![vec![0.0; ns]; nb],
            prices: vec![vec![0.0; ns]; nb],
            seller_prices: vec![vec![0.0; ns]; nb],
            trades: Vec::new(),
        }
    }

    fn buyer_index(&self, agent_id: usize) -> Option<usize> {
        self.buyer_ids.iter().position(|&id| id == agent_id)
    }

    fn seller_index(&self, agent_id: usize) -> Option<usize> {
        self.seller_ids.iter().position(|&id| id == agent_id)
    }

    pub fn record(&mut self, trade: Trade) {
        let b = self.buyer_index(trade.buyer_id).expect("trade buyer not in ledger");
        let s = self.seller_index(trade.seller_id).expect("trade seller not in ledger");
        let prev_q = self.quantities[b][s];
        let q = prev_q + trade.quantity;
        if prev_q == 0.0 {
            self.prices[b][s] = trade.buyer_price;
            self.seller_prices[b][s] = trade.seller_price;
        } else {
            // volume-weighted; never reached by the shipped mechanisms, which
            // exhaust one side of a pair on every match
            self.prices[b][s] = (self.prices[b][s] * prev_q + trade.buyer_price * trade.quantity) / q;
            self.seller_prices[b][s] =
                (self.seller_prices[b][s] * prev_q + trade.seller_price * trade.quantity) / q;
        }
        self.quantities[b][s] = q;
        self.trades.push(trade);
    }

    pub fn is_empty(&self) -> bool {
        self.trades.is_empty()
    }

    pub fn total_volume(&self) -> f64 {
        self.trades.iter().map(|t| t.quantity).sum()
    }

    /// kWh bought by `agent_id` (row sum of `Q`).
    pub fn bought(&self, agent_id: usize) -> f64 {
        self.buyer_index(agent_id)
            .map(|b| self.quantities[b].iter().sum())
            .unwrap_or(0.0)
    }

    /// kWh sold by `agent_id` (column sum of `Q`).
    pub fn sold(&self, agent_id: usize) -> f64 {
        self.seller_index(agent_id)
            .map(|s| self.quantities.iter().map(|row| row[s]).sum())
            .unwrap_or(0.0)
    }

    pub fn payment(&self, agent_id: usize) -> Money {
        self.trades
            .iter()
            .filter(|t| t.buyer_id == agent_id)
            .map(|t| t.buyer_value)
            .sum()
    }

    pub fn receipt(&self, agent_id: usize) -> Money {
        self.trades
            .iter()
            .filter(|t| t.seller_id == agent_id)
            .map(|t| t.seller_value)
            .sum()
    }

    pub fn total_payments(&self) -> Money {
        self.trades.iter().map(|t| t.buyer_value).sum()
    }

    pub fn total_receipts(&self) -> Money {
        self.trades.iter().map(|t| t.seller_value).sum()
    }

    /// What the operator keeps: payments minus receipts.
    pub fn operator_surplus(&self) -> Money {
        self.total_payments() - self.total_receipts()
    }

    /// Executed cells as `(buyer_id, seller_id, kWh, price)`, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.buyer_ids.iter().enumerate().flat_map(move |(b, &bid)| {
            self.seller_ids.iter().enumerate().filter_map(move |(s, &sid)| {
                let q = self.quantities[b][s];
                (q > 0.0).then(|| (bid, sid, q, self.prices[b][s]))
            })
        })
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["buyer_id", "seller_id", "kwh", "price"])?;
        for (b, s, q, p) in self.cells() {
            w.write_record([b.to_string(), s.to_string(), q.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Checks the structural ledger invariants against the submitted quotes.
    /// Returns a description of the first violation.
    pub fn check_invariants(&self, quotes: &[Quotation]) -> Result<(), String> {
        let submitted = |id: usize| -> f64 {
            quotes
                .iter()
                .filter(|q| q.agent_id == id)
                .map(|q| q.quantity)
                .sum()
        };
        for (b, row) in self.quantities.iter().enumerate() {
            for (s, &q) in row.iter().enumerate() {
                if !(q >= 0.0) {
                    return Err(format!("negative quantity at ({b},{s})"));
                }
                if q == 0.0 && (self.prices[b][s] != 0.0 || self.seller_prices[b][s] != 0.0) {
                    return Err(format!("price without quantity at ({b},{s})"));
                }
            }
        }
        let tol = 1e-9;
        for &id in &self.buyer_ids {
            if self.bought(id) > submitted(id) + tol {
                return Err(format!("buyer {id} over-filled"));
            }
        }
        for &id in &self.seller_ids {
            if self.sold(id) > submitted(id) + tol {
                return Err(format!("seller {id} over-filled"));
            }
        }
        for t in &self.trades {
            if !(t.ask <= t.seller_price && t.seller_price <= t.buyer_price && t.buyer_price <= t.bid) {
                return Err(format!(
                    "individual rationality violated: ask {} seller {} buyer {} bid {}",
                    t.ask, t.seller_price, t.buyer_price, t.bid
                ));
            }
        }
        Ok(())
    }
}
