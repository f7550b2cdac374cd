//! Joint price–quantity clearing.
//!
//! Two round-robin pointers walk the sorted buyer and seller lists. A crossing
//! pair trades `min(q_b, q_s)` at the mid-point price and both pointers move
//! on, wrapping to the first agent that still has residual quantity. A pair
//! that does not cross is resolved by the market factor: under surplus the
//! buyer leaves the book, under deficit the seller leaves, and a balanced
//! market stops clearing.
//!
//! Every iteration either zeroes a residual or retires an agent, so the loop
//! runs at most `|B| + |S|` times.

use super::{partition, sort_order_book, MarketFactor, Quotation, Trade, TradeLedger};

/// Bookkeeping from one JPQ run, used to check termination bounds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JpqTrace {
    /// Match attempts (trades plus skips).
    pub iterations: usize,
    /// Single-position pointer moves, including moves over exhausted entries.
    pub pointer_advances: usize,
    /// Agents removed from the book by a non-crossing comparison.
    pub retired: Vec<usize>,
}

pub fn clear_jpq(quotes: &[Quotation], m: MarketFactor, emergency_price: f64) -> TradeLedger {
    clear_jpq_traced(quotes, m, emergency_price).0
}

struct Side {
    quotes: Vec<Quotation>,
    residual: Vec<f64>,
    retired: Vec<bool>,
}

impl Side {
    fn new(quotes: Vec<Quotation>) -> Self {
        let residual = quotes.iter().map(|q| q.quantity).collect();
        let retired = vec![false; quotes.len()];
        Side {
            quotes,
            residual,
            retired,
        }
    }

    fn is_active(&self, i: usize) -> bool {
        !self.retired[i] && self.residual[i] > 0.0
    }

    /// First active index at or after `from`, wrapping to the first active
    /// index overall. Counts every position stepped over.
    fn seek(&self, from: usize, advances: &mut usize) -> Option<usize> {
        let n = self.quotes.len();
        let mut i = from;
        while i < n {
            if self.is_active(i) {
                return Some(i);
            }
            i += 1;
            *advances += 1;
        }
        // wrap-around: the start pointer is the first active entry
        (0..from.min(n)).find(|&j| self.is_active(j)).inspect(|&j| *advances += j)
    }
}

pub fn clear_jpq_traced(
    quotes: &[Quotation],
    m: MarketFactor,
    emergency_price: f64,
) -> (TradeLedger, JpqTrace) {
    let (mut buyers, mut sellers) = partition(quotes);
    let mut ledger = TradeLedger::new(&buyers, &sellers);
    sort_order_book(&mut buyers, &mut sellers, m, emergency_price);

    let mut buy = Side::new(buyers);
    let mut sell = Side::new(sellers);
    let mut trace = JpqTrace::default();
    let (mut b, mut s) = (0usize, 0usize);

    loop {
        let Some(bi) = buy.seek(b, &mut trace.pointer_advances) else { break };
        let Some(si) = sell.seek(s, &mut trace.pointer_advances) else { break };
        b = bi;
        s = si;
        trace.iterations += 1;

        let bid = buy.quotes[b].price;
        let ask = sell.quotes[s].abs_price();
        if bid < ask {
            match m {
                MarketFactor::Surplus => {
                    buy.retired[b] = true;
                    trace.retired.push(buy.quotes[b].agent_id);
                    b += 1;
                    trace.pointer_advances += 1;
                    continue;
                }
                MarketFactor::Deficit => {
                    sell.retired[s] = true;
                    trace.retired.push(sell.quotes[s].agent_id);
                    s += 1;
                    trace.pointer_advances += 1;
                    continue;
                }
                MarketFactor::Balanced => break,
            }
        }

        let quantity = buy.residual[b].min(sell.residual[s]);
        let price = (bid + ask) / 2.0;
        ledger.record(Trade::uniform(
            buy.quotes[b].agent_id,
            sell.quotes[s].agent_id,
            quantity,
            bid,
            ask,
            price,
        ));
        buy.residual[b] -= quantity;
        sell.residual[s] -= quantity;

        b += 1;
        s += 1;
        trace.pointer_advances += 2;
    }

    (ledger, trace)
}
