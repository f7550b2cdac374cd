//! Per-microgrid physics and accounting: storage dynamics, day-ahead
//! procurement, bid caps, post-clearing recourse and profits.
//!
//! Energy is in kWh, power in kW, and the time step `dt` in hours.

use serde::{Deserialize, Serialize};

use crate::market::{PriceEnvelope, Role, TradeLedger};
use crate::money::Money;

fn zero() -> f64 {
    0.0
}

fn one() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridParams {
    /// Peak load, kWh per hour.
    pub l_max: f64,
    /// Peak PV generation, kWh per hour.
    pub g_max: f64,
    pub e_max: f64,
    #[serde(default = "zero")]
    pub e_min: f64,
    /// Charging rate limit, kW.
    pub t_charge_max: f64,
    /// Discharging rate limit as a positive magnitude, kW.
    pub t_discharge_max: f64,
    #[serde(default = "one")]
    pub eta_ch: f64,
    #[serde(default = "one")]
    pub eta_dis: f64,
    pub e0: f64,
    /// Day-ahead procurement factor.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl MicrogridParams {
    /// The four-microgrid fleet used in the reference experiments: small
    /// buyer, small seller, large buyer, large seller.
    pub fn reference_fleet() -> Vec<MicrogridParams> {
        let grid = |l_max, g_max, e_max, rate, e0| MicrogridParams {
            l_max,
            g_max,
            e_max,
            e_min: 0.0,
            t_charge_max: rate,
            t_discharge_max: rate,
            eta_ch: 1.0,
            eta_dis: 1.0,
            e0,
            beta: 0.95,
        };
        vec![
            grid(25.0, 5.0, 8.0, 4.0, 0.0),
            grid(6.0, 7.0, 15.0, 5.0, 2.0),
            grid(40.0, 10.0, 15.0, 8.0, 0.0),
            grid(5.0, 15.0, 30.0, 10.0, 20.0),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = [
            self.l_max,
            self.g_max,
            self.e_max,
            self.e_min,
            self.t_charge_max,
            self.t_discharge_max,
            self.eta_ch,
            self.eta_dis,
            self.e0,
            self.beta,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err("all parameters must be finite".into());
        }
        if self.l_max < 0.0 || self.g_max < 0.0 {
            return Err("l_max and g_max must be non-negative".into());
        }
        if !(0.0 <= self.e_min && self.e_min <= self.e0 && self.e0 <= self.e_max) {
            return Err(format!(
                "need 0 <= e_min <= e0 <= e_max, got e_min={} e0={} e_max={}",
                self.e_min, self.e0, self.e_max
            ));
        }
        if !(self.t_charge_max > 0.0 && self.t_discharge_max > 0.0) {
            return Err("t_charge_max and t_discharge_max must be positive".into());
        }
        if !(self.eta_ch > 0.0 && self.eta_ch <= 1.0 && self.eta_dis > 0.0 && self.eta_dis <= 1.0) {
            return Err("efficiencies must lie in (0, 1]".into());
        }
        if !(self.beta > 0.0) {
            return Err("beta must be positive".into());
        }
        Ok(())
    }

    /// Upper energy bound under reservation `alpha`, never below `e_min`.
    pub fn reservation_cap(&self, alpha: f64) -> f64 {
        (alpha.clamp(0.0, 1.0) * self.e_max).max(self.e_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssState {
    pub energy: f64,
    /// Reservation fraction of `e_max` usable this step.
    pub reservation: f64,
}

impl EssState {
    pub fn initial(params: &MicrogridParams) -> Self {
        EssState {
            energy: params.e0,
            reservation: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocStep {
    pub energy: f64,
    /// Set when the raw update left `[e_min, e_max]` and was clamped.
    pub clamped: bool,
}

/// One storage update for signed grid-side power `t_ess` (charge positive).
///
/// Charging stores `η_ch·t·dt`; discharging draws `|t|·dt/η_dis`.
pub fn soc_step(energy: f64, t_ess: f64, dt: f64, params: &MicrogridParams) -> SocStep {
    let raw = if t_ess >= 0.0 {
        energy + params.eta_ch * t_ess * dt
    } else {
        energy + t_ess * dt / params.eta_dis
    };
    let bounded = raw.clamp(params.e_min, params.e_max);
    SocStep {
        energy: bounded,
        clamped: bounded != raw,
    }
}

/// Largest feasible power in the direction of `requested`, honouring the rate
/// limits, the `e_min` floor and the reservation cap `α·e_max`.
pub fn feasible_ess_power(state: &EssState, requested: f64, dt: f64, params: &MicrogridParams) -> f64 {
    if requested > 0.0 {
        let headroom = (params.reservation_cap(state.reservation) - state.energy).max(0.0);
        requested
            .min(params.t_charge_max)
            .min(headroom / (params.eta_ch * dt))
    } else if requested < 0.0 {
        let available = (state.energy - params.e_min).max(0.0);
        let limit = params.t_discharge_max.min(available * params.eta_dis / dt);
        requested.max(-limit)
    } else {
        0.0
    }
}

/// Day-ahead purchase covering the forecast deficit: `max(0, β·(L̄ − Ḡ))`.
pub fn day_ahead_quantity(load_forecast: f64, gen_forecast: f64, beta: f64) -> f64 {
    (beta * (load_forecast - gen_forecast)).max(0.0)
}

/// Physical cap on the bid quantity for the given role.
pub fn max_bid_quantity(load: f64, gen: f64, role: Role, dt: f64, params: &MicrogridParams) -> f64 {
    match role {
        Role::Buyer => (load - gen + params.t_charge_max * dt).max(0.0),
        Role::Seller => (gen - load + params.t_discharge_max * dt).max(0.0),
    }
}

/// Everything one microgrid exchanged in one hour.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub load: f64,
    pub gen: f64,
    pub q_da: f64,
    /// kWh bought in the P2P market.
    pub q_b: f64,
    /// kWh sold in the P2P market.
    pub q_s: f64,
    /// Emergency purchase from the main grid.
    pub q_e: f64,
    /// Feed-in export to the main grid.
    pub q_fit: f64,
    /// Signed storage power, charge positive.
    pub t_ess: f64,
    /// Stored energy after the step.
    pub energy: f64,
    pub profit_grid: f64,
    pub profit_p2p: f64,
}

impl SettlementRecord {
    /// `G + q_da + q_b + q_e − (L + q_fit + q_s + t_ess·dt)`; zero when balanced.
    pub fn balance_residual(&self, dt: f64) -> f64 {
        (self.gen + self.q_da + self.q_b + self.q_e) - (self.load + self.q_fit + self.q_s + self.t_ess * dt)
    }

    pub fn with_p2p(mut self, ledger: &TradeLedger, agent_id: usize) -> Self {
        self.profit_p2p = p2p_profit(ledger, agent_id).to_f64();
        self
    }
}

/// Quantities the microgrid settled with the market before recourse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub load: f64,
    pub gen: f64,
    pub q_da: f64,
    pub q_b: f64,
    pub q_s: f64,
}

impl Position {
    pub fn net(&self) -> f64 {
        self.gen + self.q_da + self.q_b - self.load - self.q_s
    }
}

/// Resolves the residual imbalance after clearing.
///
/// 1. Energy above the reservation cap is discharged (rate-limited).
/// 2. A surplus charges storage up to the cap; the rest is fed in.
/// 3. A deficit discharges storage down to `e_min`; the rest is bought at the
///    emergency price.
///
/// Energy released in step 1 first covers any deficit, then is fed in.
pub fn settle_and_balance(
    pos: &Position,
    state: &EssState,
    prices: &PriceEnvelope,
    dt: f64,
    params: &MicrogridParams,
) -> (SettlementRecord, EssState) {
    let net = pos.net();
    let cap = params.reservation_cap(state.reservation);

    let over = (state.energy - cap).max(0.0);
    let shed = if over > 0.0 {
        -(over * params.eta_dis / dt).min(params.t_discharge_max)
    } else {
        0.0
    };
    let after_shed = EssState {
        energy: soc_step(state.energy, shed, dt, params).energy,
        reservation: state.reservation,
    };

    // supply left after the shed energy joins the local balance
    let available = net - shed * dt;
    let (adjust, q_fit, q_e) = if available >= 0.0 {
        let charge = feasible_ess_power(&after_shed, available / dt, dt, params);
        (charge, available - charge * dt, 0.0)
    } else {
        let mut discharge = feasible_ess_power(&after_shed, available / dt, dt, params);
        // the shed already used part of the discharge rate
        discharge = discharge.max(-(params.t_discharge_max + shed));
        (discharge, 0.0, -(available - discharge * dt))
    };
    let t_ess = shed + adjust;
    let energy = soc_step(state.energy, t_ess, dt, params).energy;

    let record = SettlementRecord {
        load: pos.load,
        gen: pos.gen,
        q_da: pos.q_da,
        q_b: pos.q_b,
        q_s: pos.q_s,
        q_e,
        q_fit,
        t_ess,
        energy,
        profit_grid: grid_profit(q_fit, q_e, prices),
        profit_p2p: 0.0,
    };
    (
        record,
        EssState {
            energy,
            reservation: state.reservation,
        },
    )
}

/// Main-grid profit: feed-in revenue minus emergency cost.
pub fn grid_profit(q_fit: f64, q_e: f64, prices: &PriceEnvelope) -> f64 {
    prices.feed_in * q_fit - prices.emergency * q_e
}

/// Net P2P income: receipts as a seller minus payments as a buyer.
pub fn p2p_profit(ledger: &TradeLedger, agent_id: usize) -> Money {
    ledger.receipt(agent_id) - ledger.payment(agent_id)
}

pub fn reward(settlement: &SettlementRecord) -> f64 {
    settlement.profit_grid + settlement.profit_p2p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{clear_jpq, MarketFactor, Quotation};

    fn params(e_max: f64, rate: f64) -> MicrogridParams {
        MicrogridParams {
            l_max: 10.0,
            g_max: 10.0,
            e_max,
            e_min: 0.0,
            t_charge_max: rate,
            t_discharge_max: rate,
            eta_ch: 1.0,
            eta_dis: 1.0,
            e0: 0.0,
            beta: 0.95,
        }
    }

    fn prices() -> PriceEnvelope {
        PriceEnvelope::new(0.2, 1.0, 2.0).unwrap()
    }

    #[test]
    fn reference_fleet_is_valid() {
        let fleet = MicrogridParams::reference_fleet();
        assert_eq!(fleet.len(), 4);
        assert_eq!(fleet.iter().map(|p| p.e0).collect::<Vec<_>>(), [0.0, 2.0, 0.0, 20.0]);
        for p in &fleet {
            p.validate().unwrap();
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = params(8.0, 4.0);
        p.e0 = 9.0;
        assert!(p.validate().is_err());
        let mut p = params(8.0, 4.0);
        p.eta_dis = 0.0;
        assert!(p.validate().is_err());
        let mut p = params(8.0, 4.0);
        p.beta = 0.0;
        assert!(p.validate().is_err());
        let mut p = params(8.0, 4.0);
        p.t_charge_max = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn soc_step_examples() {
        let p = params(20.0, 10.0);
        assert_eq!(soc_step(5.0, 2.0, 1.0, &p).energy, 7.0);
        assert_eq!(soc_step(5.0, 0.0, 1.0, &p).energy, 5.0);
        let lossy = MicrogridParams { eta_dis: 0.9, ..p.clone() };
        let s = soc_step(5.0, -2.0, 1.0, &lossy);
        assert!((s.energy - (5.0 - 2.0 / 0.9)).abs() < 1e-12);
        assert!(!s.clamped);
    }

    #[test]
    fn soc_step_clamps_and_reports() {
        let p = params(8.0, 10.0);
        let s = soc_step(7.0, 3.0, 1.0, &p);
        assert_eq!(s.energy, 8.0);
        assert!(s.clamped);
        let s = soc_step(1.0, -3.0, 1.0, &p);
        assert_eq!(s.energy, 0.0);
        assert!(s.clamped);
    }

    #[test]
    fn feasible_power_examples() {
        let p = params(8.0, 4.0);
        let full = |energy, reservation| EssState { energy, reservation };
        assert_eq!(feasible_ess_power(&full(7.5, 1.0), 4.0, 1.0, &p), 0.5);
        assert_eq!(feasible_ess_power(&full(0.0, 1.0), -3.0, 1.0, &p), 0.0);
        assert_eq!(feasible_ess_power(&full(4.0, 0.5), 2.0, 1.0, &p), 0.0);
        // rate limit binds
        assert_eq!(feasible_ess_power(&full(6.0, 1.0), -10.0, 1.0, &p), -4.0);
    }

    #[test]
    fn day_ahead_examples() {
        assert!((day_ahead_quantity(10.0, 4.0, 0.95) - 5.7).abs() < 1e-12);
        assert_eq!(day_ahead_quantity(4.0, 10.0, 0.95), 0.0);
        assert_eq!(day_ahead_quantity(3.0, 3.0, 2.0), 0.0);
    }

    #[test]
    fn max_bid_examples() {
        let p = params(8.0, 4.0);
        assert_eq!(max_bid_quantity(10.0, 3.0, Role::Buyer, 1.0, &p), 11.0);
        assert_eq!(max_bid_quantity(10.0, 3.0, Role::Seller, 1.0, &p), 0.0);
        let p5 = params(8.0, 5.0);
        assert_eq!(max_bid_quantity(2.0, 7.0, Role::Seller, 1.0, &p5), 10.0);
    }

    fn position(net: f64) -> Position {
        Position {
            load: 5.0,
            gen: 5.0 + net,
            q_da: 0.0,
            q_b: 0.0,
            q_s: 0.0,
        }
    }

    #[test]
    fn surplus_is_absorbed_by_storage() {
        let p = params(8.0, 4.0);
        let state = EssState { energy: 3.0, reservation: 1.0 };
        let (rec, next) = settle_and_balance(&position(3.0), &state, &prices(), 1.0, &p);
        assert_eq!((rec.t_ess, rec.q_fit, rec.q_e), (3.0, 0.0, 0.0));
        assert_eq!(next.energy, 6.0);
    }

    #[test]
    fn empty_store_deficit_goes_to_emergency() {
        let p = params(8.0, 4.0);
        let state = EssState { energy: 0.0, reservation: 1.0 };
        let (rec, _) = settle_and_balance(&position(-2.0), &state, &prices(), 1.0, &p);
        assert_eq!((rec.q_e, rec.t_ess), (2.0, 0.0));
        assert_eq!(rec.profit_grid, -4.0);
    }

    #[test]
    fn over_storage_is_discharged_to_feed_in() {
        let p = params(8.0, 10.0);
        let state = EssState { energy: 6.0, reservation: 0.5 };
        let (rec, next) = settle_and_balance(&position(0.0), &state, &prices(), 1.0, &p);
        assert_eq!((rec.q_fit, rec.t_ess, rec.q_e), (2.0, -2.0, 0.0));
        assert_eq!(next.energy, 4.0);
    }

    #[test]
    fn over_storage_shed_covers_deficit_first() {
        let p = params(8.0, 10.0);
        let state = EssState { energy: 6.0, reservation: 0.5 };
        let (rec, next) = settle_and_balance(&position(-3.0), &state, &prices(), 1.0, &p);
        assert_eq!((rec.q_fit, rec.t_ess, rec.q_e), (0.0, -3.0, 0.0));
        assert_eq!(next.energy, 3.0);
    }

    #[test]
    fn shed_and_deficit_share_the_rate_limit() {
        let p = params(20.0, 4.0);
        let state = EssState { energy: 16.0, reservation: 0.5 };
        // shed wants 6 kWh but only 4 kW is allowed; a deficit of 5 remains 1 short
        let (rec, next) = settle_and_balance(&position(-5.0), &state, &prices(), 1.0, &p);
        assert_eq!(rec.t_ess, -4.0);
        assert_eq!(rec.q_e, 1.0);
        assert_eq!(next.energy, 12.0);
        assert_eq!(rec.balance_residual(1.0), 0.0);
    }

    #[test]
    fn grid_profit_examples() {
        let pr = prices();
        assert!((grid_profit(2.0, 1.0, &pr) - (-1.6)).abs() < 1e-12);
        assert_eq!(grid_profit(0.0, 0.0, &pr), 0.0);
        assert!((grid_profit(5.0, 0.0, &pr) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p2p_profit_examples() {
        let quotes = [
            Quotation::new(1, 1.0, 5.0),
            Quotation::new(2, 0.8, 3.0),
            Quotation::new(3, -0.5, 4.0),
            Quotation::new(4, -0.9, 6.0),
        ];
        let ledger = clear_jpq(&quotes, MarketFactor::Balanced, 2.0);
        assert_eq!(p2p_profit(&ledger, 1), Money::from_f64(-3.0));
        assert_eq!(p2p_profit(&ledger, 3), Money::from_f64(3.0));
        assert_eq!(p2p_profit(&ledger, 9), Money::ZERO);
    }

    #[test]
    fn reward_is_sum_of_profits() {
        let rec = SettlementRecord {
            profit_grid: -1.6,
            profit_p2p: 3.0,
            ..Default::default()
        };
        assert!((reward(&rec) - 1.4).abs() < 1e-12);
        assert_eq!(reward(&SettlementRecord::default()), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn settlement_balances_and_respects_bounds(
                energy_frac in 0.0f64..=1.0,
                reservation in 0.0f64..=1.0,
                net in -30.0f64..30.0,
                e_max in 1.0f64..40.0,
                rate in 0.5f64..12.0,
                eta_ch in 0.5f64..=1.0,
                eta_dis in 0.5f64..=1.0,
            ) {
                let p = MicrogridParams { eta_ch, eta_dis, ..params(e_max, rate) };
                let state = EssState { energy: energy_frac * e_max, reservation };
                let (rec, next) = settle_and_balance(&position(net), &state, &prices(), 1.0, &p);
                prop_assert!(rec.balance_residual(1.0).abs() <= 1e-9);
                prop_assert!(rec.q_e >= 0.0 && rec.q_fit >= 0.0);
                prop_assert!(rec.t_ess <= p.t_charge_max + 1e-12);
                prop_assert!(rec.t_ess >= -p.t_discharge_max - 1e-12);
                prop_assert!(next.energy >= p.e_min && next.energy <= p.e_max);
                let cap = p.reservation_cap(reservation);
                if state.energy > cap {
                    // shedding only ever moves toward the cap
                    prop_assert!(next.energy <= state.energy + 1e-12);
                } else {
                    prop_assert!(next.energy <= cap + 1e-9);
                }
                prop_assert!(!(rec.q_e > 0.0 && rec.q_fit > 0.0));
            }

            #[test]
            fn grid_profit_is_monotone(q_fit in 0.0f64..50.0, q_e in 0.0f64..50.0, d in 0.01f64..5.0) {
                let pr = prices();
                prop_assert!(grid_profit(q_fit, q_e + d, &pr) < grid_profit(q_fit, q_e, &pr));
                prop_assert!(grid_profit(q_fit + d, q_e, &pr) > grid_profit(q_fit, q_e, &pr));
            }

            #[test]
            fn day_ahead_non_decreasing_in_beta(l in 0.0f64..50.0, g in 0.0f64..50.0, b1 in 0.01f64..3.0, db in 0.0f64..3.0) {
                let lo = day_ahead_quantity(l, g, b1);
                let hi = day_ahead_quantity(l, g, b1 + db);
                prop_assert!(lo >= 0.0);
                if l > g {
                    prop_assert!(hi >= lo);
                }
            }
        }
    }
}
