//! Multi-agent trading environment.
//!
//! Each step runs quotation, clearing and settlement for one hour. Agents see
//! a local observation: the market factor, their stored energy, a noisy window
//! of day-ahead, load, PV and emergency-price values around the current hour,
//! and a periodic hour encoding.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{
    validate_quotation, MarketError, MarketFactor, Mechanism, MechanismKind, MrdaConfig, PriceEnvelope, Quotation,
    Role, TradeLedger,
};
use crate::microgrid::{
    day_ahead_quantity, max_bid_quantity, reward, settle_and_balance, EssState, MicrogridParams, Position,
    SettlementRecord,
};
use crate::rng::{purpose, SeedStream};
use crate::scenario::{
    apply_pv_disruption, forecast, hour_encoding, sample_realization, DailyProfile, DisruptionConfig, PriceSchedule,
    Realization,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    ConfigInvalid(String),
    #[error("episode finished after {0} steps; call reset")]
    EpisodeFinished(usize),
    #[error("expected {expected} actions, got {got}")]
    WrongActionCount { expected: usize, got: usize },
    #[error("action for agent {agent} is outside the action box: {action:?}")]
    InvalidAction { agent: usize, action: Action },
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// Index bounds of the balanced band for the market factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketThresholds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for MarketThresholds {
    fn default() -> Self {
        MarketThresholds {
            lower: -30.0,
            upper: -20.0,
        }
    }
}

impl MarketThresholds {
    pub fn classify(&self, index: f64) -> MarketFactor {
        if index < self.lower {
            MarketFactor::Surplus
        } else if index <= self.upper {
            MarketFactor::Balanced
        } else {
            MarketFactor::Deficit
        }
    }
}

/// Resolved runtime configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub fleet: Vec<MicrogridParams>,
    /// One profile per agent.
    pub profiles: Vec<DailyProfile>,
    pub prices: PriceSchedule,
    pub mechanism: MechanismKind,
    pub mrda: MrdaConfig,
    pub thresholds: MarketThresholds,
    pub disruption: DisruptionConfig,
    pub horizon: usize,
    pub dt: f64,
    /// Past hours in the observation window.
    pub window_past: usize,
    /// Future hours in the observation window.
    pub window_future: usize,
    /// Standard deviation of the additive noise on normalized load and PV.
    pub process_noise: f64,
    /// Standard deviation of the multiplicative noise on observed load and PV.
    pub observation_noise: f64,
    /// kWh divisor used when flattening observations into features.
    pub feature_scale: f64,
    /// Start each episode from the previous episode's final stored energy.
    pub carry_over_energy: bool,
}

impl EnvConfig {
    /// Four reference microgrids with bundled profiles and prices.
    pub fn reference() -> Self {
        let fleet = MicrogridParams::reference_fleet();
        let profiles = (0..fleet.len()).map(DailyProfile::bundled).collect();
        EnvConfig {
            fleet,
            profiles,
            prices: PriceSchedule::bundled(),
            mechanism: MechanismKind::Jpq,
            mrda: MrdaConfig::default(),
            thresholds: MarketThresholds::default(),
            disruption: DisruptionConfig::reference(),
            horizon: 24,
            dt: 1.0,
            window_past: 1,
            window_future: 6,
            process_noise: 0.05,
            observation_noise: 0.05,
            feature_scale: 10.0,
            carry_over_energy: false,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.fleet.len()
    }

    pub fn window_len(&self) -> usize {
        self.window_past + self.window_future + 1
    }

    /// Length of [`Observation::features`].
    pub fn obs_dim(&self) -> usize {
        2 + 5 * self.window_len() + 2
    }

    pub fn mechanism(&self) -> Mechanism {
        Mechanism::from_kind(self.mechanism, self.mrda)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::ConfigInvalid(msg));
        if self.fleet.is_empty() {
            return bad("fleet must contain at least one microgrid".into());
        }
        for (i, p) in self.fleet.iter().enumerate() {
            p.validate().map_err(|e| EnvError::ConfigInvalid(format!("fleet[{i}]: {e}")))?;
        }
        if self.profiles.len() != self.fleet.len() {
            return bad(format!(
                "{} profiles for {} microgrids",
                self.profiles.len(),
                self.fleet.len()
            ));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.validate().map_err(|e| EnvError::ConfigInvalid(format!("profiles[{i}]: {e}")))?;
        }
        self.prices
            .validate()
            .map_err(|e| EnvError::ConfigInvalid(format!("prices: {e}")))?;
        self.mrda.validate().map_err(EnvError::ConfigInvalid)?;
        self.disruption.validate().map_err(EnvError::ConfigInvalid)?;
        if !(self.thresholds.lower <= self.thresholds.upper) {
            return bad(format!(
                "thresholds.lower {} exceeds thresholds.upper {}",
                self.thresholds.lower, self.thresholds.upper
            ));
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        for (name, v) in [
            ("process_noise", self.process_noise),
            ("observation_noise", self.observation_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad(format!("feature_scale must be positive, got {}", self.feature_scale));
        }
        Ok(())
    }
}

/// Per-agent episode state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentState {
    pub params: MicrogridParams,
    pub ess: EssState,
    pub forecast: Realization,
    pub realized: Realization,
    pub q_da: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalState {
    pub hour: usize,
    pub horizon: usize,
    pub agents: Vec<AgentState>,
    pub prices: PriceSchedule,
    #[serde(skip)]
    pub stream: SeedStream,
}

impl GlobalState {
    pub fn is_done(&self) -> bool {
        self.hour >= self.horizon
    }

    pub fn envelope(&self, hour: usize) -> PriceEnvelope {
        self.prices.envelope(hour)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSlot {
    pub hour: i64,
    pub q_da: f64,
    pub load: f64,
    pub gen: f64,
    pub emergency_price: f64,
    pub valid: bool,
}

impl WindowSlot {
    fn padding(hour: i64) -> Self {
        WindowSlot {
            hour,
            q_da: 0.0,
            load: 0.0,
            gen: 0.0,
            emergency_price: 0.0,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub hour: usize,
    pub market_factor: MarketFactor,
    /// Stored energy, kWh.
    pub soc: f64,
    pub window: Vec<WindowSlot>,
    pub hour_sin: f64,
    pub hour_cos: f64,
}

impl Observation {
    /// Flat feature vector: `m`, `soc`, per-slot `(q_da, load, gen, p_e)`,
    /// the slot mask, then `(sin, cos)` of the hour. kWh values are divided
    /// by `scale`.
    pub fn features(&self, scale: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(4 + 5 * self.window.len());
        f.push(self.market_factor.value() as f64);
        f.push(self.soc / scale);
        for s in &self.window {
            f.extend([s.q_da / scale, s.load / scale, s.gen / scale, s.emergency_price]);
        }
        f.extend(self.window.iter().map(|s| if s.valid { 1.0 } else { 0.0 }));
        f.extend([self.hour_sin, self.hour_cos]);
        f
    }

    /// Observed slot for the current hour.
    pub fn current(&self) -> Option<&WindowSlot> {
        self.window.iter().find(|s| s.hour == self.hour as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    /// Sign selects the role, magnitude places the price in the envelope.
    pub price_raw: f64,
    /// Fraction of the physical bid cap to quote.
    pub qty_frac: f64,
    /// Usable fraction of storage capacity.
    pub reservation: f64,
}

impl Action {
    pub fn new(price_raw: f64, qty_frac: f64, reservation: f64) -> Self {
        Action {
            price_raw,
            qty_frac,
            reservation,
        }
    }

    pub fn in_box(&self) -> bool {
        (-1.0..=1.0).contains(&self.price_raw)
            && (0.0..=1.0).contains(&self.qty_frac)
            && (0.0..=1.0).contains(&self.reservation)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.price_raw, self.qty_frac, self.reservation]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Action::new(a[0], a[1], a[2])
    }
}

/// Quotation and reservation decoded from one action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub quotation: Quotation,
    pub reservation: f64,
}

/// Stored-energy and imbalance index over all agents at the current hour:
/// `Σ load − Σ gen − Σ q_da − Σ stored energy`. Past the horizon only the
/// stored energy contributes.
pub fn market_index(state: &GlobalState) -> f64 {
    let t = state.hour;
    state
        .agents
        .iter()
        .map(|a| {
            let flows = if t < state.horizon {
                a.realized.load[t] - a.realized.gen[t] - a.q_da[t]
            } else {
                0.0
            };
            flows - a.ess.energy
        })
        .sum()
}

pub fn compute_market_factor(state: &GlobalState, thresholds: &MarketThresholds) -> MarketFactor {
    thresholds.classify(market_index(state))
}

fn noisy(value: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        return value;
    }
    let z: f64 = StandardNormal.sample(rng);
    (value * (1.0 + sigma * z)).max(0.0)
}

/// Builds the local observation for `agent` at the current hour.
///
/// Slots up to the current hour carry realized load and PV, later slots carry
/// forecasts; both get multiplicative observation noise. Day-ahead quantities
/// and prices are exact. Slots outside the episode are zero with mask 0.
pub fn build_observation(state: &GlobalState, config: &EnvConfig, agent: usize) -> Observation {
    let t = state.hour;
    let a = &state.agents[agent];
    let m = compute_market_factor(state, &config.thresholds);
    let mut rng = state
        .stream
        .path(&[agent as u64, purpose::OBSERVATION, t as u64])
        .rng();
    let start = t as i64 - config.window_past as i64;
    let window = (0..config.window_len() as i64)
        .map(|k| {
            let z = start + k;
            if z < 0 || z >= state.horizon as i64 {
                return WindowSlot::padding(z);
            }
            let zu = z as usize;
            let source = if zu <= t { &a.realized } else { &a.forecast };
            WindowSlot {
                hour: z,
                q_da: a.q_da[zu],
                load: noisy(source.load[zu], config.observation_noise, &mut rng),
                gen: noisy(source.gen[zu], config.observation_noise, &mut rng),
                emergency_price: state.prices.envelope(zu).emergency,
                valid: true,
            }
        })
        .collect();
    let (hour_sin, hour_cos) = hour_encoding(t);
    Observation {
        hour: t,
        market_factor: m,
        soc: a.ess.energy,
        window,
        hour_sin,
        hour_cos,
    }
}

/// Maps an action in the box to a quotation inside the price envelope.
///
/// `price_raw ≥ 0` buys, `< 0` sells; the price magnitude is
/// `p_f + |price_raw|·(p_e − p_f)` and the quantity is `qty_frac` of the
/// role's physical cap at the realized load and PV.
pub fn decode_action(action: &Action, state: &GlobalState, config: &EnvConfig, agent: usize) -> Decoded {
    let t = state.hour.min(state.horizon - 1);
    let a = &state.agents[agent];
    let env = state.envelope(t);
    let raw = action.price_raw.clamp(-1.0, 1.0);
    let role = if raw < 0.0 { Role::Seller } else { Role::Buyer };
    let magnitude = (env.feed_in + raw.abs() * (env.emergency - env.feed_in)).clamp(env.feed_in, env.emergency);
    let cap = max_bid_quantity(a.realized.load[t], a.realized.gen[t], role, config.dt, &a.params);
    let quantity = action.qty_frac.clamp(0.0, 1.0) * cap;
    let price = match role {
        Role::Buyer => magnitude,
        Role::Seller => -magnitude,
    };
    Decoded {
        quotation: Quotation::new(agent, price, quantity),
        reservation: action.reservation.clamp(0.0, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    /// Hour that was just settled.
    pub hour: usize,
    pub market_factor: MarketFactor,
    pub quotations: Vec<Quotation>,
    pub ledger: TradeLedger,
    pub settlements: Vec<SettlementRecord>,
    pub rewards: Vec<f64>,
    pub observations: Vec<Observation>,
    pub done: bool,
}

impl StepResult {
    pub fn max_balance_residual(&self, dt: f64) -> f64 {
        self.settlements
            .iter()
            .map(|s| s.balance_residual(dt).abs())
            .fold(0.0, f64::max)
    }
}

/// One environment instance. Instances share nothing and can run in parallel.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    mechanism: Mechanism,
    state: GlobalState,
    carried_energy: Option<Vec<f64>>,
}

impl Env {
    /// Validates the config and resets with seed 0.
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let mechanism = config.mechanism();
        let state = initial_state(&config, 0, None);
        Ok(Env {
            config,
            mechanism,
            state,
            carried_energy: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents()
    }

    /// Starts a new episode. All scenario draws derive from `seed`.
    pub fn reset(&mut self, seed: u64) -> Vec<Observation> {
        let carried = if self.config.carry_over_energy {
            self.carried_energy.take()
        } else {
            None
        };
        self.state = initial_state(&self.config, seed, carried.as_deref());
        self.observations()
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.n_agents())
            .map(|i| build_observation(&self.state, &self.config, i))
            .collect()
    }

    /// Centralized view: every agent's features concatenated.
    pub fn joint_features(observations: &[Observation], scale: f64) -> Vec<f64> {
        observations.iter().flat_map(|o| o.features(scale)).collect()
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        let n = self.n_agents();
        if self.state.is_done() {
            return Err(EnvError::EpisodeFinished(self.state.horizon));
        }
        if actions.len() != n {
            return Err(EnvError::WrongActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        if let Some((agent, action)) = actions.iter().enumerate().find(|(_, a)| !a.in_box()) {
            return Err(EnvError::InvalidAction { agent, action: *action });
        }

        let t = self.state.hour;
        let prices = self.state.envelope(t);
        let mut quotations = Vec::with_capacity(n);
        for (i, action) in actions.iter().enumerate() {
            let decoded = decode_action(action, &self.state, &self.config, i);
            validate_quotation(&decoded.quotation, &prices)?;
            quotations.push(decoded.quotation);
            self.state.agents[i].ess.reservation = decoded.reservation;
        }

        let m = compute_market_factor(&self.state, &self.config.thresholds);
        let ledger = self.mechanism.clear(&quotations, m, &prices);

        let mut settlements = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        for (i, agent) in self.state.agents.iter_mut().enumerate() {
            let position = Position {
                load: agent.realized.load[t],
                gen: agent.realized.gen[t],
                q_da: agent.q_da[t],
                q_b: ledger.bought(i),
                q_s: ledger.sold(i),
            };
            let (record, ess) = settle_and_balance(&position, &agent.ess, &prices, self.config.dt, &agent.params);
            let record = record.with_p2p(&ledger, i);
            agent.ess = ess;
            rewards.push(reward(&record));
            settlements.push(record);
        }

        self.state.hour += 1;
        let done = self.state.is_done();
        if done {
            self.carried_energy = Some(self.state.agents.iter().map(|a| a.ess.energy).collect());
        }
        Ok(StepResult {
            hour: t,
            market_factor: m,
            quotations,
            ledger,
            settlements,
            rewards,
            observations: self.observations(),
            done,
        })
    }
}

fn initial_state(config: &EnvConfig, seed: u64, carried: Option<&[f64]>) -> GlobalState {
    let stream = SeedStream::new(seed);
    let horizon = config.horizon;
    let agents = config
        .fleet
        .iter()
        .zip(&config.profiles)
        .enumerate()
        .map(|(i, (params, profile))| {
            let agent_stream = stream.child(i as u64);
            let fc = forecast(profile, params, horizon);
            let mut realized = sample_realization(profile, params, config.process_noise, horizon, agent_stream);
            realized.gen = apply_pv_disruption(&realized.gen, &config.disruption, agent_stream);
            let q_da = fc
                .load
                .iter()
                .zip(&fc.gen)
                .map(|(&l, &g)| day_ahead_quantity(l, g, params.beta))
                .collect();
            let mut ess = EssState::initial(params);
            if let Some(energies) = carried {
                ess.energy = energies[i].clamp(params.e_min, params.e_max);
            }
            AgentState {
                params: params.clone(),
                ess,
                forecast: fc,
                realized,
                q_da,
            }
        })
        .collect();
    GlobalState {
        hour: 0,
        horizon,
        agents,
        prices: config.prices.clone(),
        stream,
    }
}

/// One JSON-lines trajectory record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: usize,
    pub hour: usize,
    pub market_factor: MarketFactor,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub quotations: Vec<Quotation>,
    pub rewards: Vec<f64>,
    /// Executed cells as `(buyer_id, seller_id, kwh, price)`.
    pub trades: Vec<(usize, usize, f64, f64)>,
    pub settlements: Vec<SettlementRecord>,
}

impl TrajectoryRecord {
    pub fn new(episode: usize, observations: Vec<Observation>, actions: Vec<Action>, step: &StepResult) -> Self {
        TrajectoryRecord {
            episode,
            hour: step.hour,
            market_factor: step.market_factor,
            observations,
            actions,
            quotations: step.quotations.clone(),
            rewards: step.rewards.clone(),
            trades: step.ledger.cells().collect(),
            settlements: step.settlements.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn quiet_config() -> EnvConfig {
        EnvConfig {
            disruption: DisruptionConfig::none(),
            process_noise: 0.0,
            observation_noise: 0.0,
            ..EnvConfig::reference()
        }
    }

    #[test]
    fn reset_uses_initial_energy() {
        let mut env = Env::new(EnvConfig::reference()).unwrap();
        let obs = env.reset(7);
        assert_eq!(obs.len(), 4);
        let energies: Vec<f64> = env.state().agents.iter().map(|a| a.ess.energy).collect();
        assert_eq!(energies, vec![0.0, 2.0, 0.0, 20.0]);
        assert_eq!(env.state().hour, 0);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = Env::new(EnvConfig::reference()).unwrap();
        let mut b = Env::new(EnvConfig::reference()).unwrap();
        assert_eq!(a.reset(7), b.reset(7));
        assert_eq!(a.state(), b.state());
        let first = a.state().clone();
        a.reset(8);
        assert_ne!(&first, a.state());
    }

    #[test]
    fn large_buyer_buys_day_ahead_every_hour() {
        let mut env = Env::new(EnvConfig::reference()).unwrap();
        env.reset(7);
        assert!(env.state().agents[2].q_da.iter().all(|&q| q > 0.0));
    }

    fn state_with(load: f64, gen: f64, q_da: f64, storage: f64) -> GlobalState {
        let params = MicrogridParams::reference_fleet()[3].clone();
        GlobalState {
            hour: 0,
            horizon: 1,
            agents: vec![AgentState {
                params,
                ess: EssState {
                    energy: storage,
                    reservation: 1.0,
                },
                forecast: Realization {
                    load: vec![load],
                    gen: vec![gen],
                },
                realized: Realization {
                    load: vec![load],
                    gen: vec![gen],
                },
                q_da: vec![q_da],
            }],
            prices: PriceSchedule::bundled(),
            stream: SeedStream::new(0),
        }
    }

    #[test]
    fn market_factor_thresholds() {
        let th = MarketThresholds::default();
        assert_eq!(market_index(&state_with(50.0, 20.0, 25.0, 30.0)), -25.0);
        assert_eq!(compute_market_factor(&state_with(50.0, 20.0, 25.0, 30.0), &th), MarketFactor::Balanced);
        assert_eq!(th.classify(-40.0), MarketFactor::Surplus);
        assert_eq!(th.classify(0.0), MarketFactor::Deficit);
        assert_eq!(th.classify(-30.0), MarketFactor::Balanced);
        assert_eq!(th.classify(-20.0), MarketFactor::Balanced);
    }

    #[test]
    fn observation_window_shape_and_padding() {
        let cfg = EnvConfig::reference();
        let mut env = Env::new(cfg.clone()).unwrap();
        let obs = env.reset(1);
        assert_eq!(obs[0].window.len(), 8);
        assert!(!obs[0].window[0].valid);
        assert_eq!(obs[0].window[0].load, 0.0);
        assert!(obs[0].window[1..].iter().all(|s| s.valid));
        assert_eq!(obs[0].features(cfg.feature_scale).len(), cfg.obs_dim());
        assert_eq!(cfg.obs_dim(), 44);
    }

    #[test]
    fn noiseless_observation_matches_forecast() {
        let cfg = quiet_config();
        let mut env = Env::new(cfg).unwrap();
        let obs = env.reset(3);
        let a = &env.state().agents[1];
        for slot in obs[1].window.iter().filter(|s| s.valid) {
            let z = slot.hour as usize;
            assert_eq!(slot.load, a.forecast.load[z]);
            assert_eq!(slot.gen, a.forecast.gen[z]);
            assert_eq!(slot.q_da, a.q_da[z]);
        }
    }

    fn test_state() -> GlobalState {
        let mut env = Env::new(quiet_config()).unwrap();
        env.reset(0);
        env.state().clone()
    }

    #[test]
    fn decode_affine_price_map() {
        let mut cfg = quiet_config();
        cfg.prices = PriceSchedule::flat(0.2, 1.0, 2.2);
        let mut env = Env::new(cfg.clone()).unwrap();
        env.reset(0);
        let d = decode_action(&Action::new(0.5, 1.0, 1.0), env.state(), &cfg, 0);
        assert!((d.quotation.price - 1.2).abs() < 1e-12);
        assert_eq!(d.quotation.role(), Role::Buyer);
        let d = decode_action(&Action::new(-1.0, 1.0, 1.0), env.state(), &cfg, 0);
        assert_eq!(d.quotation.price, -2.2);
        let d = decode_action(&Action::new(0.0, 1.0, 1.0), env.state(), &cfg, 0);
        assert_eq!(d.quotation.price, 0.2);
        let d = decode_action(&Action::new(0.3, 0.0, 1.0), env.state(), &cfg, 0);
        assert!(d.quotation.is_null());
    }

    #[test]
    fn decoded_quotes_are_always_valid() {
        let cfg = EnvConfig::reference();
        let state = test_state();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100_000 {
            let a = Action::new(rng.random_range(-1.0..=1.0), rng.random(), rng.random());
            let agent = rng.random_range(0..4);
            let d = decode_action(&a, &state, &cfg, agent);
            validate_quotation(&d.quotation, &state.envelope(0)).unwrap();
            assert!((0.0..=1.0).contains(&d.reservation));
        }
    }

    #[test]
    fn no_trade_step_settles_by_recourse() {
        let mut env = Env::new(EnvConfig::reference()).unwrap();
        env.reset(2);
        let r = env.step(&[Action::new(0.3, 0.0, 1.0); 4]).unwrap();
        assert!(r.ledger.is_empty());
        assert!(r.max_balance_residual(1.0) <= 1e-9);
        for s in &r.settlements {
            assert_eq!(s.q_b + s.q_s, 0.0);
        }
    }

    #[test]
    fn complementary_agents_trade_without_emergency() {
        let seller = MicrogridParams {
            l_max: 1.0,
            g_max: 6.0,
            e_max: 1.0,
            e_min: 0.0,
            t_charge_max: 1e-9,
            t_discharge_max: 1e-9,
            eta_ch: 1.0,
            eta_dis: 1.0,
            e0: 0.0,
            beta: 0.95,
        };
        let buyer = MicrogridParams {
            l_max: 6.0,
            g_max: 1.0,
            ..seller.clone()
        };
        let flat = DailyProfile {
            load: [1.0; 24],
            pv: [1.0; 24],
        };
        let mut cfg = quiet_config();
        cfg.fleet = vec![seller, buyer];
        cfg.profiles = vec![flat.clone(), flat];
        let mut env = Env::new(cfg).unwrap();
        env.reset(0);
        // seller: 5 kWh surplus; buyer: 5 kWh deficit, 4.75 covered day-ahead
        let r = env
            .step(&[Action::new(-0.0001, 1.0, 1.0), Action::new(1.0, 1.0, 1.0)])
            .unwrap();
        assert_eq!(r.ledger.trades.len(), 1);
        assert!((r.ledger.trades[0].quantity - 5.0).abs() < 1e-6);
        assert_eq!(r.settlements[1].q_e, 0.0);
        assert!(r.max_balance_residual(1.0) <= 1e-9);
    }

    #[test]
    fn episode_ends_after_horizon() {
        let mut env = Env::new(EnvConfig::reference()).unwrap();
        env.reset(4);
        for t in 0..24 {
            let r = env.step(&[Action::new(0.5, 0.5, 0.5); 4]).unwrap();
            assert_eq!(r.done, t == 23);
        }
        assert!(matches!(
            env.step(&[Action::default(); 4]),
            Err(EnvError::EpisodeFinished(24))
        ));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut env = Env::new(EnvConfig::reference()).unwrap();
        env.reset(0);
        assert!(matches!(env.step(&[Action::default(); 3]), Err(EnvError::WrongActionCount { .. })));
        assert!(matches!(
            env.step(&[Action::new(1.5, 0.0, 0.0); 4]),
            Err(EnvError::InvalidAction { agent: 0, .. })
        ));
        let mut cfg = EnvConfig::reference();
        cfg.profiles.pop();
        assert!(matches!(Env::new(cfg), Err(EnvError::ConfigInvalid(_))));
    }

    #[test]
    fn rewards_sum_to_grid_profit_under_midpoint_mechanisms() {
        for kind in [MechanismKind::Jpq, MechanismKind::Greedy, MechanismKind::Mrda] {
            let mut cfg = EnvConfig::reference();
            cfg.mechanism = kind;
            let mut env = Env::new(cfg).unwrap();
            env.reset(9);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..24 {
                let actions: Vec<Action> = (0..4)
                    .map(|_| Action::new(rng.random_range(-1.0..=1.0), rng.random(), rng.random()))
                    .collect();
                let r = env.step(&actions).unwrap();
                let total: f64 = r.rewards.iter().sum();
                let grid: f64 = r.settlements.iter().map(|s| s.profit_grid).sum();
                assert!((total - grid).abs() < 1e-9, "{kind}: {total} vs {grid}");
            }
        }
    }

    #[test]
    fn carry_over_keeps_final_energy() {
        let mut cfg = EnvConfig::reference();
        cfg.carry_over_energy = true;
        let mut env = Env::new(cfg).unwrap();
        env.reset(0);
        for _ in 0..24 {
            env.step(&[Action::new(-0.2, 0.0, 1.0); 4]).unwrap();
        }
        let end: Vec<f64> = env.state().agents.iter().map(|a| a.ess.energy).collect();
        env.reset(1);
        let start: Vec<f64> = env.state().agents.iter().map(|a| a.ess.energy).collect();
        assert_eq!(end, start);
    }
}
