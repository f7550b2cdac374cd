//! Python bindings: market clearing, the trading environment, the scripted
//! agents and the file-producing commands.

use std::path::{Path, PathBuf};

use p2pgrid_core::config::RunConfig;
use p2pgrid_core::env::{Action, Env as CoreEnv, Observation};
use p2pgrid_core::market::{MarketFactor, Mechanism, MechanismKind, MrdaConfig, PriceEnvelope, Quotation};
use p2pgrid_core::marl::compute_gae as core_gae;
use p2pgrid_core::policy::{ScriptRule, ScriptedPolicy};
use p2pgrid_core::rng::SeedStream;
use p2pgrid_core::sim;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: sim::SimError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn market_factor(m: i8) -> PyResult<MarketFactor> {
    MarketFactor::try_from(m).map_err(value_err)
}

fn load_config(config: Option<PathBuf>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p),
        None => RunConfig::from_env(),
    }
    .map_err(value_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// One executed match.
#[pyclass(frozen, get_all, skip_from_py_object, module = "p2pgrid")]
#[derive(Clone)]
struct Trade {
    buyer: usize,
    seller: usize,
    quantity: f64,
    buyer_price: f64,
    seller_price: f64,
}

#[pymethods]
impl Trade {
    fn __repr__(&self) -> String {
        format!(
            "Trade(buyer={}, seller={}, quantity={}, buyer_price={}, seller_price={})",
            self.buyer, self.seller, self.quantity, self.buyer_price, self.seller_price
        )
    }
}

/// Clears one hour of quotes.
///
/// `quotes` is a list of `(agent_id, signed_price, quantity)`; a negative
/// price marks a seller. `m` is the market factor (-1, 0 or 1).
#[pyfunction]
#[pyo3(signature = (quotes, m=0, mechanism="jpq", feed_in=0.2, day_ahead=1.0, emergency=3.5))]
fn clear(quotes: Vec<(usize, f64, f64)>, m: i8, mechanism: &str, feed_in: f64, day_ahead: f64, emergency: f64) -> PyResult<Vec<Trade>> {
    let kind: MechanismKind = mechanism.parse().map_err(value_err)?;
    let env = PriceEnvelope::new(feed_in, day_ahead, emergency).map_err(value_err)?;
    let quotes: Vec<Quotation> = quotes.into_iter().map(|(id, p, q)| Quotation::new(id, p, q)).collect();
    let ledger = Mechanism::from_kind(kind, MrdaConfig::default()).clear(&quotes, market_factor(m)?, &env);
    Ok(ledger
        .trades
        .iter()
        .map(|t| Trade {
            buyer: t.buyer_id,
            seller: t.seller_id,
            quantity: t.quantity,
            buyer_price: t.buyer_price,
            seller_price: t.seller_price,
        })
        .collect())
}

/// Generalized advantage estimates for one trajectory.
#[pyfunction]
#[pyo3(signature = (rewards, values, gamma, lam, bootstrap=0.0))]
fn compute_gae(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64, bootstrap: f64) -> PyResult<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(value_err("rewards and values must have the same length"));
    }
    Ok(core_gae(&rewards, &values, bootstrap, gamma, lam))
}

/// The multi-microgrid trading environment.
///
/// Observations are returned as flat feature vectors, one per agent.
/// Actions are `(price, quantity_fraction, reservation)` triples in
/// `[-1, 1] x [0, 1] x [0, 1]`.
#[pyclass(module = "p2pgrid")]
struct Env {
    inner: CoreEnv,
    obs: Vec<Observation>,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (config=None, mechanism=None))]
    fn new(config: Option<PathBuf>, mechanism: Option<&str>) -> PyResult<Self> {
        let mut cfg = load_config(config, None)?;
        if let Some(m) = mechanism {
            cfg.mechanism = m.to_string();
        }
        let env_cfg = cfg.env_config().map_err(value_err)?;
        Ok(Env {
            inner: CoreEnv::new(env_cfg).map_err(value_err)?,
            obs: Vec::new(),
        })
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.config().obs_dim()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.config().horizon
    }

    #[getter]
    fn mechanism(&self) -> String {
        self.inner.config().mechanism.to_string()
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.obs = self.inner.reset(seed);
        self.features()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        let scale = self.inner.config().feature_scale;
        self.obs.iter().map(|o| o.features(scale)).collect()
    }

    /// Actions the scripted `rule` (net-position, random or zero) would take
    /// for the current observations.
    #[pyo3(signature = (rule="net-position", margin=0.1, seed=0))]
    fn scripted_actions(&self, rule: &str, margin: f64, seed: u64) -> PyResult<Vec<(f64, f64, f64)>> {
        let rule: ScriptRule = rule.parse().map_err(value_err)?;
        let policy = ScriptedPolicy::new(rule, margin);
        policy.validate().map_err(value_err)?;
        let cfg = self.inner.config();
        let mut rng = SeedStream::new(seed).path(&[self.inner.state().hour as u64]).rng();
        Ok(self
            .obs
            .iter()
            .zip(&cfg.fleet)
            .map(|(o, p)| {
                let a = policy.act(o, p, cfg.dt, &mut rng);
                (a.price_raw, a.qty_frac, a.reservation)
            })
            .collect())
    }

    /// Advances one hour. Returns a dict with `observations`, `rewards`,
    /// `market_factor`, `trades`, `emergency_kwh`, `feedin_kwh`,
    /// `stored_kwh`, `balance_residual` and `done`.
    fn step<'py>(&mut self, py: Python<'py>, actions: Vec<(f64, f64, f64)>) -> PyResult<Bound<'py, PyDict>> {
        let actions: Vec<Action> = actions.into_iter().map(|(p, q, r)| Action::new(p, q, r)).collect();
        let step = self.inner.step(&actions).map_err(value_err)?;
        self.obs = step.observations.clone();
        let dt = self.inner.config().dt;
        let out = PyDict::new(py);
        out.set_item("observations", self.features())?;
        out.set_item("rewards", step.rewards.clone())?;
        out.set_item("market_factor", i8::from(step.market_factor))?;
        out.set_item("trades", step.ledger.cells().collect::<Vec<_>>())?;
        out.set_item("emergency_kwh", step.settlements.iter().map(|s| s.q_e).collect::<Vec<_>>())?;
        out.set_item("feedin_kwh", step.settlements.iter().map(|s| s.q_fit).collect::<Vec<_>>())?;
        out.set_item("stored_kwh", step.settlements.iter().map(|s| s.energy).collect::<Vec<_>>())?;
        out.set_item("balance_residual", step.max_balance_residual(dt))?;
        out.set_item("done", step.done)?;
        Ok(out)
    }
}

/// Runs scripted episodes; writes `trajectory.jsonl` and `metrics.csv`.
/// Returns the community reward of each episode.
#[pyfunction]
#[pyo3(signature = (out, config=None, episodes=None, seed=None, checkpoint=None))]
fn simulate(out: PathBuf, config: Option<PathBuf>, episodes: Option<usize>, seed: Option<u64>, checkpoint: Option<PathBuf>) -> PyResult<Vec<f64>> {
    let cfg = load_config(config, seed)?;
    let n = episodes.unwrap_or(cfg.episodes);
    let res = sim::cmd_simulate(&cfg, n, &out, checkpoint.as_deref()).map_err(sim_err)?;
    Ok(res.metrics.iter().map(|m| m.community.reward).collect())
}

/// Paired mechanism comparison. Returns `{mechanism: {metric: mean}}`.
#[pyfunction]
#[pyo3(signature = (out, mechanisms, config=None, episodes=None, seed=None))]
fn compare<'py>(
    py: Python<'py>,
    out: PathBuf,
    mechanisms: Vec<String>,
    config: Option<PathBuf>,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = load_config(config, seed)?;
    cfg.mechanisms = mechanisms;
    let kinds = cfg.mechanism_kinds().map_err(value_err)?;
    let n = episodes.unwrap_or(cfg.episodes);
    let cmp = sim::cmd_compare(&cfg, &kinds, n, &out).map_err(sim_err)?;
    let table = PyDict::new(py);
    for r in &cmp.rows {
        let row = PyDict::new(py);
        for (name, v) in p2pgrid_core::metrics::METRIC_NAMES.iter().zip(r.mean.values()) {
            row.set_item(*name, v)?;
        }
        table.set_item(r.mechanism.to_string(), row)?;
    }
    Ok(table)
}

/// Trains the learner; writes `checkpoint.json`, `metrics.csv` and
/// `manifest.json`. Returns the community reward of each episode.
#[pyfunction]
#[pyo3(signature = (out, config=None, episodes=None, seed=None, resume=None))]
fn train(out: PathBuf, config: Option<PathBuf>, episodes: Option<usize>, seed: Option<u64>, resume: Option<PathBuf>) -> PyResult<Vec<f64>> {
    let mut cfg = load_config(config, seed)?;
    if let Some(n) = episodes {
        cfg.learner.episodes = n;
    }
    let res = sim::cmd_train(&cfg, &out, resume.as_deref()).map_err(sim_err)?;
    Ok(res.trainer.metrics.iter().map(|m| m.community.reward).collect())
}

/// Converts a trajectory into a tidy CSV; returns the number of data rows.
#[pyfunction]
#[pyo3(signature = (trajectory, out, format="tidy-csv"))]
fn export(trajectory: PathBuf, out: PathBuf, format: &str) -> PyResult<usize> {
    sim::cmd_export(Path::new(&trajectory), format, &out).map_err(sim_err)
}

#[pymodule]
fn p2pgrid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Trade>()?;
    m.add_class::<Env>()?;
    m.add_function(wrap_pyfunction!(clear, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(export, m)?)?;
    Ok(())
}
