//! Experiments comparing simulated ensembles with the quantum oracles:
//! marginal distances, beta sweeps, velocity-profile probes, two-time
//! measurements with collapse, and the decoupling experiment.

mod decoupling;
mod measurement;

pub use decoupling::{
    covariance_oracle, decoupling_experiment, node_crossing, DecouplingConfig, DecouplingReport, NodeCrossingConfig,
    NodeCrossingRow,
};
pub use measurement::{
    collapse_density, quantum_two_time, stochastic_two_time, two_time_expectation, DriftMode, MeasurementPlan,
    Observable, StochasticValue, TwoTimeConfig, TwoTimeReport,
};

use serde::{Deserialize, Serialize};

use crate::ensemble::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::estimators::{
    self, estimate_density, estimate_forward_derivative, newton_nelson_residual, silverman_bandwidth,
    stochastic_acceleration, velocity_drift, weighted_mismatch, Bins, DerivativeField, DerivativeSettings,
};
use crate::grid::{derivative, Grid1, ScalarFieldGrid};
use crate::process::{
    simulate, ProcessKind, ProcessSpec, PositionSampler, VelocityFamily, VelocityInit, VelocityInitProfile,
};
use crate::quantum::{quantum_potential, AnalyticState, StateParams, B_MAX};
use crate::sde::IntegratorConfig;
use crate::stats;

/// Densities must integrate to one within this before they are compared.
pub const MASS_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L1,
    W1,
}

fn same_grid(a: &Grid1, b: &Grid1) -> bool {
    a.n == b.n && (a.x0 - b.x0).abs() <= 1e-9 * a.dx && (a.dx - b.dx).abs() <= 1e-12 * a.dx
}

fn cumulative(f: &ScalarFieldGrid) -> Vec<f64> {
    let mut c = vec![0.0; f.grid.n];
    for i in 1..f.grid.n {
        c[i] = c[i - 1] + 0.5 * (f.values[i - 1] + f.values[i]) * f.grid.dx;
    }
    c
}

/// L1 or 1-Wasserstein distance between two densities on a common grid.
pub fn marginal_distance(a: &ScalarFieldGrid, b: &ScalarFieldGrid, metric: Metric) -> Result<f64> {
    if !same_grid(&a.grid, &b.grid) {
        return Err(Error::invalid("densities live on different grids"));
    }
    for (name, f) in [("first", a), ("second", b)] {
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{name} density has undefined values")));
        }
        let m = f.integral();
        if (m - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!("{name} density has mass {m}, not 1")));
        }
    }
    let diff: Vec<f64> = match metric {
        Metric::L1 => a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect(),
        Metric::W1 => {
            let (ca, cb) = (cumulative(a), cumulative(b));
            ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).collect()
        }
    };
    Ok(a.grid.integrate(&diff))
}

/// Distances of a KDE of `samples` to `oracle`, with delete-group jackknife
/// errors (the bandwidth is held fixed across groups).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub l1: f64,
    pub l1_se: f64,
    pub w1: f64,
    pub w1_se: f64,
}

pub fn empirical_distance(samples: &[f64], oracle: &ScalarFieldGrid, groups: usize) -> Result<DistanceEstimate> {
    let h = silverman_bandwidth(samples);
    let both = |xs: &[f64]| -> Result<(f64, f64)> {
        let rho = estimate_density(xs, oracle.grid, h)?;
        Ok((
            marginal_distance(&rho, oracle, Metric::L1)?,
            marginal_distance(&rho, oracle, Metric::W1)?,
        ))
    };
    let (l1, w1) = both(samples)?;
    let n = samples.len();
    let loo: Vec<(f64, f64)> = (0..groups)
        .map(|g| {
            let xs: Vec<f64> = samples
                .iter()
                .enumerate()
                .filter(|(i, _)| stats::group_of(*i, n, groups) != g)
                .map(|(_, x)| *x)
                .collect();
            both(&xs)
        })
        .collect::<Result<_>>()?;
    Ok(DistanceEstimate {
        l1,
        l1_se: stats::jackknife_stderr(groups, |g| loo[g].0),
        w1,
        w1_se: stats::jackknife_stderr(groups, |g| loo[g].1),
    })
}

// ---------------------------------------------------------------- trends

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Decrease,
    Increase,
    /// The error bars overlap.
    Unresolved,
}

/// Separation (in combined standard errors) needed to call a trend.
pub const TREND_SIGMAS: f64 = 2.0;

pub fn trend_verdict(a: f64, a_se: f64, b: f64, b_se: f64) -> Verdict {
    let se = (a_se * a_se + b_se * b_se).sqrt();
    if b - a > TREND_SIGMAS * se {
        Verdict::Increase
    } else if a - b > TREND_SIGMAS * se {
        Verdict::Decrease
    } else {
        Verdict::Unresolved
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub metric: String,
    pub from_beta: f64,
    pub to_beta: f64,
    pub verdict: Verdict,
}

// ---------------------------------------------------------------- catalog processes

/// A one-particle catalog state packaged for simulation.
pub struct StateProcess {
    pub state: AnalyticState,
    pub sampler: PositionSampler,
    pub support: (f64, f64),
    pub eps: f64,
}

impl StateProcess {
    pub fn new(name: &str, prm: &StateParams, horizon: f64) -> Result<Self> {
        let state = AnalyticState::new(name, prm)?;
        if state.n_particles() != 1 {
            return Err(Error::invalid(format!("{name} is not a one-particle state")));
        }
        let sampler = match state.gaussian_at(0.0) {
            Some(g) => PositionSampler::gaussian(&g),
            None => {
                let (m, s) = state.extent(0.0)[0];
                let grid = Grid1::linspace(m - 10.0 * s, m + 10.0 * s, 4001)?;
                let rho = ScalarFieldGrid::from_fn(grid, |x| state.density(&[x], 0.0));
                PositionSampler::from_density(&rho)?
            }
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in [0.0, 0.5 * horizon, horizon] {
            let (m, s) = state.extent(t)[0];
            lo = lo.min(m - 40.0 * s);
            hi = hi.max(m + 40.0 * s);
        }
        let eps = (prm.hbar / prm.mass).sqrt();
        Ok(Self {
            state,
            sampler,
            support: (lo, hi),
            eps,
        })
    }

    /// Oracle drift with the node clamp applied.
    pub fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.state.drift(x, t, out);
        for b in out.iter_mut() {
            *b = if b.is_nan() { 0.0 } else { b.clamp(-B_MAX, B_MAX) };
        }
    }

    pub fn acceleration(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        self.state.acceleration(x, out);
    }

    /// `-(1/m) dU/dx` at `x`.
    pub fn force(&self, x: f64) -> f64 {
        let mut a = [0.0];
        self.state.acceleration(&[x], &mut a);
        a[0]
    }

    pub fn oracle_grid(&self, t: f64) -> Result<Grid1> {
        let (m, s) = self.state.extent(t)[0];
        let half = 10.0 * s.max((self.state.hbar() / self.state.masses()[0]).sqrt() * 0.1);
        Grid1::linspace(m - half, m + half, 1001)
    }

    pub fn oracle_density(&self, t: f64) -> Result<ScalarFieldGrid> {
        let grid = self.oracle_grid(t)?;
        ScalarFieldGrid::from_fn(grid, |x| self.state.density(&[x], t)).normalized()
    }

    /// Oracle drift at `x`, `t`.
    pub fn drift_at(&self, x: f64, t: f64) -> f64 {
        let mut b = [0.0];
        self.drift(&[x], t, &mut b);
        b[0]
    }

    pub fn simulate(
        &self,
        kind: ProcessKind,
        beta: Option<f64>,
        profile: VelocityInitProfile,
        cfg: &IntegratorConfig,
        n_traj: usize,
        seed: u64,
    ) -> Result<TrajectoryEnsemble> {
        let drift = |x: &[f64], t: f64, o: &mut [f64]| self.drift(x, t, o);
        let accel = |x: &[f64], t: f64, o: &mut [f64]| self.acceleration(x, t, o);
        let field: &(dyn Fn(&[f64], f64, &mut [f64]) + Sync) = if kind.is_phase_space() { &accel } else { &drift };
        let spec = ProcessSpec {
            kind,
            eps: vec![self.eps],
            betas: beta.into_iter().collect(),
            field,
            init: &self.sampler,
            velocity: kind.is_phase_space().then_some(VelocityInit { b0: &drift, profile }),
            support: vec![self.support],
        };
        if kind.is_colored() && beta.is_none() {
            return Err(Error::invalid(format!("{} needs beta", kind.name())));
        }
        if kind == ProcessKind::PhaseSpaceMulti {
            return Err(Error::invalid("catalog one-particle runs use phase_space"));
        }
        simulate(&spec, cfg, n_traj, seed)
    }

    /// Density-weighted norm of the quantum-potential force `-(1/m) dQ/dx`
    /// at `t` over the reliable bins of `field`.
    pub fn quantum_force_norm(&self, t: f64, field: &DerivativeField) -> Result<f64> {
        let grid = self.oracle_grid(t)?;
        let rho = ScalarFieldGrid::from_fn(grid, |x| self.state.density(&[x], t));
        let m = self.state.masses()[0];
        let q = quantum_potential(&rho, m, self.state.hbar())?;
        let dq = derivative(&q.values, &q.mask, grid.dx);
        let force: Vec<f64> = dq.iter().map(|d| d.map_or(f64::NAN, |d| -d / m)).collect();
        let centers = &field.position;
        let (mut acc, mut total) = (0.0, 0.0);
        for j in field.reliable_bins() {
            let f = grid.interpolate(&force, centers[j]).unwrap_or(f64::NAN);
            if f.is_finite() {
                let w = field.count[j] as f64;
                acc += w * f * f;
                total += w;
            }
        }
        if !(total > 0.0) {
            return Err(Error::invalid("no reliable bins inside the oracle grid"));
        }
        Ok((acc / total).sqrt())
    }
}

// ---------------------------------------------------------------- sweeps

/// Times at which a run is analysed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisTimes {
    /// Final time (marginal distance).
    pub t_final: f64,
    /// Derivative / acceleration estimates.
    pub t_eval: f64,
}

/// Recording plan for a run of length `horizon` whose derivatives are
/// estimated at `horizon - window - delta`, with record spacing `delta / 2`.
pub fn analysis_config(dt: f64, horizon: f64, s: &DerivativeSettings) -> Result<(IntegratorConfig, AnalysisTimes)> {
    let cfg = IntegratorConfig::for_horizon(dt, horizon)?;
    let half = s.delta / 2.0;
    let stride = (half / dt).round() as usize;
    if stride == 0 || ((stride as f64) * dt - half).abs() > 1e-9 * half {
        return Err(Error::config(format!(
            "lag delta = {} must be an even multiple of dt = {dt}",
            s.delta
        )));
    }
    let lag_steps = 2 * stride;
    let win_steps = ((s.window / s.delta) + 1e-9).floor() as usize * lag_steps;
    let n = cfg.n_steps;
    let eval = n
        .checked_sub(win_steps + lag_steps)
        .filter(|e| *e >= win_steps + lag_steps)
        .ok_or_else(|| Error::config("horizon too short for the derivative window"))?;
    // align to the recording stride
    let eval = eval - eval % stride;
    let from = eval - win_steps - lag_steps;
    let cfg = cfg.with_recording(from - from % stride, stride);
    Ok((
        cfg,
        AnalysisTimes {
            t_final: cfg.time_of(n),
            t_eval: cfg.time_of(eval),
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub state: String,
    pub params: StateParams,
    pub kind: ProcessKind,
    pub betas: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub profile: VelocityInitProfile,
    pub derivatives: DerivativeSettings,
    pub max_bins: usize,
    /// Repeat the distance at `dt / 2` (sensitivity column).
    pub dt_halving: bool,
}

impl SweepConfig {
    pub fn new(state: &str, kind: ProcessKind, betas: Vec<f64>) -> Self {
        Self {
            state: state.to_string(),
            params: StateParams::default(),
            kind,
            betas,
            dt: 1e-3,
            horizon: 2.0,
            n_traj: 100_000,
            seed: 7,
            profile: VelocityInitProfile {
                family: VelocityFamily::GaussianAboutB,
                spread: 0.5,
            },
            derivatives: DerivativeSettings::new(0.02).with_window(0.4),
            max_bins: estimators::MAX_BINS,
            dt_halving: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub distance_l1: f64,
    pub distance_l1_se: f64,
    pub distance_w1: f64,
    pub distance_w1_se: f64,
    pub residual_norm: f64,
    pub residual_norm_se: f64,
    pub residual_pooled_se: f64,
    /// Residual norm at half the lag (lag-bias column).
    pub residual_norm_half_delta: f64,
    pub acceleration_slope: f64,
    pub acceleration_slope_se: f64,
    pub drift_mismatch: f64,
    pub drift_mismatch_se: f64,
    pub quantum_force_norm: f64,
    pub distance_l1_half_dt: Option<f64>,
    pub escaped: usize,
    pub t_final: f64,
    pub t_eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub state: String,
    pub kind: ProcessKind,
    pub n_traj: usize,
    pub dt: f64,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub trends: Vec<Trend>,
    /// Binned fields per beta, for plotting.
    #[serde(skip)]
    pub fields: Vec<(f64, RunFields)>,
}

/// Estimated fields of one run at `t_eval`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFields {
    pub forward: DerivativeField,
    pub backward: Option<DerivativeField>,
    pub acceleration: DerivativeField,
    pub drift_estimate: DerivativeField,
}

/// Metrics of one simulated run against the oracle.
pub fn analyze_run(
    sp: &StateProcess,
    ens: &TrajectoryEnsemble,
    kind: ProcessKind,
    times: AnalysisTimes,
    s: &DerivativeSettings,
    max_bins: usize,
) -> Result<(SweepRow, RunFields)> {
    let rf = ens.require_record(times.t_final)?;
    let xs = ens.positions(rf, 0);
    let oracle = sp.oracle_density(times.t_final)?;
    let dist = empirical_distance(&xs, &oracle, s.groups)?;

    let re = ens.require_record(times.t_eval)?;
    let bins = Bins::freedman_diaconis(&ens.positions(re, 0), max_bins)?;
    let acc = stochastic_acceleration(ens, 0, times.t_eval, &bins, s)?;
    let res = newton_nelson_residual(&acc.accel, |x| sp.force(x))?;
    let half = DerivativeSettings {
        delta: s.delta / 2.0,
        ..s.clone()
    };
    let res_half = stochastic_acceleration(ens, 0, times.t_eval, &bins, &half)
        .and_then(|a| newton_nelson_residual(&a.accel, |x| sp.force(x)))?;
    let slope = acc.accel.slope_fit()?;

    let forward = estimate_forward_derivative(ens, 0, times.t_eval, &bins, s)?;
    let drift_estimate = if kind.is_phase_space() {
        velocity_drift(ens, 0, times.t_eval, &bins, s.n_min, s.groups)?
    } else {
        forward.clone()
    };
    let (mismatch, mismatch_se) = weighted_mismatch(&drift_estimate, |x| sp.drift_at(x, times.t_eval))?;
    let qf = sp.quantum_force_norm(times.t_eval, &acc.accel)?;
    let backward = estimators::estimate_backward_derivative(ens, 0, times.t_eval, &bins, s).ok();
    Ok((
        SweepRow {
            beta: f64::NAN,
            distance_l1: dist.l1,
            distance_l1_se: dist.l1_se,
            distance_w1: dist.w1,
            distance_w1_se: dist.w1_se,
            residual_norm: res.norm,
            residual_norm_se: res.norm_stderr,
            residual_pooled_se: res.pooled_stderr,
            residual_norm_half_delta: res_half.norm,
            acceleration_slope: slope.slope,
            acceleration_slope_se: slope.slope_stderr,
            drift_mismatch: mismatch,
            drift_mismatch_se: mismatch_se,
            quantum_force_norm: qf,
            distance_l1_half_dt: None,
            escaped: ens.n_escaped() + ens.n_invalid(),
            t_final: times.t_final,
            t_eval: times.t_eval,
        },
        RunFields {
            forward,
            backward,
            acceleration: acc.accel,
            drift_estimate,
        },
    ))
}

/// Runs the process at each beta and compares with the oracle.
pub fn run_beta_sweep(c: &SweepConfig) -> Result<SweepReport> {
    if !matches!(c.kind, ProcessKind::ColoredSmoothing | ProcessKind::PhaseSpace) {
        return Err(Error::invalid("beta sweeps take colored_smoothing or phase_space"));
    }
    if c.betas.is_empty() || c.betas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("betas must be a non-empty ascending list"));
    }
    let sp = StateProcess::new(&c.state, &c.params, c.horizon)?;
    let (cfg, times) = analysis_config(c.dt, c.horizon, &c.derivatives)?;
    let mut rows = Vec::new();
    let mut fields = Vec::new();
    for &beta in &c.betas {
        let ens = sp.simulate(c.kind, Some(beta), c.profile, &cfg, c.n_traj, c.seed)?;
        let (mut row, f) = analyze_run(&sp, &ens, c.kind, times, &c.derivatives, c.max_bins)?;
        drop(ens);
        row.beta = beta;
        if c.dt_halving {
            let fine = IntegratorConfig::for_horizon(c.dt / 2.0, c.horizon)?;
            let fine = fine.with_recording(fine.n_steps, 1);
            let e = sp.simulate(c.kind, Some(beta), c.profile, &fine, c.n_traj, c.seed)?;
            let xs = e.positions(e.n_records() - 1, 0);
            let d = empirical_distance(&xs, &sp.oracle_density(times.t_final)?, c.derivatives.groups)?;
            row.distance_l1_half_dt = Some(d.l1);
        }
        rows.push(row);
        fields.push((beta, f));
    }
    let mut trends = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let pairs = [
            ("distance_l1", a.distance_l1, a.distance_l1_se, b.distance_l1, b.distance_l1_se),
            ("distance_w1", a.distance_w1, a.distance_w1_se, b.distance_w1, b.distance_w1_se),
            ("residual_norm", a.residual_norm, a.residual_norm_se, b.residual_norm, b.residual_norm_se),
            ("drift_mismatch", a.drift_mismatch, a.drift_mismatch_se, b.drift_mismatch, b.drift_mismatch_se),
        ];
        for (m, va, sa, vb, sb) in pairs {
            trends.push(Trend {
                metric: m.to_string(),
                from_beta: a.beta,
                to_beta: b.beta,
                verdict: trend_verdict(va, sa, vb, sb),
            });
        }
    }
    Ok(SweepReport {
        state: c.state.clone(),
        kind: c.kind,
        n_traj: c.n_traj,
        dt: c.dt,
        seed: c.seed,
        rows,
        trends,
        fields,
    })
}

impl SweepReport {
    /// True unless some consecutive pair of `metric` increases beyond the
    /// error bars.
    pub fn non_increasing(&self, metric: &str) -> bool {
        self.trends
            .iter()
            .filter(|t| t.metric == metric)
            .all(|t| t.verdict != Verdict::Increase)
    }
}

// ---------------------------------------------------------------- single runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub state: String,
    pub params: StateParams,
    pub kind: ProcessKind,
    /// Required for the colored kinds.
    pub beta: Option<f64>,
    pub dt: f64,
    pub horizon: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub profile: VelocityInitProfile,
    pub derivatives: DerivativeSettings,
    pub max_bins: usize,
    /// Evenly spaced marginal checkpoints on `(0, horizon]`.
    pub checkpoints: usize,
}

impl SimulationConfig {
    pub fn new(state: &str, kind: ProcessKind, beta: Option<f64>) -> Self {
        let s = SweepConfig::new(state, kind, beta.into_iter().collect());
        Self {
            state: s.state,
            params: s.params,
            kind,
            beta,
            dt: s.dt,
            horizon: s.horizon,
            n_traj: s.n_traj,
            seed: s.seed,
            profile: s.profile,
            derivatives: s.derivatives,
            max_bins: s.max_bins,
            checkpoints: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub t: f64,
    pub distance_l1: f64,
    pub distance_l1_se: f64,
    pub distance_w1: f64,
    pub distance_w1_se: f64,
    pub mean: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub oracle_mean: f64,
    pub oracle_variance: f64,
}

/// Empirical (KDE) and oracle marginal on the oracle grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal {
    pub t: f64,
    pub empirical: ScalarFieldGrid,
    pub oracle: ScalarFieldGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub state: String,
    pub kind: ProcessKind,
    pub beta: Option<f64>,
    pub n_traj: usize,
    pub checkpoints: Vec<CheckpointRow>,
    pub analysis: SweepRow,
    #[serde(skip)]
    pub marginals: Vec<Marginal>,
    #[serde(skip)]
    pub fields: Option<RunFields>,
}

fn moments(f: &ScalarFieldGrid) -> (f64, f64) {
    let g = f.grid;
    let m = g.integrate(&f.values.iter().enumerate().map(|(i, v)| v * g.point(i)).collect::<Vec<_>>());
    let m2 = g.integrate(&f.values.iter().enumerate().map(|(i, v)| v * g.point(i).powi(2)).collect::<Vec<_>>());
    (m, m2 - m * m)
}

/// One run of a catalog state: marginal distances at the checkpoints and the
/// derivative / residual analysis near the end.
pub fn run_simulation(c: &SimulationConfig) -> Result<SimulationReport> {
    if c.checkpoints == 0 {
        return Err(Error::invalid("need at least one checkpoint"));
    }
    let sp = StateProcess::new(&c.state, &c.params, c.horizon)?;
    let (cfg, times) = analysis_config(c.dt, c.horizon, &c.derivatives)?;
    // record the whole run so the checkpoints are available
    let cfg = cfg.with_recording(0, cfg.record_stride);
    let beta = if c.kind.is_colored() { c.beta } else { None };
    let ens = sp.simulate(c.kind, beta, c.profile, &cfg, c.n_traj, c.seed)?;
    let spacing = ens.times[1] - ens.times[0];
    let mut checkpoints = Vec::new();
    let mut marginals = Vec::new();
    for k in 1..=c.checkpoints {
        let want = c.horizon * k as f64 / c.checkpoints as f64;
        let r = ((want - ens.times[0]) / spacing).round() as usize;
        let r = r.min(ens.n_records() - 1);
        let t = ens.times[r];
        let xs = ens.positions(r, 0);
        let oracle = sp.oracle_density(t)?;
        let d = empirical_distance(&xs, &oracle, c.derivatives.groups)?;
        let (om, ov) = moments(&oracle);
        checkpoints.push(CheckpointRow {
            t,
            distance_l1: d.l1,
            distance_l1_se: d.l1_se,
            distance_w1: d.w1,
            distance_w1_se: d.w1_se,
            mean: stats::mean(&xs),
            variance: stats::variance(&xs),
            variance_se: stats::variance_stderr(&xs),
            oracle_mean: om,
            oracle_variance: ov,
        });
        marginals.push(Marginal {
            t,
            empirical: estimate_density(&xs, oracle.grid, silverman_bandwidth(&xs))?,
            oracle,
        });
    }
    let (mut row, fields) = analyze_run(&sp, &ens, c.kind, times, &c.derivatives, c.max_bins)?;
    row.beta = beta.unwrap_or(f64::INFINITY);
    Ok(SimulationReport {
        state: c.state.clone(),
        kind: c.kind,
        beta,
        n_traj: c.n_traj,
        checkpoints,
        analysis: row,
        marginals,
        fields: Some(fields),
    })
}

// ---------------------------------------------------------------- velocity profiles

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileComparison {
    pub spread: f64,
    pub beta: f64,
    pub t_final: f64,
    pub mean: [f64; 2],
    pub mean_se: [f64; 2],
    pub variance: [f64; 2],
    pub variance_se: [f64; 2],
    pub ks_statistic: f64,
    pub ks_p: f64,
    /// KDE L1 distance between the two final marginals.
    pub l1_between: f64,
    /// Mean and variance differences within twice the combined error.
    pub within_error: bool,
}

/// Runs the phase-space process from the two velocity families at equal
/// spread and compares the final x-marginals.
#[allow(clippy::too_many_arguments)]
pub fn compare_velocity_profiles(
    state: &str,
    params: &StateParams,
    beta: f64,
    spread: f64,
    dt: f64,
    horizon: f64,
    n_traj: usize,
    seed: u64,
) -> Result<ProfileComparison> {
    let sp = StateProcess::new(state, params, horizon)?;
    let cfg = IntegratorConfig::for_horizon(dt, horizon)?;
    let cfg = cfg.with_recording(cfg.n_steps, 1);
    let mut finals = Vec::new();
    for family in [VelocityFamily::GaussianAboutB, VelocityFamily::TwoPointAboutB] {
        let prof = VelocityInitProfile::new(family, spread)?;
        let ens = sp.simulate(ProcessKind::PhaseSpace, Some(beta), prof, &cfg, n_traj, seed)?;
        finals.push(ens.positions(ens.n_records() - 1, 0));
    }
    let ms: Vec<(f64, f64)> = finals.iter().map(|x| stats::mean_and_stderr(x)).collect();
    let vs: Vec<(f64, f64)> = finals.iter().map(|x| (stats::variance(x), stats::variance_stderr(x))).collect();
    let (ks, p) = stats::ks_two_sample(&finals[0], &finals[1])?;
    let grid = sp.oracle_grid(cfg.horizon())?;
    let all: Vec<f64> = finals.concat();
    let h = silverman_bandwidth(&all);
    let d0 = estimate_density(&finals[0], grid, h)?;
    let d1 = estimate_density(&finals[1], grid, h)?;
    let l1 = marginal_distance(&d0, &d1, Metric::L1)?;
    let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() <= 2.0 * (a.1 * a.1 + b.1 * b.1).sqrt();
    Ok(ProfileComparison {
        spread,
        beta,
        t_final: cfg.horizon(),
        mean: [ms[0].0, ms[1].0],
        mean_se: [ms[0].1, ms[1].1],
        variance: [vs[0].0, vs[1].0],
        variance_se: [vs[0].1, vs[1].1],
        ks_statistic: ks,
        ks_p: p,
        l1_between: l1,
        within_error: close(ms[0], ms[1]) && close(vs[0], vs[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(grid: Grid1, m: f64, s: f64) -> ScalarFieldGrid {
        ScalarFieldGrid::from_fn(grid, |x| (-(x - m).powi(2) / (2.0 * s * s)).exp())
            .normalized()
            .unwrap()
    }

    #[test]
    fn distances() {
        let g = Grid1::linspace(-10.0, 10.0, 4001).unwrap();
        let a = gauss(g, 0.0, 1.0);
        assert_eq!(marginal_distance(&a, &a, Metric::L1).unwrap(), 0.0);
        let b = gauss(g, 0.1, 1.0);
        let w = marginal_distance(&a, &b, Metric::W1).unwrap();
        assert!((w - 0.1).abs() < 1e-6, "{w}");
        // spikes three cells apart
        let mut p = vec![0.0; g.n];
        let mut q = vec![0.0; g.n];
        p[1000] = 1.0 / g.dx;
        q[1003] = 1.0 / g.dx;
        let p = ScalarFieldGrid::new(g, p);
        let q = ScalarFieldGrid::new(g, q);
        let w = marginal_distance(&p, &q, Metric::W1).unwrap();
        assert!((w - 3.0 * g.dx).abs() < 1e-12);
        let half = ScalarFieldGrid::new(g, a.values.iter().map(|v| v * 0.5).collect());
        assert!(marginal_distance(&half, &a, Metric::L1).is_err());
    }

    #[test]
    fn verdicts() {
        assert_eq!(trend_verdict(1.0, 0.1, 0.5, 0.1), Verdict::Decrease);
        assert_eq!(trend_verdict(1.0, 0.1, 1.1, 0.1), Verdict::Unresolved);
        assert_eq!(trend_verdict(1.0, 0.01, 1.1, 0.01), Verdict::Increase);
    }

    #[test]
    fn analysis_window_is_aligned() {
        let s = DerivativeSettings::new(0.02).with_window(0.2);
        let (cfg, t) = analysis_config(1e-3, 2.0, &s).unwrap();
        assert!((t.t_final - 2.0).abs() < 1e-12);
        assert!((t.t_eval - 1.78).abs() < 1e-9);
        assert!(cfg.time_of(cfg.record_from) <= 1.56 + 1e-9);
        assert!(analysis_config(1e-3, 0.3, &s).is_err());
        assert!(analysis_config(3e-3, 2.0, &s).is_err());
    }
}
