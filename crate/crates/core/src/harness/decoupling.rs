//! Correlations that survive switching off an interaction, and node
//! crossings of the superposition state.

use nalgebra::{DMatrix, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid1, ScalarFieldGrid};
use crate::process::{simulate, switch_off, PositionSampler, ProcessKind, ProcessSpec, VelocityInit, VelocityInitProfile, VelocityFamily};
use crate::quantum::{AnalyticState, StateParams, B_MAX};
use crate::rng::NoiseStream;
use crate::sde::IntegratorConfig;
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingConfig {
    /// `kappa` is both the initial correlation and the coupling before the
    /// switch-off at `t = 0`.
    pub params: StateParams,
    /// Start from the coupled ground state (true) or the product state.
    pub correlated: bool,
    pub beta: f64,
    pub dt: f64,
    /// Start time; the coupling acts on `[t0, 0)`.
    pub t0: f64,
    pub horizon: f64,
    /// Linear ramp of the switch-off.
    pub smoothing: Option<f64>,
    pub n_traj: usize,
    pub seed: u64,
    pub profile: VelocityInitProfile,
    pub checkpoints: usize,
    /// Drive particle 1 with particle 2's streams and vice versa.
    pub swap_noise: bool,
}

impl Default for DecouplingConfig {
    fn default() -> Self {
        Self {
            params: StateParams::default(),
            correlated: true,
            beta: 100.0,
            dt: 1e-3,
            t0: 0.0,
            horizon: 2.0,
            smoothing: None,
            n_traj: 20_000,
            seed: 5,
            profile: VelocityInitProfile {
                family: VelocityFamily::GaussianAboutB,
                spread: 0.5,
            },
            checkpoints: 10,
            swap_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingReport {
    pub times: Vec<f64>,
    /// Central `<x1 x2>`.
    pub covariance: Vec<f64>,
    pub covariance_se: Vec<f64>,
    pub oracle_covariance: Vec<f64>,
    pub variance: [Vec<f64>; 2],
    pub variance_se: [Vec<f64>; 2],
    pub oracle_variance: [Vec<f64>; 2],
    /// Largest `|estimate - oracle| / se` over covariances and variances.
    pub max_sigmas: f64,
}

type M6 = SMatrix<f64, 6, 6>;

/// Covariance of `(x1, x2, v1, v2, A1, A2)` for the linear phase-space
/// system, propagated by RK4 on the Lyapunov equation.
pub fn covariance_oracle(c: &DecouplingConfig, times: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let (w, kappa) = (c.params.omega, if c.correlated { c.params.kappa } else { 0.0 });
    let eps = (c.params.hbar / c.params.mass).sqrt();
    let g = initial_state(c)?;
    let sigma = g.covariance();
    let b = g.drift_matrix();
    let s2 = c.profile.spread * c.profile.spread;
    let mut cm = M6::zeros();
    let cxv = &sigma * b.transpose();
    let cvv = &b * &sigma * b.transpose();
    for i in 0..2 {
        for j in 0..2 {
            cm[(i, j)] = sigma[(i, j)];
            cm[(i, j + 2)] = cxv[(i, j)];
            cm[(j + 2, i)] = cxv[(i, j)];
            cm[(i + 2, j + 2)] = cvv[(i, j)] + if i == j { s2 } else { 0.0 };
        }
        cm[(i + 4, i + 4)] = c.beta / 2.0;
    }
    let mut q = M6::zeros();
    q[(4, 4)] = c.beta * c.beta;
    q[(5, 5)] = c.beta * c.beta;
    let drift = |t: f64| {
        let s = kappa * switch_off(t, c.smoothing);
        let mut m = M6::zeros();
        for i in 0..2 {
            m[(i, i + 2)] = 1.0;
            m[(i, i + 4)] = eps;
            m[(i + 2, i)] = -w * w;
            m[(i + 2, 1 - i)] = -w * w * s;
            m[(i + 4, i + 4)] = -c.beta;
        }
        m
    };
    let rhs = |t: f64, cm: &M6| {
        let m = drift(t);
        m * cm + cm * m.transpose() + q
    };
    let h = c.dt.min(1e-3);
    let mut t = c.t0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target - 1e-12 {
            // step to the switch time exactly
            let mut step = h.min(target - t);
            if t < 0.0 && t + step > 0.0 {
                step = -t;
            }
            let k1 = rhs(t, &cm);
            let k2 = rhs(t + step / 2.0, &(cm + k1 * (step / 2.0)));
            let k3 = rhs(t + step / 2.0, &(cm + k2 * (step / 2.0)));
            let k4 = rhs(t + step, &(cm + k3 * step));
            cm += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
            t += step;
        }
        out.push(DMatrix::from_iterator(6, 6, cm.iter().copied()));
    }
    Ok(out)
}

fn initial_state(c: &DecouplingConfig) -> Result<crate::quantum::GaussianState> {
    let mut p = c.params.clone();
    if !c.correlated {
        p.kappa = 0.0;
    }
    AnalyticState::new("two_particle_gaussian", &p)?
        .gaussian_at(0.0)
        .ok_or_else(|| Error::invalid("no Gaussian initial state"))
}

/// Two-particle phase-space run from a (possibly correlated) Gaussian with
/// the interaction switched off at `t = 0`.
pub fn decoupling_experiment(c: &DecouplingConfig) -> Result<DecouplingReport> {
    if !(c.t0 <= 0.0) || !(c.horizon > 0.0) || c.checkpoints == 0 {
        return Err(Error::invalid("need t0 <= 0 < horizon and at least one checkpoint"));
    }
    let (w, kappa) = (c.params.omega, if c.correlated { c.params.kappa } else { 0.0 });
    let eps = (c.params.hbar / c.params.mass).sqrt();
    let g = initial_state(c)?;
    // particle order as simulated
    let perm: [usize; 2] = if c.swap_noise { [1, 0] } else { [0, 1] };
    let mut gp = g.clone();
    for i in 0..2 {
        for j in 0..2 {
            gp.z[(i, j)] = g.z[(perm[i], perm[j])];
        }
        gp.q[i] = g.q[perm[i]];
        gp.p[i] = g.p[perm[i]];
    }
    let sampler = PositionSampler::gaussian(&gp);
    let accel = |x: &[f64], t: f64, o: &mut [f64]| {
        let s = kappa * switch_off(t, c.smoothing);
        o[0] = -w * w * (x[0] + s * x[1]);
        o[1] = -w * w * (x[1] + s * x[0]);
    };
    let b0 = |x: &[f64], _t: f64, o: &mut [f64]| gp.drift(x, o);
    let span = c.horizon - c.t0;
    let cfg = IntegratorConfig::for_horizon(c.dt, span)?.with_t0(c.t0);
    let stride = (cfg.n_steps / c.checkpoints).max(1);
    let cfg = cfg.with_recording(cfg.n_steps % stride, stride);
    let sd = 40.0 * (c.params.hbar / (c.params.mass * w)).sqrt() * (1.0 + span);
    let spec = ProcessSpec {
        kind: ProcessKind::PhaseSpaceMulti,
        eps: vec![eps; 2],
        betas: vec![c.beta; 2],
        field: &accel,
        init: &sampler,
        velocity: Some(VelocityInit {
            b0: &b0,
            profile: c.profile,
        }),
        support: vec![(-sd, sd); 2],
    };
    let ens = simulate(&spec, &cfg, c.n_traj, c.seed)?;
    let times = ens.times.clone();
    let oracle = covariance_oracle(c, &times)?;
    let mut r = DecouplingReport {
        times: times.clone(),
        covariance: vec![],
        covariance_se: vec![],
        oracle_covariance: vec![],
        variance: [vec![], vec![]],
        variance_se: [vec![], vec![]],
        oracle_variance: [vec![], vec![]],
        max_sigmas: 0.0,
    };
    let inv = if c.swap_noise { [1, 0] } else { [0, 1] };
    for (k, cm) in oracle.iter().enumerate() {
        let xs = [ens.positions(k, inv[0]), ens.positions(k, inv[1])];
        let (m0, m1) = (stats::mean(&xs[0]), stats::mean(&xs[1]));
        let prods: Vec<f64> = xs[0].iter().zip(&xs[1]).map(|(a, b)| (a - m0) * (b - m1)).collect();
        let (cv, cse) = stats::mean_and_stderr(&prods);
        r.covariance.push(cv);
        r.covariance_se.push(cse);
        r.oracle_covariance.push(cm[(0, 1)]);
        let mut worst = if cse > 0.0 { (cv - cm[(0, 1)]).abs() / cse } else { 0.0 };
        for p in 0..2 {
            let v = stats::variance(&xs[p]);
            let se = stats::variance_stderr(&xs[p]);
            r.variance[p].push(v);
            r.variance_se[p].push(se);
            r.oracle_variance[p].push(cm[(p, p)]);
            if se > 0.0 {
                worst = worst.max((v - cm[(p, p)]).abs() / se);
            }
        }
        r.max_sigmas = r.max_sigmas.max(worst);
    }
    Ok(r)
}

// ---------------------------------------------------------------- nodes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCrossingConfig {
    pub params: StateParams,
    pub dts: Vec<f64>,
    pub horizon: f64,
    pub n_traj: usize,
    pub seed: u64,
    /// Node region: `rho(x, t) < eta * max_x rho(x, t)`.
    pub eta: f64,
}

impl Default for NodeCrossingConfig {
    fn default() -> Self {
        Self {
            params: StateParams::default(),
            dts: vec![4e-3, 2e-3, 1e-3],
            horizon: 2.0 * std::f64::consts::PI,
            n_traj: 4000,
            seed: 3,
            eta: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCrossingRow {
    pub dt: f64,
    pub entries: usize,
    /// Entries into the node region per trajectory per unit time.
    pub rate: f64,
    pub rate_se: f64,
    pub trajectories_entering: usize,
}

/// Nelson diffusion of the `(0 + 1)` superposition under the clamped drift;
/// counts entries into the low-density region around its node.
pub fn node_crossing(c: &NodeCrossingConfig) -> Result<Vec<NodeCrossingRow>> {
    let st = AnalyticState::new("ho_superposition_01", &c.params)?;
    let (_, s) = st.extent(0.0)[0];
    let grid = Grid1::linspace(-10.0 * s, 10.0 * s, 2001)?;
    let rho0 = ScalarFieldGrid::from_fn(grid, |x| st.density(&[x], 0.0));
    let sampler = PositionSampler::from_density(&rho0)?;
    let eps = (c.params.hbar / c.params.mass).sqrt();
    let mut rows = Vec::new();
    for &dt in &c.dts {
        let cfg = IntegratorConfig::for_horizon(dt, c.horizon)?;
        let dt = cfg.dt;
        let n_steps = cfg.n_steps;
        let peak: Vec<f64> = (0..=n_steps)
            .into_par_iter()
            .map(|k| {
                let t = k as f64 * dt;
                grid.points().iter().map(|&x| st.density(&[x], t)).fold(0.0, f64::max)
            })
            .collect();
        let counts: Vec<usize> = (0..c.n_traj)
            .into_par_iter()
            .map(|i| {
                let stream = NoiseStream::new(c.seed, i as u64);
                let mut init = [stream.lane(0)];
                let mut noise = stream.lane(1);
                let mut x = [0.0];
                sampler.sample(&mut init, &mut x);
                let mut inside = false;
                let mut entries = 0;
                let sq = dt.sqrt();
                for k in 0..n_steps {
                    let t = k as f64 * dt;
                    let mut b = [0.0];
                    st.drift(&x, t, &mut b);
                    let b = if b[0].is_nan() { 0.0 } else { b[0].clamp(-B_MAX, B_MAX) };
                    x[0] += b * dt + eps * sq * noise.normal();
                    let now = st.density(&x, t + dt) < c.eta * peak[k + 1];
                    if now && !inside {
                        entries += 1;
                    }
                    inside = now;
                }
                entries
            })
            .collect();
        let entries: usize = counts.iter().sum();
        let exposure = c.n_traj as f64 * c.horizon;
        rows.push(NodeCrossingRow {
            dt,
            entries,
            rate: entries as f64 / exposure,
            rate_se: (entries as f64).sqrt() / exposure,
            trajectories_entering: counts.iter().filter(|&&n| n > 0).count(),
        });
    }
    Ok(rows)
}
