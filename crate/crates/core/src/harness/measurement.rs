//! Position measurement at `t1` followed by an observation at `t2`.
//!
//! The measurement of particle `k` with outcome `xbar` multiplies the
//! wavefunction by `exp(-(x_k - xbar)^2 / (4 w^2))` (a density window of
//! standard deviation `w`). Outcomes are distributed as the smeared marginal
//! `rho_k * N(0, w^2)`. The correlator is `E[f(xbar) g(x_o(t2))]`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid1, ScalarFieldGrid2};
use crate::quantum::{schrodinger_evolve, AnalyticState, GaussianState, SplitStep, StateParams, WavefunctionState};
use crate::rng::NoiseStream;

/// Window mass below which a measurement is rejected.
pub const MIN_WINDOW_MASS: f64 = 1e-6;

/// Regularized collapse of a joint density onto `x_measured ~ value`: the
/// density is multiplied by a Gaussian window of standard deviation `width`
/// in the measured coordinate and renormalized.
pub fn collapse_density(rho: &ScalarFieldGrid2, measured: usize, value: f64, width: f64) -> Result<ScalarFieldGrid2> {
    if measured > 1 || !(width > 0.0) {
        return Err(Error::invalid("bad measured axis or window width"));
    }
    let axis = if measured == 0 { rho.x } else { rho.y };
    if !(value >= axis.x0 && value <= axis.x_max()) {
        return Err(Error::invalid(format!("measured value {value} outside the grid")));
    }
    let mass = rho.integral();
    if (mass - 1.0).abs() > 1e-3 {
        return Err(Error::invalid(format!("joint density has mass {mass}, not 1")));
    }
    let win = |x: f64| (-(x - value).powi(2) / (2.0 * width * width)).exp();
    let out = ScalarFieldGrid2::from_fn(rho.x, rho.y, |a, b| if measured == 0 { win(a) } else { win(b) });
    let values: Vec<f64> = out.values.iter().zip(&rho.values).map(|(w, r)| w * r).collect();
    let out = ScalarFieldGrid2::new(rho.x, rho.y, values)?;
    let m = out.integral();
    if !(m >= MIN_WINDOW_MASS) {
        return Err(Error::DegenerateMeasurement { mass: m });
    }
    out.normalized()
}

/// Bounded observables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Observable {
    /// `sum_k coeffs[k] x^k`.
    Polynomial { coeffs: Vec<f64> },
    /// 1 on `[lo, hi]`.
    Indicator { lo: f64, hi: f64 },
}

impl Observable {
    pub fn identity() -> Self {
        Observable::Polynomial { coeffs: vec![0.0, 1.0] }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Observable::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            Observable::Indicator { lo, hi } => {
                if x >= *lo && x <= *hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    /// Index of the measured particle; `g` is applied to the other one.
    pub measured: usize,
    pub t1: f64,
    pub t2: f64,
    pub f: Observable,
    pub g: Observable,
    pub collapse: bool,
}

impl MeasurementPlan {
    pub fn validate(&self) -> Result<()> {
        if self.measured > 1 {
            return Err(Error::invalid("measured particle must be 0 or 1"));
        }
        if !(self.t1 >= 0.0) || !(self.t2 >= self.t1) {
            return Err(Error::invalid("need 0 <= t1 <= t2"));
        }
        Ok(())
    }

    fn other(&self) -> usize {
        1 - self.measured
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTimeConfig {
    pub params: StateParams,
    /// Points per axis of the oracle grid.
    pub grid_n: usize,
    pub grid_length: f64,
    /// Collapse window; default two oracle grid cells.
    pub width: Option<f64>,
    pub strata: usize,
    pub n_traj: usize,
    pub dt: f64,
    pub quantum_dt: f64,
    pub seed: u64,
}

impl Default for TwoTimeConfig {
    fn default() -> Self {
        Self {
            params: StateParams::default(),
            grid_n: 256,
            grid_length: 40.0,
            width: None,
            strata: 64,
            n_traj: 64 * 400,
            dt: 1e-3,
            quantum_dt: 5e-3,
            seed: 11,
        }
    }
}

impl TwoTimeConfig {
    pub fn grid(&self) -> Result<Grid1> {
        Grid1::periodic(-self.grid_length / 2.0, self.grid_length, self.grid_n)
    }

    pub fn default_width(&self) -> Result<f64> {
        Ok(match self.width {
            Some(w) if w > 0.0 => w,
            Some(w) => return Err(Error::invalid(format!("window width must be positive, got {w}"))),
            None => 2.0 * self.grid()?.dx,
        })
    }

    fn state(&self) -> Result<AnalyticState> {
        AnalyticState::new("two_particle_gaussian", &self.params)
    }
}

/// Oracle correlator: the grid wavefunction is evolved to `t1`, collapsed
/// for each outcome, evolved to `t2` and averaged over outcomes.
///
/// The observation acts on the unmeasured particle only and the
/// Hamiltonian after `t = 0` is decoupled, so the slices
/// `psi(x_k = x_i, .)` can be evolved one at a time; every outcome then
/// reweights the same slice expectations.
pub fn quantum_two_time(plan: &MeasurementPlan, c: &TwoTimeConfig, width: f64) -> Result<f64> {
    plan.validate()?;
    if !(width > 0.0) {
        return Err(Error::invalid("window width must be positive"));
    }
    let st = c.state()?;
    let grid = c.grid()?;
    let psi0 = st.wavefunction(&[grid, grid], 0.0)?;
    let osc = st.oscillators();
    let pot2: Vec<f64> = {
        let mut v = Vec::with_capacity(grid.n * grid.n);
        for i in 0..grid.n {
            for j in 0..grid.n {
                let (x, y) = (grid.point(i), grid.point(j));
                v.push(st.potential(&[x, y]));
            }
        }
        v
    };
    let psi1 = if plan.t1 > 0.0 {
        schrodinger_evolve(&psi0, &pot2, c.quantum_dt, plan.t1, usize::MAX)?
            .pop()
            .expect("evolution returns the final state")
    } else {
        psi0
    };
    let (k, o) = (plan.measured, plan.other());
    let n = grid.n;
    let at = |i: usize, j: usize| if k == 0 { psi1.psi[i * n + j] } else { psi1.psi[j * n + i] };

    let oo = osc[o];
    let pot1: Vec<f64> = grid
        .points()
        .iter()
        .map(|y| 0.5 * oo.mass * oo.omega * oo.omega * y * y)
        .collect();
    let tau = plan.t2 - plan.t1;
    let steps = if tau > 0.0 { (tau / c.quantum_dt).ceil() as usize } else { 0 };
    let mass = [psi1.masses[o]];
    let template = WavefunctionState::new(vec![grid], vec![Complex64::default(); n], mass.to_vec(), psi1.hbar, 0.0)?;
    let stepper = if steps > 0 {
        Some(SplitStep::new(&template, &pot1, tau / steps as f64)?)
    } else {
        None
    };
    let ys = grid.points();
    // (R_i, G_i): slice norm and unnormalized <g> after evolution
    let slices: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut phi: Vec<Complex64> = (0..n).map(|j| at(i, j)).collect();
            let r: f64 = phi.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dx;
            if let Some(s) = &stepper {
                for _ in 0..steps {
                    s.step(&mut phi);
                }
            }
            let g: f64 = phi
                .iter()
                .zip(&ys)
                .map(|(z, y)| z.norm_sqr() * plan.g.eval(*y))
                .sum::<f64>()
                * grid.dx;
            (r, g)
        })
        .collect();

    let xs = grid.points();
    let (mut num, mut den) = (0.0, 0.0);
    for &xbar in &xs {
        let (mut wg, mut wr) = (0.0, 0.0);
        for (i, &x) in xs.iter().enumerate() {
            let w = (-(x - xbar).powi(2) / (2.0 * width * width)).exp();
            wg += w * slices[i].1;
            wr += w * slices[i].0;
        }
        num += plan.f.eval(xbar) * wg;
        den += wr;
    }
    Ok(num / den)
}

/// Which drift drives the stochastic particles after `t1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Drift of the collapsed wavefunction.
    Collapsed,
    /// Drift of the unmeasured wavefunction.
    Uncollapsed,
    /// Density-independent control drift `b_i = -omega_i x_i`, used with
    /// and without collapse.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticValue {
    pub value: f64,
    pub stderr: f64,
}

/// Affine drift `b(x) = D x + c0 + xbar c1` tabulated per step.
struct DriftTable {
    d: Vec<[f64; 4]>,
    c0: Vec<[f64; 2]>,
    c1: Vec<[f64; 2]>,
}

fn affine(g: &GaussianState) -> ([f64; 4], [f64; 2]) {
    let m = g.drift_matrix();
    let mut c = [0.0; 2];
    g.drift(&[0.0, 0.0], &mut c);
    ([m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]], c)
}

/// Stochastic correlator: trajectories restart at `t1` from the collapsed
/// density (outcomes drawn stratified from the smeared marginal) and follow
/// the Nelson diffusion with the drift selected by `mode`.
pub fn stochastic_two_time(
    plan: &MeasurementPlan,
    c: &TwoTimeConfig,
    width: f64,
    mode: DriftMode,
) -> Result<StochasticValue> {
    plan.validate()?;
    if c.strata == 0 || c.n_traj == 0 {
        return Err(Error::invalid("need at least one stratum and one trajectory"));
    }
    let st = c.state()?;
    let g1 = st
        .gaussian_at(plan.t1)
        .ok_or_else(|| Error::invalid("two-time runs need a Gaussian state"))?;
    let osc = st.oscillators();
    let (k, o) = (plan.measured, plan.other());
    let c0 = g1.collapse(k, 0.0, width)?;
    let c1 = g1.collapse(k, 1.0, width)?;
    let factor: DMatrix<f64> = c0.sampling_factor();
    let q0 = [c0.q[0], c0.q[1]];
    let dq = [c1.q[0] - c0.q[0], c1.q[1] - c0.q[1]];
    let outcome = Normal::new(g1.q[k], (g1.covariance()[(k, k)] + width * width).sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?;

    let tau = plan.t2 - plan.t1;
    let steps = if tau > 0.0 { (tau / c.dt).ceil() as usize } else { 0 };
    let dt = if steps > 0 { tau / steps as f64 } else { 0.0 };
    let mut table = DriftTable {
        d: Vec::with_capacity(steps),
        c0: Vec::with_capacity(steps),
        c1: Vec::with_capacity(steps),
    };
    for j in 0..steps {
        let s = j as f64 * dt;
        match mode {
            DriftMode::Collapsed => {
                let (d, a) = affine(&c0.evolve(&osc, s)?);
                let (_, b) = affine(&c1.evolve(&osc, s)?);
                table.d.push(d);
                table.c0.push(a);
                table.c1.push([b[0] - a[0], b[1] - a[1]]);
            }
            DriftMode::Uncollapsed => {
                let (d, a) = affine(&g1.evolve(&osc, s)?);
                table.d.push(d);
                table.c0.push(a);
                table.c1.push([0.0; 2]);
            }
            DriftMode::Linear => {
                table.d.push([-osc[0].omega, 0.0, 0.0, -osc[1].omega]);
                table.c0.push([0.0; 2]);
                table.c1.push([0.0; 2]);
            }
        }
    }
    let eps = [
        (g1.hbar / g1.masses[0]).sqrt(),
        (g1.hbar / g1.masses[1]).sqrt(),
    ];
    let strata = c.strata;
    let per = c.n_traj.div_ceil(strata);
    let n = per * strata;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let stream = NoiseStream::new(c.seed, i as u64);
            let mut init = stream.lane(0);
            let mut noise = [stream.lane(1), stream.lane(3)];
            let s = i % strata;
            let u = ((s as f64 + init.uniform()) / strata as f64).clamp(1e-300, 1.0 - 1e-16);
            let xbar = outcome.inverse_cdf(u);
            let z = [init.normal(), init.normal()];
            let mut x = [0.0; 2];
            for a in 0..2 {
                x[a] = q0[a] + xbar * dq[a] + (0..=a).map(|b| factor[(a, b)] * z[b]).sum::<f64>();
            }
            let sq = dt.sqrt();
            for j in 0..steps {
                let d = &table.d[j];
                let b = [
                    d[0] * x[0] + d[1] * x[1] + table.c0[j][0] + xbar * table.c1[j][0],
                    d[2] * x[0] + d[3] * x[1] + table.c0[j][1] + xbar * table.c1[j][1],
                ];
                for a in 0..2 {
                    x[a] += b[a] * dt + eps[a] * sq * noise[a].normal();
                }
            }
            plan.f.eval(xbar) * plan.g.eval(x[o])
        })
        .collect();
    // equal-weight strata
    let (mut mean, mut var) = (0.0, 0.0);
    for s in 0..strata {
        let v: Vec<f64> = values.iter().skip(s).step_by(strata).copied().collect();
        let m = crate::stats::mean(&v);
        mean += m / strata as f64;
        if v.len() > 1 {
            var += crate::stats::variance(&v) / v.len() as f64 / (strata * strata) as f64;
        }
    }
    if !mean.is_finite() {
        return Err(Error::Trajectory {
            index: 0,
            reason: "non-finite two-time correlator".into(),
        });
    }
    Ok(StochasticValue {
        value: mean,
        stderr: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTimeReport {
    pub plan: MeasurementPlan,
    pub width: f64,
    pub quantum: f64,
    pub quantum_half_width: f64,
    /// Stochastic value for the plan's collapse flag.
    pub stochastic: StochasticValue,
    pub collapse_on: StochasticValue,
    pub collapse_off: StochasticValue,
    pub collapse_on_half_width: StochasticValue,
    pub linear_on: StochasticValue,
    pub linear_off: StochasticValue,
    pub equal_time_quantum: f64,
    pub equal_time_on: StochasticValue,
    pub equal_time_off: StochasticValue,
    /// `|on - quantum|` in standard errors of the stochastic value.
    pub on_sigmas: f64,
    pub off_sigmas: f64,
    pub width_stable: bool,
    pub equal_time_agree: bool,
    pub linear_control_agree: bool,
}

fn sigmas(v: &StochasticValue, reference: f64) -> f64 {
    (v.value - reference).abs() / v.stderr.max(1e-300)
}

fn agree(a: &StochasticValue, b: &StochasticValue) -> bool {
    (a.value - b.value).abs() <= 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
}

/// Oracle and stochastic two-time correlators with collapse on and off,
/// plus the width-halving, equal-time and linear-control checks.
pub fn two_time_expectation(plan: &MeasurementPlan, c: &TwoTimeConfig) -> Result<TwoTimeReport> {
    plan.validate()?;
    let w = c.default_width()?;
    let quantum = quantum_two_time(plan, c, w)?;
    let quantum_half_width = quantum_two_time(plan, c, w / 2.0)?;
    let on = stochastic_two_time(plan, c, w, DriftMode::Collapsed)?;
    let off = stochastic_two_time(plan, c, w, DriftMode::Uncollapsed)?;
    let on_half = stochastic_two_time(plan, c, w / 2.0, DriftMode::Collapsed)?;
    // both linear runs restart from the collapsed density; the drift ignores it
    let linear_on = stochastic_two_time(plan, c, w, DriftMode::Linear)?;
    let linear_off = stochastic_two_time(plan, c, w, DriftMode::Linear)?;
    let eq = MeasurementPlan {
        t2: plan.t1,
        ..plan.clone()
    };
    let equal_time_quantum = quantum_two_time(&eq, c, w)?;
    let equal_time_on = stochastic_two_time(&eq, c, w, DriftMode::Collapsed)?;
    let equal_time_off = stochastic_two_time(&eq, c, w, DriftMode::Uncollapsed)?;
    let width_stable = agree(&on, &on_half)
        && (quantum - quantum_half_width).abs() <= 3.0 * on.stderr.max(on_half.stderr);
    let equal_time_agree = sigmas(&equal_time_on, equal_time_quantum) <= 3.0
        && sigmas(&equal_time_off, equal_time_quantum) <= 3.0
        && agree(&equal_time_on, &equal_time_off);
    Ok(TwoTimeReport {
        plan: plan.clone(),
        width: w,
        quantum,
        quantum_half_width,
        stochastic: if plan.collapse { on } else { off },
        on_sigmas: sigmas(&on, quantum),
        off_sigmas: sigmas(&off, quantum),
        collapse_on: on,
        collapse_off: off,
        collapse_on_half_width: on_half,
        linear_control_agree: agree(&linear_on, &linear_off),
        linear_on,
        linear_off,
        equal_time_quantum,
        equal_time_on,
        equal_time_off,
        width_stable,
        equal_time_agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observables() {
        let p = Observable::Polynomial { coeffs: vec![1.0, 0.0, 2.0] };
        assert_eq!(p.eval(3.0), 19.0);
        let i = Observable::Indicator { lo: 0.0, hi: 1.0 };
        assert_eq!(i.eval(0.5), 1.0);
        assert_eq!(i.eval(1.5), 0.0);
        assert_eq!(Observable::identity().eval(-2.5), -2.5);
    }

    #[test]
    fn product_density_collapse_keeps_other_marginal() {
        let g = Grid1::linspace(-6.0, 6.0, 241).unwrap();
        let n = |x: f64| (-x * x / 2.0).exp() / (std::f64::consts::TAU).sqrt();
        let rho = ScalarFieldGrid2::from_fn(g, g, |a, b| n(a) * n(b - 0.5)).normalized().unwrap();
        let c = collapse_density(&rho, 0, 1.0, 0.2).unwrap();
        let before = rho.marginal_y();
        let after = c.marginal_y();
        for j in 0..g.n {
            assert!((before.values[j] - after.values[j]).abs() < 1e-9);
        }
        assert!(collapse_density(&rho, 0, 7.0, 0.2).is_err());
        let tail = ScalarFieldGrid2::from_fn(g, g, |a, b| (-(a + 5.0).powi(2) * 50.0).exp() * n(b));
        let tail = tail.normalized().unwrap();
        assert!(matches!(
            collapse_density(&tail, 0, 5.0, 0.05),
            Err(Error::DegenerateMeasurement { .. })
        ));
    }
}
