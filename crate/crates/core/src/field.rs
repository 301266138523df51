//! Free scalar field in a periodic 1-D box, quantized mode by mode.
//!
//! Each box mode is an independent oscillator with unit mass and frequency
//! `omega_i = sqrt(m^2 + k_i^2)`; mode `i` is particle `i` of a
//! multi-particle phase-space run. The gravitational-noise spectrum
//! calculators live at the bottom.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::ensemble::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::harness::{trend_verdict, Verdict};
use crate::estimators::{newton_nelson_residual, stochastic_acceleration, Bins, DerivativeSettings, Residual};
use crate::process::{simulate, PositionSampler, ProcessKind, ProcessSpec, VelocityInit, VelocityInitProfile};
use crate::rng::NoiseStream;
use crate::sde::IntegratorConfig;
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape", content = "k")]
pub enum ModeShape {
    Constant,
    Cos(f64),
    Sin(f64),
}

/// Periodic real basis `1/sqrt(L)`, `sqrt(2/L) cos(kx)`, `sqrt(2/L) sin(kx)`
/// with `k = 2 pi j / L`, ordered const, c1, s1, c2, s2, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSystem {
    pub length: f64,
    pub mass: f64,
    pub shapes: Vec<ModeShape>,
    pub k: Vec<f64>,
    pub omega: Vec<f64>,
}

pub fn mode_basis(length: f64, n: usize, mass: f64) -> Result<ModeSystem> {
    if n == 0 {
        return Err(Error::invalid("need at least one mode"));
    }
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::invalid(format!("box length must be > 0, got {length}")));
    }
    if !(mass >= 0.0) || !mass.is_finite() {
        return Err(Error::invalid(format!("field mass must be >= 0, got {mass}")));
    }
    let mut shapes = Vec::with_capacity(n);
    shapes.push(ModeShape::Constant);
    let mut j = 1;
    while shapes.len() < n {
        let k = 2.0 * PI * j as f64 / length;
        shapes.push(ModeShape::Cos(k));
        if shapes.len() < n {
            shapes.push(ModeShape::Sin(k));
        }
        j += 1;
    }
    let k: Vec<f64> = shapes
        .iter()
        .map(|s| match s {
            ModeShape::Constant => 0.0,
            ModeShape::Cos(k) | ModeShape::Sin(k) => *k,
        })
        .collect();
    let omega = k.iter().map(|k| dispersion(*k, mass)).collect();
    Ok(ModeSystem {
        length,
        mass,
        shapes,
        k,
        omega,
    })
}

#[inline]
pub fn dispersion(k: f64, mass: f64) -> f64 {
    (mass * mass + k * k).sqrt()
}

impl ModeSystem {
    pub fn n(&self) -> usize {
        self.shapes.len()
    }

    pub fn u(&self, i: usize, x: f64) -> f64 {
        let l = self.length;
        match self.shapes[i] {
            ModeShape::Constant => 1.0 / l.sqrt(),
            ModeShape::Cos(k) => (2.0 / l).sqrt() * (k * x).cos(),
            ModeShape::Sin(k) => (2.0 / l).sqrt() * (k * x).sin(),
        }
    }

    pub fn u_all(&self, x: f64) -> Vec<f64> {
        (0..self.n()).map(|i| self.u(i, x)).collect()
    }

    /// Truncated completeness sum `sum_i u_i(x) u_i(x')`.
    pub fn kernel(&self, x: f64, x2: f64) -> f64 {
        (0..self.n()).map(|i| self.u(i, x) * self.u(i, x2)).sum()
    }

    /// Periodic grid of `n` points on `[0, L)`.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        (0..n).map(|j| self.length * j as f64 / n as f64).collect()
    }

    /// Gram matrix on an `n`-point periodic grid (exact for `n` above twice
    /// the highest harmonic).
    pub fn gram(&self, n: usize) -> Vec<Vec<f64>> {
        let xs = self.grid(n);
        let dx = self.length / n as f64;
        let vals: Vec<Vec<f64>> = (0..self.n()).map(|i| xs.iter().map(|x| self.u(i, *x)).collect()).collect();
        (0..self.n())
            .map(|i| (0..self.n()).map(|j| vals[i].iter().zip(&vals[j]).map(|(a, b)| a * b).sum::<f64>() * dx).collect())
            .collect()
    }

    /// Ground-state position spread of each mode, `sqrt(hbar / 2 omega)`;
    /// zero for a massless constant mode.
    pub fn ground_sd(&self, hbar: f64) -> Vec<f64> {
        self.omega
            .iter()
            .map(|w| if *w > 0.0 { (hbar / (2.0 * w)).sqrt() } else { 0.0 })
            .collect()
    }

    /// Classical energy `sum (v_i^2 + omega_i^2 q_i^2) / 2`.
    pub fn energy(&self, q: &[f64], v: &[f64]) -> f64 {
        q.iter()
            .zip(v)
            .zip(&self.omega)
            .map(|((q, v), w)| 0.5 * (v * v + w * w * q * q))
            .sum()
    }
}

/// `phi` and `V` on a set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub t: f64,
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn reconstruct_field(q: &[f64], v: &[f64], modes: &ModeSystem, xs: &[f64], t: f64) -> Result<FieldSnapshot> {
    if q.len() != modes.n() || v.len() != modes.n() {
        return Err(Error::invalid("mode coordinates do not match the mode count"));
    }
    let mut phi = vec![0.0; xs.len()];
    let mut vf = vec![0.0; xs.len()];
    for (j, x) in xs.iter().enumerate() {
        for i in 0..modes.n() {
            let u = modes.u(i, *x);
            phi[j] += q[i] * u;
            vf[j] += v[i] * u;
        }
    }
    Ok(FieldSnapshot {
        t,
        x: xs.to_vec(),
        phi,
        v: vf,
    })
}

/// Field of trajectory `traj` of a mode ensemble at time `t`.
pub fn snapshot(ens: &TrajectoryEnsemble, traj: usize, t: f64, modes: &ModeSystem, xs: &[f64]) -> Result<FieldSnapshot> {
    let r = ens.require_record(t)?;
    let q: Vec<f64> = (0..modes.n()).map(|i| ens.x_at(r, traj, i)).collect();
    let v: Vec<f64> = match ens.v {
        Some(_) => (0..modes.n()).map(|i| ens.v_at(r, traj, i).unwrap()).collect(),
        None => vec![0.0; modes.n()],
    };
    reconstruct_field(&q, &v, modes, xs, ens.times[r])
}

/// Mode coordinates of a field sampled on the periodic grid `modes.grid(n)`.
pub fn project(phi: &[f64], modes: &ModeSystem) -> Vec<f64> {
    let xs = modes.grid(phi.len());
    let dx = modes.length / phi.len() as f64;
    (0..modes.n())
        .map(|i| phi.iter().zip(&xs).map(|(p, x)| p * modes.u(i, *x)).sum::<f64>() * dx)
        .collect()
}

// ---------------------------------------------------------------- simulation

/// Per-mode runs: phase space `dq = (v + eps A) dt, dv = -omega^2 q dt`, or
/// colored smoothing `dq = (-omega q + eps A) dt`, each mode started in its
/// ground state (`q ~ N(0, hbar / 2 omega)`, `v` about `-omega q`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_field(
    modes: &ModeSystem,
    kind: ProcessKind,
    betas: &[f64],
    eps: f64,
    profile: VelocityInitProfile,
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let sd = modes.ground_sd(eps * eps);
    let init = PositionSampler::independent_normal(&vec![0.0; modes.n()], &sd);
    simulate_field_from(modes, kind, betas, eps, &init, profile, cfg, n_traj, seed)
}

/// As [`simulate_field`] with an arbitrary initial law for the `q_i`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_field_from(
    modes: &ModeSystem,
    kind: ProcessKind,
    betas: &[f64],
    eps: f64,
    init: &PositionSampler,
    profile: VelocityInitProfile,
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let n = modes.n();
    if betas.len() != n {
        return Err(Error::invalid(format!("{} betas for {} modes", betas.len(), n)));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid("eps must be >= 0"));
    }
    let kind = match kind {
        ProcessKind::PhaseSpace | ProcessKind::PhaseSpaceMulti => ProcessKind::PhaseSpaceMulti,
        k => k,
    };
    let sd = modes.ground_sd(eps * eps);
    let w = modes.omega.clone();
    let w2: Vec<f64> = w.iter().map(|w| w * w).collect();
    let drift = |x: &[f64], _t: f64, out: &mut [f64]| {
        for i in 0..x.len() {
            out[i] = -w[i] * x[i];
        }
    };
    let accel = |x: &[f64], _t: f64, out: &mut [f64]| {
        for i in 0..x.len() {
            out[i] = -w2[i] * x[i];
        }
    };
    let support: Vec<(f64, f64)> = sd
        .iter()
        .map(|s| {
            let r = (40.0 * s).max(1e3);
            (-r, r)
        })
        .collect();
    let spec = ProcessSpec {
        kind,
        eps: vec![eps; n],
        betas: betas.to_vec(),
        field: if kind.is_phase_space() { &accel } else { &drift },
        init,
        velocity: kind.is_phase_space().then_some(VelocityInit { b0: &drift, profile }),
        support,
    };
    simulate(&spec, cfg, n_traj, seed).map_err(|e| e.in_module("field"))
}

pub fn simulate_field_phase_space(
    modes: &ModeSystem,
    betas: &[f64],
    eps: f64,
    profile: VelocityInitProfile,
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    simulate_field(modes, ProcessKind::PhaseSpace, betas, eps, profile, cfg, n_traj, seed)
}

// ---------------------------------------------------------------- checks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeVariance {
    pub mode: usize,
    pub omega: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub target: f64,
    pub rel_error: f64,
}

/// Empirical `Var q_i` at `t` against `hbar / 2 omega_i` (massive modes only).
pub fn mode_variances(ens: &TrajectoryEnsemble, modes: &ModeSystem, hbar: f64, t: f64) -> Result<Vec<ModeVariance>> {
    let r = ens.require_record(t)?;
    Ok((0..modes.n())
        .filter(|&i| modes.omega[i] > 0.0)
        .map(|i| {
            let q = ens.positions(r, i);
            let var = stats::variance(&q);
            let target = hbar / (2.0 * modes.omega[i]);
            ModeVariance {
                mode: i,
                omega: modes.omega[i],
                variance: var,
                variance_se: stats::variance_stderr(&q),
                target,
                rel_error: (var - target) / target,
            }
        })
        .collect())
}

/// Largest `|cov(q_i, q_j)| / se` over mode pairs `i != j` at `t`.
pub fn max_cross_covariance_sigmas(ens: &TrajectoryEnsemble, modes: &ModeSystem, t: f64) -> Result<f64> {
    let r = ens.require_record(t)?;
    let qs: Vec<Vec<f64>> = (0..modes.n()).map(|i| ens.positions(r, i)).collect();
    let means: Vec<f64> = qs.iter().map(|q| stats::mean(q)).collect();
    let mut worst: f64 = 0.0;
    for i in 0..qs.len() {
        for j in i + 1..qs.len() {
            let prod: Vec<f64> = qs[i]
                .iter()
                .zip(&qs[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .collect();
            let (m, se) = stats::mean_and_stderr(&prod);
            if se > 0.0 {
                worst = worst.max(m.abs() / se);
            }
        }
    }
    Ok(worst)
}

/// Equal-time covariance of the noise field `eps sum_i u_i(x) A_i`,
/// normalized by `eps^2 beta / 2` so it compares directly with the
/// truncated kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCovariance {
    pub n_modes: usize,
    pub probes: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub covariance_se: Vec<Vec<f64>>,
    pub kernel: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// `cov(x_0, x_1) / cov(x_0, x_0)` and its jackknife error.
    pub ratio: f64,
    pub ratio_se: f64,
    pub kernel_ratio: f64,
}

pub fn noise_covariance_check(
    ens: &TrajectoryEnsemble,
    modes: &ModeSystem,
    eps: f64,
    beta: f64,
    probes: &[f64],
    t: f64,
    groups: usize,
) -> Result<NoiseCovariance> {
    if probes.len() < 2 {
        return Err(Error::invalid("need at least two probe points"));
    }
    if !(eps > 0.0) || !(beta > 0.0) {
        return Err(Error::invalid("noise check needs eps > 0 and beta > 0"));
    }
    if ens.noise.is_none() {
        return Err(Error::invalid("ensemble carries no colored noise"));
    }
    let r = ens.require_record(t)?;
    let valid = ens.valid_indices();
    let n = valid.len();
    if n < 2 * groups.max(2) {
        return Err(Error::invalid("too few trajectories for the noise check"));
    }
    let us: Vec<Vec<f64>> = probes.iter().map(|x| modes.u_all(*x)).collect();
    let scale = (beta / 2.0).sqrt();
    // eta_p / (eps sqrt(beta/2)) per trajectory and probe
    let eta: Vec<Vec<f64>> = us
        .iter()
        .map(|u| {
            valid
                .iter()
                .map(|&tr| (0..modes.n()).map(|i| u[i] * ens.noise_at(r, tr, i).unwrap()).sum::<f64>() / scale)
                .collect()
        })
        .collect();
    let np = probes.len();
    let cov_of = |skip: Option<usize>, a: usize, b: usize| -> f64 {
        let keep = |k: usize| skip.map_or(true, |g| stats::group_of(k, n, groups) != g);
        let (mut sa, mut sb, mut sab, mut m) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            if keep(k) {
                sa += eta[a][k];
                sb += eta[b][k];
                sab += eta[a][k] * eta[b][k];
                m += 1.0;
            }
        }
        (sab - sa * sb / m) / (m - 1.0)
    };
    let mut covariance = vec![vec![0.0; np]; np];
    let mut covariance_se = vec![vec![0.0; np]; np];
    for a in 0..np {
        for b in 0..np {
            covariance[a][b] = cov_of(None, a, b);
            covariance_se[a][b] = stats::jackknife_stderr(groups, |g| cov_of(Some(g), a, b));
        }
    }
    let ratio = covariance[0][1] / covariance[0][0];
    let ratio_se = stats::jackknife_stderr(groups, |g| cov_of(Some(g), 0, 1) / cov_of(Some(g), 0, 0));
    let kernel: Vec<Vec<f64>> = probes.iter().map(|x| probes.iter().map(|y| modes.kernel(*x, *y)).collect()).collect();
    let (mean, mean_se): (Vec<f64>, Vec<f64>) = eta
        .iter()
        .map(|e| {
            let (m, se) = stats::mean_and_stderr(e);
            (m * eps * scale, se * eps * scale)
        })
        .unzip();
    Ok(NoiseCovariance {
        n_modes: modes.n(),
        probes: probes.to_vec(),
        kernel_ratio: kernel[0][1] / kernel[0][0],
        covariance,
        covariance_se,
        kernel,
        mean,
        mean_se,
        ratio,
        ratio_se,
    })
}

/// Per-mode Newton-Nelson residuals combined into a field residual
/// `R(x)^2 = sum_i r_i^2 u_i(x)^2` at the probes.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldResidual {
    pub per_mode: Vec<Residual>,
    pub probes: Vec<f64>,
    pub field: Vec<f64>,
    /// RMS of `field` over the probes.
    pub norm: f64,
}

pub fn field_nn_residual(
    ens: &TrajectoryEnsemble,
    modes: &ModeSystem,
    probes: &[f64],
    t: f64,
    settings: &DerivativeSettings,
    max_bins: usize,
) -> Result<FieldResidual> {
    if probes.is_empty() {
        return Err(Error::invalid("need at least one probe point"));
    }
    if ens.n_particles != modes.n() {
        return Err(Error::invalid("ensemble does not match the mode system"));
    }
    let r = ens.require_record(t)?;
    let per_mode: Vec<Residual> = (0..modes.n())
        .map(|i| {
            let bins = Bins::freedman_diaconis(&ens.positions(r, i), max_bins)?;
            let acc = stochastic_acceleration(ens, i, t, &bins, settings)?;
            let w2 = modes.omega[i] * modes.omega[i];
            newton_nelson_residual(&acc.accel, |q| -w2 * q)
        })
        .collect::<Result<_>>()?;
    let field: Vec<f64> = probes
        .iter()
        .map(|x| {
            (0..modes.n())
                .map(|i| (per_mode[i].norm * modes.u(i, *x)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let norm = (field.iter().map(|f| f * f).sum::<f64>() / field.len() as f64).sqrt();
    Ok(FieldResidual {
        per_mode,
        probes: probes.to_vec(),
        field,
        norm,
    })
}

// ---------------------------------------------------------------- check suite

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldCheckConfig {
    pub length: f64,
    pub mass: f64,
    pub hbar: f64,
    pub beta: f64,
    pub dt: f64,
    pub profile: VelocityInitProfile,
    pub seed: u64,
    /// Truncations for the noise-covariance trend.
    pub mode_counts: Vec<usize>,
    pub noise_time: f64,
    pub noise_traj: usize,
    pub variance_modes: usize,
    pub variance_time: f64,
    pub variance_traj: usize,
    pub equivalence_traj: usize,
    pub equivalence_horizon: f64,
}

impl Default for FieldCheckConfig {
    fn default() -> Self {
        Self {
            length: 10.0,
            mass: 1.0,
            hbar: 1.0,
            beta: 1000.0,
            dt: 1e-4,
            profile: VelocityInitProfile {
                family: crate::process::VelocityFamily::GaussianAboutB,
                spread: 0.5,
            },
            seed: 13,
            mode_counts: vec![8, 16, 32],
            noise_time: 0.01,
            noise_traj: 50_000,
            variance_modes: 8,
            variance_time: 0.01,
            variance_traj: 20_000,
            equivalence_traj: 500,
            equivalence_horizon: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrend {
    pub from_modes: usize,
    pub to_modes: usize,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldCheckReport {
    pub config: FieldCheckConfig,
    /// One-mode field run equals the single-particle oscillator run bit for bit.
    pub equivalence_bit_exact: bool,
    pub noise: Vec<NoiseCovariance>,
    pub noise_trends: Vec<NoiseTrend>,
    pub noise_ratio_decreasing: bool,
    /// Largest `|mean| / se` of the noise field over probes and truncations.
    pub noise_mean_sigmas: f64,
    pub variances: Vec<ModeVariance>,
    pub variances_within_5pct: bool,
    pub cross_covariance_sigmas: f64,
}

/// Single-mode field run against the stand-alone oscillator run.
pub fn single_mode_equivalence(c: &FieldCheckConfig) -> Result<bool> {
    let modes = mode_basis(c.length, 1, c.mass)?;
    let eps = c.hbar.sqrt();
    let cfg = IntegratorConfig::for_horizon(c.dt, c.equivalence_horizon)?;
    let a = simulate_field_phase_space(&modes, &[c.beta], eps, c.profile, &cfg, c.equivalence_traj, c.seed)?;

    let w = modes.omega[0];
    let sd = modes.ground_sd(c.hbar);
    let r = (40.0 * sd[0]).max(1e3);
    let init = PositionSampler::independent_normal(&[0.0], &sd);
    let accel = |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -(w * w) * x[0];
    let b0 = |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -w * x[0];
    let b = crate::process::simulate_phase_space(
        &accel,
        &init,
        VelocityInit {
            b0: &b0,
            profile: c.profile,
        },
        eps,
        c.beta,
        (-r, r),
        &cfg,
        c.equivalence_traj,
        c.seed,
    )?;
    let same = |p: &[f64], q: &[f64]| p.len() == q.len() && p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(same(&a.x, &b.x)
        && same(a.v.as_deref().unwrap_or(&[]), b.v.as_deref().unwrap_or(&[]))
        && same(a.noise.as_deref().unwrap_or(&[]), b.noise.as_deref().unwrap_or(&[]))
        && a.status == b.status)
}

pub fn field_checks(c: &FieldCheckConfig) -> Result<FieldCheckReport> {
    if c.mode_counts.is_empty() || c.variance_modes == 0 {
        return Err(Error::invalid("field checks need mode counts"));
    }
    if !(c.hbar > 0.0) {
        return Err(Error::invalid("hbar must be > 0"));
    }
    let eps = c.hbar.sqrt();
    let equivalence_bit_exact = single_mode_equivalence(c)?;

    let mut noise = Vec::new();
    for (j, &n) in c.mode_counts.iter().enumerate() {
        let modes = mode_basis(c.length, n, c.mass)?;
        let cfg = IntegratorConfig::for_horizon(c.dt, c.noise_time)?;
        let cfg = cfg.with_recording(cfg.n_steps, 1);
        let ens = simulate_field_phase_space(&modes, &vec![c.beta; n], eps, c.profile, &cfg, c.noise_traj, c.seed + 1 + j as u64)?;
        let t = *ens.times.last().unwrap();
        noise.push(noise_covariance_check(&ens, &modes, eps, c.beta, &[0.0, 0.5 * c.length], t, 20)?);
    }
    let noise_trends: Vec<NoiseTrend> = noise
        .windows(2)
        .map(|w| NoiseTrend {
            from_modes: w[0].n_modes,
            to_modes: w[1].n_modes,
            verdict: trend_verdict(w[0].ratio, w[0].ratio_se, w[1].ratio, w[1].ratio_se),
        })
        .collect();
    let noise_ratio_decreasing = noise_trends.iter().all(|t| t.verdict == Verdict::Decrease);
    let noise_mean_sigmas = noise
        .iter()
        .flat_map(|n| n.mean.iter().zip(&n.mean_se).map(|(m, s)| m.abs() / s))
        .fold(0.0, f64::max);

    let modes = mode_basis(c.length, c.variance_modes, c.mass)?;
    let cfg = IntegratorConfig::for_horizon(c.dt, c.variance_time)?;
    let cfg = cfg.with_recording(cfg.n_steps, 1);
    let ens = simulate_field_phase_space(&modes, &vec![c.beta; modes.n()], eps, c.profile, &cfg, c.variance_traj, c.seed + 100)?;
    let t = *ens.times.last().unwrap();
    let variances = mode_variances(&ens, &modes, c.hbar, t)?;
    let variances_within_5pct = !variances.is_empty() && variances.iter().all(|v| v.rel_error.abs() <= 0.05);
    let cross_covariance_sigmas = max_cross_covariance_sigmas(&ens, &modes, t)?;

    Ok(FieldCheckReport {
        config: c.clone(),
        equivalence_bit_exact,
        noise,
        noise_trends,
        noise_ratio_decreasing,
        noise_mean_sigmas,
        variances,
        variances_within_5pct,
        cross_covariance_sigmas,
    })
}

// ---------------------------------------------------------------- spectra

fn check_spectrum_args(k: f64, g: f64) -> Result<()> {
    if k == 0.0 || !k.is_finite() {
        return Err(Error::invalid("k = 0 is the undefined zero mode of the Poisson equation"));
    }
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::invalid(format!("G must be > 0, got {g}")));
    }
    Ok(())
}

/// Matter spectrum `|k|^4 / (4 pi G)^2 * eps^2 / xi^2 * t` driven by the
/// large-beta potential noise.
pub fn gravitational_spectrum(k: f64, t: f64, eps: f64, xi: f64, g: f64) -> Result<f64> {
    check_spectrum_args(k, g)?;
    if xi == 0.0 || !xi.is_finite() {
        return Err(Error::invalid("xi must be nonzero"));
    }
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("t must be >= 0, got {t}")));
    }
    let fg = 4.0 * PI * g;
    Ok(k.powi(4) / (fg * fg) * eps * eps / (xi * xi) * t)
}

/// Potential spectrum through the Poisson transfer `(4 pi G)^2 / |k|^4`.
pub fn potential_spectrum(p_matter: f64, k: f64, g: f64) -> Result<f64> {
    check_spectrum_args(k, g)?;
    let fg = 4.0 * PI * g;
    Ok(fg * fg / k.powi(4) * p_matter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonBand {
    pub k_lo: f64,
    pub k_hi: f64,
    pub modes: usize,
    /// Measured potential power over `potential_spectrum(P(k))`, band mean.
    pub ratio: f64,
    pub ratio_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonCheck {
    pub n: usize,
    pub length: f64,
    pub realizations: usize,
    pub bands: Vec<PoissonBand>,
    pub max_rel_error: f64,
}

/// Samples periodic Gaussian matter fields with spectrum `p(k)` on `n`
/// points, solves `lap theta = 4 pi G delta` spectrally and compares the
/// measured potential power with the transfer, band by band.
pub fn poisson_round_trip(
    n: usize,
    length: f64,
    p: impl Fn(f64) -> f64 + Sync,
    g: f64,
    realizations: usize,
    n_bands: usize,
    seed: u64,
) -> Result<PoissonCheck> {
    if n < 8 || n % 2 != 0 {
        return Err(Error::invalid("grid size must be even and >= 8"));
    }
    if !(length > 0.0) || realizations < 2 || n_bands == 0 || n_bands > n / 2 - 1 {
        return Err(Error::invalid("bad Poisson check settings"));
    }
    check_spectrum_args(1.0, g)?;
    let fg = 4.0 * PI * g;
    let dx = length / n as f64;
    let kof = |j: usize| 2.0 * PI * j as f64 / length;
    let half = n / 2;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    // |theta_k|^2 / L for j = 1..half-1, per realization
    let power: Vec<Vec<f64>> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let mut s = NoiseStream::new(seed, r as u64);
            let mut dk = vec![Complex64::new(0.0, 0.0); n];
            for j in 1..half {
                let a = (length * p(kof(j)) / 2.0).sqrt();
                let c = Complex64::new(a * s.normal(), a * s.normal());
                dk[j] = c;
                dk[n - j] = c.conj();
            }
            dk[half] = Complex64::new((length * p(kof(half))).sqrt() * s.normal(), 0.0);
            // delta(x_j) = (1/L) sum_k delta_k e^{ikx}
            inv.process(&mut dk);
            let delta: Vec<f64> = dk.iter().map(|c| c.re / length).collect();
            // theta_k = -4 pi G delta_k / k^2 with delta_k = dx sum_j delta_j e^{-ikx}
            let mut buf: Vec<Complex64> = delta.iter().map(|d| Complex64::new(*d * dx, 0.0)).collect();
            fwd.process(&mut buf);
            (1..half)
                .map(|j| {
                    let k = kof(j);
                    let th = buf[j] * (-fg / (k * k));
                    th.norm_sqr() / length
                })
                .collect()
        })
        .collect();

    let per_band = (half - 1) / n_bands;
    let mut bands = Vec::with_capacity(n_bands);
    for b in 0..n_bands {
        let lo = 1 + b * per_band;
        let hi = if b + 1 == n_bands { half } else { lo + per_band };
        // per-realization band mean of the ratio
        let vals: Vec<f64> = power
            .iter()
            .map(|row| {
                (lo..hi)
                    .map(|j| row[j - 1] / (fg * fg / kof(j).powi(4) * p(kof(j))))
                    .sum::<f64>()
                    / (hi - lo) as f64
            })
            .collect();
        let (m, se) = stats::mean_and_stderr(&vals);
        bands.push(PoissonBand {
            k_lo: kof(lo),
            k_hi: kof(hi - 1),
            modes: hi - lo,
            ratio: m,
            ratio_se: se,
        });
    }
    let max_rel_error = bands.iter().map(|b| (b.ratio - 1.0).abs()).fold(0.0, f64::max);
    Ok(PoissonCheck {
        n,
        length,
        realizations,
        bands,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::VelocityFamily;

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion(3.0, 0.0), 3.0);
        assert_eq!(dispersion(3.0, 4.0), 5.0);
    }

    #[test]
    fn basis_is_orthonormal() {
        let m = mode_basis(7.3, 9, 0.5).unwrap();
        let gm = m.gram(64);
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gm[i][j] - want).abs() < 1e-10, "{i} {j} {}", gm[i][j]);
            }
        }
        assert!(m.omega.windows(2).all(|w| w[0] <= w[1]));
        assert!(m.omega.iter().all(|w| *w >= 0.5));
    }

    #[test]
    fn kernel_ratio_at_half_box() {
        for (n, want) in [(8, 1.0 / 9.0), (16, 1.0 / 17.0), (32, 1.0 / 33.0)] {
            let m = mode_basis(10.0, n, 1.0).unwrap();
            let r = m.kernel(0.0, 5.0) / m.kernel(0.0, 0.0);
            assert!((r - want).abs() < 1e-12, "{n}: {r}");
        }
    }

    #[test]
    fn spectrum_examples() {
        let g = 1.0 / (4.0 * PI);
        assert!((gravitational_spectrum(2.0, 1.0, 1.0, 1.0, g).unwrap() - 16.0).abs() < 1e-12);
        assert_eq!(gravitational_spectrum(3.0, 0.0, 1.0, 1.0, g).unwrap(), 0.0);
        assert!(gravitational_spectrum(0.0, 1.0, 1.0, 1.0, g).is_err());
        assert!(gravitational_spectrum(1.0, 1.0, 1.0, 0.0, g).is_err());
        assert!(gravitational_spectrum(1.0, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(potential_spectrum(1.0, 0.0, g).is_err());
        assert!((potential_spectrum(2f64.powi(4), 2.0, g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classical_modes_follow_cosines() {
        let modes = mode_basis(6.0, 5, 1.0).unwrap();
        let dt = 1e-4;
        let cfg = IntegratorConfig::for_horizon(dt, 1.0).unwrap().with_recording(0, 1000);
        let prof = VelocityInitProfile::new(VelocityFamily::TwoPointAboutB, 0.0).unwrap();
        let q0 = vec![0.3, -0.2, 0.5, 0.1, -0.4];
        let init = PositionSampler::Fixed(q0.clone());
        let ens = simulate_field_from(&modes, ProcessKind::PhaseSpace, &[100.0; 5], 0.0, &init, prof, &cfg, 2, 1).unwrap();
        let r = ens.n_records() - 1;
        let t = ens.times[r];
        let mut q = vec![0.0; 5];
        let mut v = vec![0.0; 5];
        for i in 0..5 {
            let w = modes.omega[i];
            let v0 = -w * q0[i];
            let want = q0[i] * (w * t).cos() + v0 / w * (w * t).sin();
            q[i] = ens.x_at(r, 0, i);
            v[i] = ens.v_at(r, 0, i).unwrap();
            assert!((q[i] - want).abs() < 5.0 * w * w * dt * t, "mode {i}: {} vs {want}", q[i]);
        }
        let v0: Vec<f64> = q0.iter().zip(&modes.omega).map(|(q, w)| -w * q).collect();
        let e0 = modes.energy(&q0, &v0);
        let e1 = modes.energy(&q, &v);
        let wmax = modes.omega[4];
        assert!((e1 / e0 - 1.0).abs() < 2.0 * wmax * wmax * dt * t, "{e0} {e1}");
    }

    #[test]
    fn reconstruction_round_trip() {
        let modes = mode_basis(4.0, 7, 0.0).unwrap();
        let q = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75, 1.5];
        let xs = modes.grid(64);
        let snap = reconstruct_field(&q, &[0.0; 7], &modes, &xs, 0.0).unwrap();
        let back = project(&snap.phi, &modes);
        for i in 0..7 {
            assert!((back[i] - q[i]).abs() < 1e-8);
        }
        let mut e = [0.0; 7];
        e[3] = 1.0;
        let snap = reconstruct_field(&e, &e, &modes, &xs, 0.0).unwrap();
        for (x, p) in xs.iter().zip(&snap.phi) {
            assert_eq!(*p, modes.u(3, *x));
        }
    }
}
