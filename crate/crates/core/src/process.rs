//! Simulators for Nelson diffusions, colored-noise smoothing and the
//! (multi-particle) phase-space process.
//!
//! Every particle of trajectory `i` owns two noise lanes of stream `i`: lane
//! `2p` for its initial condition and lane `2p + 1` for its driving noise. A
//! particle therefore sees the same numbers whether it is simulated alone or
//! alongside others, which makes multi-particle and field-mode runs reduce
//! bit-exactly to single-particle ones.

use serde::{Deserialize, Serialize};

use crate::ensemble::{run_ensemble, TrajStatus, TrajectoryEnsemble, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::grid::{Grid1, ScalarFieldGrid};
use crate::quantum::{GaussianState, B_MAX};
use crate::rng::NoiseStream;
use crate::sde::{IntegratorConfig, OuStepper};

/// Runs with more escaped trajectories than this fraction fail.
pub const ESCAPE_LIMIT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    /// `dx = b dt + eps dW`.
    NelsonWhite,
    /// `dx = b dt + eps A dt`.
    ColoredSmoothing,
    /// `dx = v dt + eps A dt, dv = a(x) dt`.
    PhaseSpace,
    /// Same as `PhaseSpace` with several particles.
    PhaseSpaceMulti,
}

impl ProcessKind {
    pub fn is_colored(self) -> bool {
        !matches!(self, ProcessKind::NelsonWhite)
    }

    pub fn is_phase_space(self) -> bool {
        matches!(self, ProcessKind::PhaseSpace | ProcessKind::PhaseSpaceMulti)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProcessKind::NelsonWhite => "nelson_white",
            ProcessKind::ColoredSmoothing => "colored_smoothing",
            ProcessKind::PhaseSpace => "phase_space",
            ProcessKind::PhaseSpaceMulti => "phase_space_multi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityFamily {
    GaussianAboutB,
    TwoPointAboutB,
}

/// Conditional law of the initial velocity given the position: mean `b0(x)`
/// and spread `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityInitProfile {
    pub family: VelocityFamily,
    pub spread: f64,
}

impl VelocityInitProfile {
    /// `spread == 0` is the deterministic profile `v = b0(x)`.
    pub fn new(family: VelocityFamily, spread: f64) -> Result<Self> {
        if !(spread >= 0.0) || !spread.is_finite() {
            return Err(Error::invalid(format!("velocity spread must be >= 0, got {spread}")));
        }
        Ok(Self { family, spread })
    }

    #[inline]
    pub fn sample(&self, b0: f64, stream: &mut NoiseStream) -> f64 {
        match self.family {
            VelocityFamily::GaussianAboutB => b0 + self.spread * stream.normal(),
            VelocityFamily::TwoPointAboutB => b0 + self.spread * stream.sign(),
        }
    }
}

/// Initial positions of all particles.
#[derive(Clone, Debug)]
pub enum PositionSampler {
    /// `mean + L z` with lower-triangular `L` and independent normals `z_p`
    /// drawn from each particle's own lane.
    Gaussian { mean: Vec<f64>, factor: Vec<Vec<f64>> },
    /// One particle, inverse CDF of a gridded density.
    Grid { grid: Grid1, cdf: Vec<f64> },
    /// Independent uniform positions on `[lo, hi]`.
    Uniform { lo: f64, hi: f64, n: usize },
    Fixed(Vec<f64>),
}

impl PositionSampler {
    pub fn gaussian(g: &GaussianState) -> Self {
        let l = g.sampling_factor();
        let n = g.dim();
        PositionSampler::Gaussian {
            mean: g.q.iter().copied().collect(),
            factor: (0..n).map(|i| (0..=i).map(|j| l[(i, j)]).collect()).collect(),
        }
    }

    /// Independent normal coordinates with the given standard deviations.
    pub fn independent_normal(mean: &[f64], sd: &[f64]) -> Self {
        PositionSampler::Gaussian {
            mean: mean.to_vec(),
            factor: (0..sd.len())
                .map(|i| {
                    let mut row = vec![0.0; i + 1];
                    row[i] = sd[i];
                    row
                })
                .collect(),
        }
    }

    pub fn from_density(rho: &ScalarFieldGrid) -> Result<Self> {
        let g = rho.grid;
        let mut cdf = vec![0.0; g.n];
        for i in 1..g.n {
            let a = if rho.mask[i - 1] { rho.values[i - 1].max(0.0) } else { 0.0 };
            let b = if rho.mask[i] { rho.values[i].max(0.0) } else { 0.0 };
            cdf[i] = cdf[i - 1] + 0.5 * (a + b) * g.dx;
        }
        let total = cdf[g.n - 1];
        if !(total > 0.0) {
            return Err(Error::invalid("density has no mass to sample from"));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(PositionSampler::Grid { grid: g, cdf })
    }

    pub fn dim(&self) -> usize {
        match self {
            PositionSampler::Gaussian { mean, .. } => mean.len(),
            PositionSampler::Grid { .. } => 1,
            PositionSampler::Uniform { n, .. } => *n,
            PositionSampler::Fixed(x) => x.len(),
        }
    }

    pub fn sample(&self, lanes: &mut [NoiseStream], out: &mut [f64]) {
        match self {
            PositionSampler::Gaussian { mean, factor } => {
                let z: Vec<f64> = lanes.iter_mut().map(|s| s.normal()).collect();
                for (i, row) in factor.iter().enumerate() {
                    let mut x = mean[i];
                    for (j, l) in row.iter().enumerate() {
                        if *l != 0.0 {
                            x += l * z[j];
                        }
                    }
                    out[i] = x;
                }
            }
            PositionSampler::Grid { grid, cdf } => {
                let u = lanes[0].uniform();
                let k = cdf.partition_point(|&c| c <= u).clamp(1, grid.n - 1);
                let (c0, c1) = (cdf[k - 1], cdf[k]);
                let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
                out[0] = grid.point(k - 1) + w * grid.dx;
            }
            PositionSampler::Uniform { lo, hi, .. } => {
                for (x, s) in out.iter_mut().zip(lanes.iter_mut()) {
                    *x = lo + (hi - lo) * s.uniform();
                }
            }
            PositionSampler::Fixed(x) => out.copy_from_slice(x),
        }
    }
}

/// A vector field `f(x, t)` over all particle coordinates.
pub type VectorField<'a> = dyn Fn(&[f64], f64, &mut [f64]) + Sync + 'a;

/// Initial velocities for the phase-space process.
pub struct VelocityInit<'a> {
    pub b0: &'a VectorField<'a>,
    pub profile: VelocityInitProfile,
}

/// Everything needed to simulate one process family.
pub struct ProcessSpec<'a> {
    pub kind: ProcessKind,
    /// Noise amplitude per particle, `sqrt(hbar / m_i)`.
    pub eps: Vec<f64>,
    /// Colored-noise parameter per particle (ignored for white noise).
    pub betas: Vec<f64>,
    /// Drift `b` for first-order kinds, acceleration `a` for phase space.
    pub field: &'a VectorField<'a>,
    pub init: &'a PositionSampler,
    pub velocity: Option<VelocityInit<'a>>,
    /// Allowed position range per particle; leaving it flags the trajectory.
    pub support: Vec<(f64, f64)>,
}

impl<'a> ProcessSpec<'a> {
    pub fn n_particles(&self) -> usize {
        self.eps.len()
    }

    pub fn validate(&self, cfg: &IntegratorConfig) -> Result<()> {
        cfg.validate()?;
        let n = self.eps.len();
        if n == 0 {
            return Err(Error::invalid("process needs at least one particle"));
        }
        if self.init.dim() != n || self.support.len() != n {
            return Err(Error::invalid("initial sampler / support size does not match particle count"));
        }
        if self.eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::invalid("noise amplitudes must be >= 0"));
        }
        if self.kind.is_colored() {
            if self.betas.len() != n {
                return Err(Error::invalid("one beta per particle is required"));
            }
            for &b in &self.betas {
                cfg.check_beta(b)?;
            }
        }
        if self.kind.is_phase_space() && self.velocity.is_none() {
            return Err(Error::invalid("phase-space runs need a velocity initialization"));
        }
        if self.kind == ProcessKind::PhaseSpace && n != 1 {
            return Err(Error::invalid("phase_space is single-particle; use phase_space_multi"));
        }
        Ok(())
    }
}

/// Clamps a drift into `[-B_MAX, B_MAX]`, keeping NaN (which flags the path).
#[inline]
pub fn clamp_drift(b: f64) -> f64 {
    if b.is_nan() {
        b
    } else {
        b.clamp(-B_MAX, B_MAX)
    }
}

/// Interaction switch-off profile: 1 before `t = 0`, then 0, or a linear
/// ramp over `smoothing` when given.
pub fn switch_off(t: f64, smoothing: Option<f64>) -> f64 {
    match smoothing {
        _ if t < 0.0 => 1.0,
        Some(s) if s > 0.0 && t < s => 1.0 - t / s,
        _ => 0.0,
    }
}

fn simulate_one(spec: &ProcessSpec, cfg: &IntegratorConfig, stream: NoiseStream) -> Result<TrajectoryRecord> {
    let n = spec.n_particles();
    let kind = spec.kind;
    let mut init_lanes: Vec<NoiseStream> = (0..n).map(|p| stream.lane(2 * p as u64)).collect();
    let mut noise_lanes: Vec<NoiseStream> = (0..n).map(|p| stream.lane(2 * p as u64 + 1)).collect();

    let mut x = vec![0.0; n];
    spec.init.sample(&mut init_lanes, &mut x);

    let mut v = vec![0.0; n];
    if let Some(vi) = spec.velocity.as_ref().filter(|_| kind.is_phase_space()) {
        let mut b0 = vec![0.0; n];
        (vi.b0)(&x, cfg.t0, &mut b0);
        for p in 0..n {
            v[p] = vi.profile.sample(b0[p], &mut init_lanes[p]);
        }
    }

    let steppers: Vec<OuStepper> = if kind.is_colored() {
        spec.betas
            .iter()
            .map(|&b| OuStepper::new(b, cfg.dt, cfg.ou_scheme))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut a: Vec<f64> = steppers
        .iter()
        .zip(init_lanes.iter_mut())
        .map(|(st, s)| st.stationary_sd() * s.normal())
        .collect();

    let n_rec = cfg.recorded_steps().len();
    let mut rec_x = Vec::with_capacity(n_rec * n);
    let mut rec_v = kind.is_phase_space().then(|| Vec::with_capacity(n_rec * n));
    let mut rec_a = kind.is_colored().then(|| Vec::with_capacity(n_rec * n));
    let record = |x: &[f64], v: &[f64], a: &[f64], rx: &mut Vec<f64>, rv: &mut Option<Vec<f64>>, ra: &mut Option<Vec<f64>>| {
        rx.extend_from_slice(x);
        if let Some(rv) = rv.as_mut() {
            rv.extend_from_slice(v);
        }
        if let Some(ra) = ra.as_mut() {
            ra.extend_from_slice(a);
        }
    };

    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let mut f = vec![0.0; n];
    let mut status = TrajStatus::Valid;
    for k in 0..cfg.n_steps {
        if cfg.is_recorded(k) {
            record(&x, &v, &a, &mut rec_x, &mut rec_v, &mut rec_a);
        }
        let t = cfg.time_of(k);
        (spec.field)(&x, t, &mut f);
        if f.iter().any(|b| !b.is_finite()) {
            status = TrajStatus::Invalid { step: k };
            break;
        }
        for p in 0..n {
            let z = noise_lanes[p].normal();
            let e = spec.eps[p];
            match kind {
                ProcessKind::NelsonWhite => x[p] += f[p] * dt + e * sqdt * z,
                ProcessKind::ColoredSmoothing => {
                    x[p] += (f[p] + e * a[p]) * dt;
                    a[p] = steppers[p].step(a[p], z);
                }
                ProcessKind::PhaseSpace | ProcessKind::PhaseSpaceMulti => {
                    x[p] += (v[p] + e * a[p]) * dt;
                    v[p] += f[p] * dt;
                    a[p] = steppers[p].step(a[p], z);
                }
            }
        }
        if x.iter().any(|x| !x.is_finite()) {
            status = TrajStatus::Invalid { step: k + 1 };
            break;
        }
        if x.iter().zip(&spec.support).any(|(x, (lo, hi))| x < lo || x > hi) {
            status = TrajStatus::Escaped { step: k + 1 };
            break;
        }
    }
    if status.is_valid() {
        if cfg.is_recorded(cfg.n_steps) {
            record(&x, &v, &a, &mut rec_x, &mut rec_v, &mut rec_a);
        }
    } else {
        rec_x.resize(n_rec * n, f64::NAN);
        if let Some(rv) = rec_v.as_mut() {
            rv.resize(n_rec * n, f64::NAN);
        }
        if let Some(ra) = rec_a.as_mut() {
            ra.resize(n_rec * n, f64::NAN);
        }
    }
    Ok(TrajectoryRecord {
        x: rec_x,
        v: rec_v,
        noise: rec_a,
        status,
    })
}

/// Simulates `n_traj` trajectories of `spec`. Fails when more than 0.1 % of
/// them escape the support or go non-finite.
pub fn simulate(spec: &ProcessSpec, cfg: &IntegratorConfig, n_traj: usize, seed: u64) -> Result<TrajectoryEnsemble> {
    let ens = simulate_unchecked(spec, cfg, n_traj, seed)?;
    ens.check_escapes(ESCAPE_LIMIT)?;
    Ok(ens)
}

/// As [`simulate`] without the escape limit.
pub fn simulate_unchecked(
    spec: &ProcessSpec,
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    spec.validate(cfg)?;
    let times: Vec<f64> = cfg.recorded_steps().into_iter().map(|k| cfg.time_of(k)).collect();
    run_ensemble(n_traj, seed, times, spec.n_particles(), |_, stream| {
        simulate_one(spec, cfg, stream)
    })
}

fn one_particle<'a>(
    kind: ProcessKind,
    eps: f64,
    beta: Option<f64>,
    field: &'a VectorField<'a>,
    init: &'a PositionSampler,
    velocity: Option<VelocityInit<'a>>,
    support: (f64, f64),
) -> ProcessSpec<'a> {
    ProcessSpec {
        kind,
        eps: vec![eps],
        betas: beta.into_iter().collect(),
        field,
        init,
        velocity,
        support: vec![support],
    }
}

/// `dx = b(x, t) dt + eps dW`.
pub fn simulate_nelson(
    drift: &VectorField,
    rho0: &PositionSampler,
    eps: f64,
    support: (f64, f64),
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let spec = one_particle(ProcessKind::NelsonWhite, eps, None, drift, rho0, None, support);
    simulate(&spec, cfg, n_traj, seed)
}

/// `dx = b(x, t) dt + eps A dt` with `A` started stationary.
#[allow(clippy::too_many_arguments)]
pub fn simulate_colored_smoothing(
    drift: &VectorField,
    rho0: &PositionSampler,
    eps: f64,
    beta: f64,
    support: (f64, f64),
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let spec = one_particle(ProcessKind::ColoredSmoothing, eps, Some(beta), drift, rho0, None, support);
    simulate(&spec, cfg, n_traj, seed)
}

/// Single-particle phase-space process.
#[allow(clippy::too_many_arguments)]
pub fn simulate_phase_space(
    accel: &VectorField,
    rho0: &PositionSampler,
    init: VelocityInit,
    eps: f64,
    beta: f64,
    support: (f64, f64),
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let spec = one_particle(ProcessKind::PhaseSpace, eps, Some(beta), accel, rho0, Some(init), support);
    simulate(&spec, cfg, n_traj, seed)
}

/// Multi-particle phase-space process with per-particle noise streams.
#[allow(clippy::too_many_arguments)]
pub fn simulate_phase_space_multi(
    accels: &VectorField,
    rho0: &PositionSampler,
    init: VelocityInit,
    eps: &[f64],
    betas: &[f64],
    support: &[(f64, f64)],
    cfg: &IntegratorConfig,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let spec = ProcessSpec {
        kind: ProcessKind::PhaseSpaceMulti,
        eps: eps.to_vec(),
        betas: betas.to_vec(),
        field: accels,
        init: rho0,
        velocity: Some(init),
        support: support.to_vec(),
    };
    simulate(&spec, cfg, n_traj, seed)
}

/// Draws `n` initial phase points `(x, v)` of a single particle: `x ~ rho0`
/// and `v` from the profile about `b0(x)`, with the same lanes the simulators
/// use.
pub fn construct_initial_phase_density(
    rho0: &PositionSampler,
    b0: &VectorField,
    profile: VelocityInitProfile,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if rho0.dim() != 1 {
        return Err(Error::invalid("construct_initial_phase_density samples one particle"));
    }
    VelocityInitProfile::new(profile.family, profile.spread)?;
    Ok((0..n)
        .map(|i| {
            let stream = NoiseStream::new(seed, i as u64);
            let mut lane = [stream.lane(0)];
            let mut x = [0.0];
            rho0.sample(&mut lane, &mut x);
            let mut b = [0.0];
            b0(&x, 0.0, &mut b);
            (x[0], profile.sample(b[0], &mut lane[0]))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    fn ho_drift(x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = -x[0];
    }

    fn ground() -> PositionSampler {
        PositionSampler::independent_normal(&[0.0], &[0.5f64.sqrt()])
    }

    #[test]
    fn stationary_ground_state_variance() {
        let cfg = IntegratorConfig::new(0.01, 500).unwrap().with_recording(500, 1);
        let ens = simulate_nelson(&ho_drift, &ground(), 1.0, (-20.0, 20.0), &cfg, 20_000, 7).unwrap();
        let xs = ens.positions(ens.n_records() - 1, 0);
        let v = stats::variance(&xs);
        assert!((v - 0.5).abs() < 0.03, "var {v}");
    }

    #[test]
    fn zero_noise_zero_drift_is_constant() {
        let zero = |_: &[f64], _: f64, o: &mut [f64]| o[0] = 0.0;
        let cfg = IntegratorConfig::new(0.1, 10).unwrap();
        let init = PositionSampler::Fixed(vec![3.0]);
        let ens = simulate_nelson(&zero, &init, 0.0, (-9.0, 9.0), &cfg, 3, 1).unwrap();
        assert!(ens.x.iter().all(|&x| x == 3.0));
    }

    #[test]
    fn classical_flow_without_noise() {
        let cfg = IntegratorConfig::new(1e-4, 20_000).unwrap().with_recording(0, 20_000);
        let init = PositionSampler::Fixed(vec![1.0]);
        let vi = VelocityInit {
            b0: &|_: &[f64], _: f64, o: &mut [f64]| o[0] = 0.5,
            profile: VelocityInitProfile::new(VelocityFamily::GaussianAboutB, 0.0).unwrap(),
        };
        let ens = simulate_phase_space(&ho_drift, &init, vi, 0.0, 10.0, (-9.0, 9.0), &cfg, 1, 1).unwrap();
        let (x, v) = (ens.x_at(1, 0, 0), ens.v_at(1, 0, 0).unwrap());
        let t: f64 = 2.0;
        assert!((x - (t.cos() + 0.5 * t.sin())).abs() < 1e-3);
        let e0 = 0.5 * (0.25 + 1.0);
        let e1 = 0.5 * (v * v + x * x);
        assert!((e1 - e0).abs() < 20.0 * 1e-4 * t * e0, "energy drift {}", e1 - e0);
    }

    #[test]
    fn multi_particle_reduces_to_single() {
        let cfg = IntegratorConfig::new(0.001, 300).unwrap().with_recording(0, 50);
        let prof = VelocityInitProfile::new(VelocityFamily::GaussianAboutB, 0.3).unwrap();
        let b0 = |x: &[f64], _: f64, o: &mut [f64]| {
            for i in 0..x.len() {
                o[i] = -x[i];
            }
        };
        let single = simulate_phase_space(
            &ho_drift,
            &ground(),
            VelocityInit { b0: &b0, profile: prof },
            1.0,
            100.0,
            (-20.0, 20.0),
            &cfg,
            50,
            3,
        )
        .unwrap();
        let acc2 = |x: &[f64], _: f64, o: &mut [f64]| {
            o[0] = -x[0];
            o[1] = -4.0 * x[1];
        };
        let two = PositionSampler::independent_normal(&[0.0, 0.0], &[0.5f64.sqrt(), 0.5]);
        let multi = simulate_phase_space_multi(
            &acc2,
            &two,
            VelocityInit { b0: &b0, profile: prof },
            &[1.0, 1.0],
            &[100.0, 100.0],
            &[(-20.0, 20.0); 2],
            &cfg,
            50,
            3,
        )
        .unwrap();
        let p0 = multi.particle(0);
        assert_eq!(p0.x, single.x);
        assert_eq!(p0.v, single.v);
        assert_eq!(p0.noise, single.noise);
    }

    #[test]
    fn velocity_profile_contract() {
        let b0 = |x: &[f64], _: f64, o: &mut [f64]| o[0] = -x[0];
        let prof = VelocityInitProfile::new(VelocityFamily::TwoPointAboutB, 0.4).unwrap();
        let pts = construct_initial_phase_density(&ground(), &b0, prof, 2000, 5).unwrap();
        for (x, v) in &pts {
            let d = (v + x).abs();
            assert!((d - 0.4).abs() < 1e-12);
        }
        let det = VelocityInitProfile::new(VelocityFamily::GaussianAboutB, 0.0).unwrap();
        let pts = construct_initial_phase_density(&ground(), &b0, det, 100, 5).unwrap();
        assert!(pts.iter().all(|(x, v)| *v == -x));
        assert!(VelocityInitProfile::new(VelocityFamily::GaussianAboutB, -0.1).is_err());
    }

    #[test]
    fn escapes_are_flagged_and_limited() {
        let zero = |_: &[f64], _: f64, o: &mut [f64]| o[0] = 0.0;
        let cfg = IntegratorConfig::new(0.01, 100).unwrap();
        let init = PositionSampler::Fixed(vec![0.0]);
        let err = simulate_nelson(&zero, &init, 1.0, (-0.5, 0.5), &cfg, 200, 1).unwrap_err();
        assert!(matches!(err, Error::Escapes { .. }));
        let spec = one_particle(ProcessKind::NelsonWhite, 1.0, None, &zero, &init, None, (-0.5, 0.5));
        let ens = simulate_unchecked(&spec, &cfg, 200, 1).unwrap();
        assert!(ens.n_escaped() > 0);
        assert!(ens.positions(ens.n_records() - 1, 0).iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn grid_sampler_reproduces_density() {
        let g = Grid1::linspace(-6.0, 6.0, 601).unwrap();
        let rho = ScalarFieldGrid::from_fn(g, |x| (-x * x / 2.0).exp()).normalized().unwrap();
        let s = PositionSampler::from_density(&rho).unwrap();
        let xs: Vec<f64> = (0..20_000)
            .map(|i| {
                let mut out = [0.0];
                s.sample(&mut [NoiseStream::new(9, i)], &mut out);
                out[0]
            })
            .collect();
        assert!((stats::variance(&xs) - 1.0).abs() < 0.04);
    }
}
