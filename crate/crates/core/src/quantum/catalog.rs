//! Closed-form states used as oracles.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::gaussian::{sqrtm_spd, GaussianState, Oscillator};
use super::{drift_from_log_gradient, madelung_split, nelson_drift, DriftField, MadelungPair, WavefunctionState};
use crate::error::{Error, Result};
use crate::grid::Grid1;

pub const CATALOG: [&str; 5] = [
    "free_gaussian",
    "ho_ground",
    "ho_coherent",
    "ho_superposition_01",
    "two_particle_gaussian",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateParams {
    pub mass: f64,
    pub omega: f64,
    pub hbar: f64,
    /// Initial width of `free_gaussian`.
    pub sigma0: f64,
    /// Initial displacement of `ho_coherent`.
    pub x0: f64,
    /// Initial momentum of `free_gaussian` and `ho_coherent`.
    pub p0: f64,
    /// Coupling of `two_particle_gaussian`: the state is the ground state of
    /// `m omega^2 (x1^2 + x2^2 + 2 kappa x1 x2) / 2`.
    pub kappa: f64,
}

impl Default for StateParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            omega: 1.0,
            hbar: 1.0,
            sigma0: 1.0,
            x0: 1.0,
            p0: 0.0,
            kappa: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AnalyticState {
    /// Gaussian in one or two coordinates evolving under decoupled oscillators.
    Gaussian {
        name: &'static str,
        init: GaussianState,
        osc: Vec<Oscillator>,
    },
    /// `(phi_0 + phi_1)/sqrt 2` of the harmonic oscillator.
    Superposition01 { mass: f64, omega: f64, hbar: f64 },
}

impl AnalyticState {
    pub fn new(name: &str, prm: &StateParams) -> Result<Self> {
        if !(prm.mass > 0.0) || !(prm.hbar > 0.0) || !(prm.omega > 0.0) {
            return Err(Error::invalid("mass, hbar and omega must be positive"));
        }
        let (m, w, h) = (prm.mass, prm.omega, prm.hbar);
        let ho = Oscillator { mass: m, omega: w };
        let ground_sd = (h / (2.0 * m * w)).sqrt();
        Ok(match name {
            "free_gaussian" => AnalyticState::Gaussian {
                name: "free_gaussian",
                init: GaussianState::packet(prm.sigma0, 0.0, prm.p0, m, h)?,
                osc: vec![Oscillator { mass: m, omega: 0.0 }],
            },
            "ho_ground" => AnalyticState::Gaussian {
                name: "ho_ground",
                init: GaussianState::packet(ground_sd, 0.0, 0.0, m, h)?,
                osc: vec![ho],
            },
            "ho_coherent" => AnalyticState::Gaussian {
                name: "ho_coherent",
                init: GaussianState::packet(ground_sd, prm.x0, prm.p0, m, h)?,
                osc: vec![ho],
            },
            "ho_superposition_01" => AnalyticState::Superposition01 {
                mass: m,
                omega: w,
                hbar: h,
            },
            "two_particle_gaussian" => {
                if !(prm.kappa.abs() < 1.0) {
                    return Err(Error::invalid("two_particle_gaussian needs |kappa| < 1"));
                }
                let om = sqrtm_spd(&coupling_matrix(prm.kappa))?;
                let z = om.map(|v| Complex64::new(0.0, m * w * v));
                AnalyticState::Gaussian {
                    name: "two_particle_gaussian",
                    init: GaussianState::new(z, vec![0.0; 2], vec![0.0; 2], vec![m; 2], h)?,
                    osc: vec![ho, ho],
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown catalog state '{other}' (known: {})",
                    CATALOG.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticState::Gaussian { name, .. } => name,
            AnalyticState::Superposition01 { .. } => "ho_superposition_01",
        }
    }

    pub fn n_particles(&self) -> usize {
        match self {
            AnalyticState::Gaussian { init, .. } => init.dim(),
            AnalyticState::Superposition01 { .. } => 1,
        }
    }

    pub fn masses(&self) -> Vec<f64> {
        match self {
            AnalyticState::Gaussian { init, .. } => init.masses.clone(),
            AnalyticState::Superposition01 { mass, .. } => vec![*mass],
        }
    }

    pub fn hbar(&self) -> f64 {
        match self {
            AnalyticState::Gaussian { init, .. } => init.hbar,
            AnalyticState::Superposition01 { hbar, .. } => *hbar,
        }
    }

    /// Oscillators governing the evolution (after any decoupling).
    pub fn oscillators(&self) -> Vec<Oscillator> {
        match self {
            AnalyticState::Gaussian { osc, .. } => osc.clone(),
            AnalyticState::Superposition01 { mass, omega, .. } => vec![Oscillator {
                mass: *mass,
                omega: *omega,
            }],
        }
    }

    pub fn gaussian_at(&self, t: f64) -> Option<GaussianState> {
        match self {
            AnalyticState::Gaussian { init, osc, .. } => init.evolve(osc, t).ok(),
            AnalyticState::Superposition01 { .. } => None,
        }
    }

    fn superposition_parts(mass: f64, omega: f64, hbar: f64, x: f64, t: f64) -> (Complex64, Complex64) {
        let a = mass * omega / hbar;
        let n0 = (a / std::f64::consts::PI).powf(0.25);
        let phi0 = n0 * (-a * x * x / 2.0).exp();
        let dphi0 = -a * x * phi0;
        let xi = a.sqrt() * x;
        let phi1 = std::f64::consts::SQRT_2 * xi * phi0;
        let dphi1 = std::f64::consts::SQRT_2 * (a.sqrt() * phi0 + xi * dphi0);
        let e0 = Complex64::from_polar(std::f64::consts::FRAC_1_SQRT_2, -0.5 * omega * t);
        let e1 = Complex64::from_polar(std::f64::consts::FRAC_1_SQRT_2, -1.5 * omega * t);
        (e0 * phi0 + e1 * phi1, e0 * dphi0 + e1 * dphi1)
    }

    pub fn psi(&self, x: &[f64], t: f64) -> Complex64 {
        match self {
            AnalyticState::Gaussian { .. } => self.gaussian_at(t).map(|g| g.psi(x)).unwrap_or_default(),
            AnalyticState::Superposition01 { mass, omega, hbar } => {
                Self::superposition_parts(*mass, *omega, *hbar, x[0], t).0
            }
        }
    }

    pub fn density(&self, x: &[f64], t: f64) -> f64 {
        self.psi(x, t).norm_sqr()
    }

    /// Nelson drift at (x, t). Non-finite at exact nodes; callers clamp.
    pub fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            AnalyticState::Gaussian { init, osc, .. } if init.dim() == 1 => {
                out[0] = drift_1d(init, osc[0], x[0], t);
            }
            AnalyticState::Gaussian { .. } => match self.gaussian_at(t) {
                Some(g) => g.drift(x, out),
                None => out.iter_mut().for_each(|b| *b = f64::NAN),
            },
            AnalyticState::Superposition01 { mass, omega, hbar } => {
                let (psi, dpsi) = Self::superposition_parts(*mass, *omega, *hbar, x[0], t);
                out[0] = drift_from_log_gradient(dpsi / psi, *mass, *hbar);
            }
        }
    }

    /// Potential energy for `t >= 0`.
    pub fn potential(&self, x: &[f64]) -> f64 {
        self.oscillators()
            .iter()
            .zip(x)
            .map(|(o, x)| 0.5 * o.mass * o.omega * o.omega * x * x)
            .sum()
    }

    /// `-(1/m_i) dU/dx_i` for `t >= 0`.
    pub fn acceleration(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in self.oscillators().iter().enumerate() {
            out[i] = -o.omega * o.omega * x[i];
        }
    }

    /// Per-coordinate mean and standard deviation of the density at `t`,
    /// used to size grids.
    pub fn extent(&self, t: f64) -> Vec<(f64, f64)> {
        match self.gaussian_at(t) {
            Some(g) => {
                let c = g.covariance();
                (0..g.dim()).map(|i| (g.q[i], c[(i, i)].sqrt())).collect()
            }
            None => match self {
                AnalyticState::Superposition01 { mass, omega, hbar, .. } => {
                    vec![(0.0, (hbar / (mass * omega)).sqrt())]
                }
                _ => unreachable!(),
            },
        }
    }

    /// Samples the state on a 1-D grid (one particle) or a 2-D product grid.
    pub fn wavefunction(&self, axes: &[Grid1], t: f64) -> Result<WavefunctionState> {
        if axes.len() != self.n_particles() {
            return Err(Error::invalid("grid dimension does not match the state"));
        }
        let psi: Vec<Complex64> = match axes.len() {
            1 => axes[0].points().iter().map(|&x| self.psi(&[x], t)).collect(),
            _ => {
                let g = self.gaussian_at(t).ok_or_else(|| Error::invalid("no closed form"))?;
                let mut v = Vec::with_capacity(axes[0].n * axes[1].n);
                for i in 0..axes[0].n {
                    for j in 0..axes[1].n {
                        v.push(g.psi(&[axes[0].point(i), axes[1].point(j)]));
                    }
                }
                v
            }
        };
        WavefunctionState::new(axes.to_vec(), psi, self.masses(), self.hbar(), t)
    }
}

/// Scalar version of `GaussianState::evolve` followed by `drift`; this runs
/// once per integrator step.
fn drift_1d(g: &GaussianState, o: Oscillator, x: f64, t: f64) -> f64 {
    let (c, s1, s2) = if o.omega == 0.0 {
        (1.0, t / o.mass, 0.0)
    } else {
        let (s, c) = (o.omega * t).sin_cos();
        (c, s / (o.mass * o.omega), o.mass * o.omega * s)
    };
    let z0 = g.z[(0, 0)];
    let z = (z0 * c - s2) / (z0 * s1 + c);
    let q = c * g.q[0] + s1 * g.p[0];
    let p = c * g.p[0] - s2 * g.q[0];
    ((z.re - z.im) * (x - q) + p) / g.masses[0]
}

/// `[[1, kappa], [kappa, 1]]`.
pub fn coupling_matrix(kappa: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, kappa, kappa, 1.0])
}

/// Closed-form state, Madelung pair and drift of a one-particle catalog
/// entry at time `t`, sampled on `grid`.
pub fn analytic_state(
    name: &str,
    prm: &StateParams,
    t: f64,
    grid: Grid1,
) -> Result<(WavefunctionState, MadelungPair, DriftField)> {
    let st = AnalyticState::new(name, prm)?;
    if st.n_particles() != 1 {
        return Err(Error::invalid(format!("{name} is a two-particle state; use AnalyticState")));
    }
    let wf = st.wavefunction(&[grid], t)?;
    let pair = madelung_split(&wf)?;
    let mut drift = nelson_drift(&pair, prm.mass, prm.hbar)?;
    // exact values on the valid mask
    for i in 0..grid.n {
        if drift.valid_mask[i] {
            let mut b = [0.0];
            st.drift(&[grid.point(i)], t, &mut b);
            drift.b.values[i] = b[0];
        }
    }
    Ok((wf, pair, drift))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let e = AnalyticState::new("ho_third", &StateParams::default()).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn superposition_drift_matches_grid_drift() {
        let st = AnalyticState::new("ho_superposition_01", &StateParams::default()).unwrap();
        let g = Grid1::periodic(-10.0, 20.0, 2048).unwrap();
        let wf = st.wavefunction(&[g], 0.4).unwrap();
        let pair = madelung_split(&wf).unwrap();
        let b = nelson_drift(&pair, 1.0, 1.0).unwrap();
        for i in 0..g.n {
            let x = g.point(i);
            if x.abs() < 3.0 {
                let mut e = [0.0];
                st.drift(&[x], 0.4, &mut e);
                assert!((b.b.values[i] - e[0]).abs() < 1e-4 * (1.0 + e[0].abs()), "x={x}");
            }
        }
        assert!((pair.rho.integral() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scalar_drift_matches_matrix_evolution() {
        let prm = StateParams {
            p0: 0.7,
            ..StateParams::default()
        };
        for name in ["free_gaussian", "ho_coherent"] {
            let st = AnalyticState::new(name, &prm).unwrap();
            for &t in &[0.0, 0.3, 2.9] {
                let g = st.gaussian_at(t).unwrap();
                let mut a = [0.0];
                let mut b = [0.0];
                st.drift(&[0.4], t, &mut a);
                g.drift(&[0.4], &mut b);
                assert!((a[0] - b[0]).abs() < 1e-12, "{name} t={t}");
            }
        }
    }

    #[test]
    fn ground_state_is_time_independent() {
        let p = StateParams::default();
        let g = Grid1::periodic(-8.0, 16.0, 256).unwrap();
        let (_, a, b) = analytic_state("ho_ground", &p, 0.0, g).unwrap();
        let (_, c, _) = analytic_state("ho_ground", &p, 3.1, g).unwrap();
        for i in 0..g.n {
            assert!((a.rho.values[i] - c.rho.values[i]).abs() < 1e-12);
            if g.point(i).abs() < 4.0 {
                assert!((b.b.values[i] + g.point(i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_particle_marginal_variance() {
        let st = AnalyticState::new("two_particle_gaussian", &StateParams::default()).unwrap();
        let c = st.gaussian_at(0.0).unwrap().covariance();
        // inverse of 2 sqrt(K)
        let k = coupling_matrix(0.8);
        let expect = (sqrtm_spd(&k).unwrap() * 2.0).try_inverse().unwrap();
        assert!((c - expect).norm() < 1e-12);
    }
}
