//! Split-step Fourier evolution on periodic 1-D and 2-D grids.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::WavefunctionState;
use crate::error::{Error, Result};

/// Largest tolerated norm drift per unit time.
pub const MAX_NORM_DRIFT: f64 = 1e-6;

fn wavenumbers(n: usize, dx: f64) -> Vec<f64> {
    let l = n as f64 * dx;
    (0..n)
        .map(|j| {
            let j = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            std::f64::consts::TAU * j / l
        })
        .collect()
}

/// Strang splitting `e^{-iU dt/2} e^{-iT dt} e^{-iU dt/2}` for a fixed
/// potential sampled on the state's grid.
pub struct SplitStep {
    dims: Vec<usize>,
    dt: f64,
    half_potential: Vec<Complex64>,
    kinetic: Vec<Complex64>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl SplitStep {
    pub fn new(state: &WavefunctionState, potential: &[f64], dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("split-step dt must be positive"));
        }
        if potential.len() != state.psi.len() {
            return Err(Error::invalid("potential must be sampled on the state grid"));
        }
        let h = state.hbar;
        let dims: Vec<usize> = state.axes.iter().map(|g| g.n).collect();
        let half_potential = potential
            .iter()
            .map(|&u| Complex64::from_polar(1.0, -u * dt / (2.0 * h)))
            .collect();
        let ks: Vec<Vec<f64>> = state.axes.iter().map(|g| wavenumbers(g.n, g.dx)).collect();
        let kinetic = match dims.len() {
            1 => ks[0]
                .iter()
                .map(|k| Complex64::from_polar(1.0, -h * k * k * dt / (2.0 * state.masses[0])))
                .collect(),
            _ => {
                let mut v = Vec::with_capacity(dims[0] * dims[1]);
                for kx in &ks[0] {
                    for ky in &ks[1] {
                        let e = h * (kx * kx / state.masses[0] + ky * ky / state.masses[1]) / 2.0;
                        v.push(Complex64::from_polar(1.0, -e * dt));
                    }
                }
                v
            }
        };
        let mut planner = FftPlanner::new();
        let fwd = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Ok(Self {
            dims,
            dt,
            half_potential,
            kinetic,
            fwd,
            inv,
        })
    }

    fn transform(&self, psi: &mut [Complex64], forward: bool) {
        let plans = if forward { &self.fwd } else { &self.inv };
        match self.dims.len() {
            1 => plans[0].process(psi),
            _ => {
                let (nx, ny) = (self.dims[0], self.dims[1]);
                plans[1].process(psi);
                let mut col = vec![Complex64::default(); nx];
                for j in 0..ny {
                    for i in 0..nx {
                        col[i] = psi[i * ny + j];
                    }
                    plans[0].process(&mut col);
                    for i in 0..nx {
                        psi[i * ny + j] = col[i];
                    }
                }
            }
        }
    }

    pub fn step(&self, psi: &mut [Complex64]) {
        let n = psi.len() as f64;
        for (z, u) in psi.iter_mut().zip(&self.half_potential) {
            *z *= u;
        }
        self.transform(psi, true);
        for (z, k) in psi.iter_mut().zip(&self.kinetic) {
            *z *= k / n;
        }
        self.transform(psi, false);
        for (z, u) in psi.iter_mut().zip(&self.half_potential) {
            *z *= u;
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// Evolves `state` under `potential` up to `state.t + horizon`, returning
/// the state every `save_every` steps (always including both ends).
///
/// The step is shortened so that it divides the horizon exactly.
pub fn schrodinger_evolve(
    state: &WavefunctionState,
    potential: &[f64],
    dt: f64,
    horizon: f64,
    save_every: usize,
) -> Result<Vec<WavefunctionState>> {
    if !(horizon >= 0.0) {
        return Err(Error::invalid("horizon must be non-negative"));
    }
    let n_steps = if horizon == 0.0 { 0 } else { (horizon / dt).ceil() as usize };
    let dt_eff = if n_steps == 0 { dt } else { horizon / n_steps as f64 };
    let stepper = SplitStep::new(state, potential, dt_eff)?;
    let norm0 = state.norm();
    let mut cur = state.clone();
    let mut out = vec![cur.clone()];
    let stride = save_every.max(1);
    for k in 1..=n_steps {
        stepper.step(&mut cur.psi);
        cur.t = state.t + k as f64 * dt_eff;
        if k % stride == 0 || k == n_steps {
            out.push(cur.clone());
        }
    }
    if horizon > 0.0 {
        let drift = (cur.norm() - norm0).abs() / horizon;
        if drift > MAX_NORM_DRIFT {
            return Err(Error::NormDrift {
                drift,
                limit: MAX_NORM_DRIFT,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{AnalyticState, StateParams};
    use super::*;
    use crate::grid::Grid1;

    fn ho_potential(g: &Grid1) -> Vec<f64> {
        g.points().iter().map(|x| 0.5 * x * x).collect()
    }

    #[test]
    fn ground_state_survives_a_period() {
        let g = Grid1::periodic(-10.0, 20.0, 256).unwrap();
        let st = AnalyticState::new("ho_ground", &StateParams::default()).unwrap();
        let wf = st.wavefunction(&[g], 0.0).unwrap();
        let out = schrodinger_evolve(&wf, &ho_potential(&g), 0.005, std::f64::consts::TAU, 10_000).unwrap();
        let last = out.last().unwrap();
        assert!(last.fidelity(&wf) > 1.0 - 1e-6);
    }

    #[test]
    fn free_packet_spreads() {
        let g = Grid1::periodic(-30.0, 60.0, 1024).unwrap();
        let st = AnalyticState::new("free_gaussian", &StateParams::default()).unwrap();
        let wf = st.wavefunction(&[g], 0.0).unwrap();
        let out = schrodinger_evolve(&wf, &vec![0.0; g.n], 0.01, 3.0, 100).unwrap();
        for s in &out {
            let var = s.expect(|x| x[0] * x[0]) - s.expect(|x| x[0]).powi(2);
            let t = s.t;
            let expect = 1.0 + (t / 2.0).powi(2);
            assert!((var / expect - 1.0).abs() < 1e-3, "t={t} var={var}");
        }
    }

    #[test]
    fn single_fourier_mode_rotates() {
        let g = Grid1::periodic(0.0, 10.0, 64).unwrap();
        let k = std::f64::consts::TAU * 3.0 / 10.0;
        let psi: Vec<Complex64> = g.points().iter().map(|&x| Complex64::from_polar(0.1f64.sqrt(), k * x)).collect();
        let wf = WavefunctionState::new(vec![g], psi, vec![1.0], 1.0, 0.0).unwrap();
        let out = schrodinger_evolve(&wf, &vec![0.0; g.n], 0.1, 1.0, 1).unwrap();
        let phase = Complex64::from_polar(1.0, -k * k / 2.0);
        for (a, b) in out.last().unwrap().psi.iter().zip(&wf.psi) {
            assert!((a - b * phase).norm() < 1e-10);
        }
    }

    #[test]
    fn coherent_state_matches_closed_form() {
        let g = Grid1::periodic(-12.0, 24.0, 512).unwrap();
        let st = AnalyticState::new("ho_coherent", &StateParams::default()).unwrap();
        let wf = st.wavefunction(&[g], 0.0).unwrap();
        let out = schrodinger_evolve(&wf, &ho_potential(&g), 0.002, 2.0, 100).unwrap();
        for s in &out {
            let exact = st.wavefunction(&[g], s.t).unwrap();
            let l1: f64 = s
                .density_values()
                .iter()
                .zip(exact.density_values())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * g.dx;
            assert!(l1 < 1e-3, "t={} l1={l1}", s.t);
        }
    }

    #[test]
    fn two_particle_evolution_matches_gaussian() {
        let g = Grid1::periodic(-10.0, 20.0, 128).unwrap();
        let st = AnalyticState::new("two_particle_gaussian", &StateParams::default()).unwrap();
        let wf = st.wavefunction(&[g, g], 0.0).unwrap();
        let mut u = Vec::with_capacity(g.n * g.n);
        for x in g.points() {
            for y in g.points() {
                u.push(0.5 * (x * x + y * y));
            }
        }
        let out = schrodinger_evolve(&wf, &u, 0.01, 1.0, 1000).unwrap();
        let s = out.last().unwrap();
        let c = st.gaussian_at(1.0).unwrap().covariance();
        let cxy = s.expect(|x| x[0] * x[1]);
        assert!((cxy - c[(0, 1)]).abs() < 1e-4, "{cxy} vs {}", c[(0, 1)]);
        assert!((s.norm() - 1.0).abs() < 1e-9);
    }
}
