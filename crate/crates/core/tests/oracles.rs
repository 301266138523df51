// Closed-form oracles, written out here rather than taken from the library.

use std::f64::consts::PI;

use nelson_core::estimators::{estimate_backward_derivative, estimate_forward_derivative, Bins, DerivativeSettings};
use nelson_core::field::{gravitational_spectrum, mode_basis, potential_spectrum};
use nelson_core::harness::{collapse_density, marginal_distance, Metric};
use nelson_core::process::{simulate_colored_smoothing, simulate_nelson, PositionSampler};
use nelson_core::quantum::{quantum_potential, schrodinger_evolve, AnalyticState, StateParams};
use nelson_core::{simulate_ou, stats, Grid1, IntegratorConfig, NoiseStream, ScalarFieldGrid, ScalarFieldGrid2};

fn unit() -> StateParams {
    StateParams::default()
}

fn moments(st: &AnalyticState, t: f64) -> (f64, f64) {
    let g = Grid1::linspace(-30.0, 30.0, 6001).unwrap();
    let rho = ScalarFieldGrid::from_fn(g, |x| st.density(&[x], t));
    let m = g.integrate(&g.points().iter().zip(&rho.values).map(|(x, r)| x * r).collect::<Vec<_>>());
    let v = g.integrate(&g.points().iter().zip(&rho.values).map(|(x, r)| (x - m).powi(2) * r).collect::<Vec<_>>());
    (m, v)
}

#[test]
fn ho_ground_drift_is_minus_omega_x() {
    let mut p = unit();
    p.omega = 1.7;
    let st = AnalyticState::new("ho_ground", &p).unwrap();
    for &t in &[0.0, 0.3, 5.0] {
        for &x in &[-2.0, -0.5, 0.0, 1.3] {
            let mut b = [0.0];
            st.drift(&[x], t, &mut b);
            assert!((b[0] + 1.7 * x).abs() < 1e-9, "t={t} x={x} b={}", b[0]);
        }
    }
}

#[test]
fn free_packet_drift_at_zero() {
    let mut p = unit();
    p.sigma0 = 0.7;
    p.p0 = 0.0;
    let st = AnalyticState::new("free_gaussian", &p).unwrap();
    for &x in &[-1.0, 0.2, 2.0] {
        let mut b = [0.0];
        st.drift(&[x], 0.0, &mut b);
        let want = -p.hbar * x / (2.0 * p.mass * 0.49);
        assert!((b[0] - want).abs() < 1e-9);
    }
}

#[test]
fn free_packet_spreading() {
    let mut p = unit();
    p.sigma0 = 0.8;
    p.mass = 1.5;
    p.hbar = 1.2;
    let st = AnalyticState::new("free_gaussian", &p).unwrap();
    for &t in &[0.0, 0.5, 2.0] {
        let want = 0.64 * (1.0 + (p.hbar * t / (2.0 * p.mass * 0.64)).powi(2));
        let (_, v) = moments(&st, t);
        assert!((v / want - 1.0).abs() < 1e-3, "t={t}: {v} vs {want}");
    }
}

#[test]
fn coherent_state_oscillates_rigidly() {
    let mut p = unit();
    p.x0 = 1.5;
    p.p0 = 0.0;
    p.omega = 2.0;
    let st = AnalyticState::new("ho_coherent", &p).unwrap();
    for &t in &[0.0, 0.4, 1.1] {
        let (m, v) = moments(&st, t);
        assert!((m - 1.5 * (2.0 * t).cos()).abs() < 1e-6, "mean {m}");
        assert!((v - 0.25).abs() < 1e-6, "var {v}");
    }
}

#[test]
fn superposition_density_matches_hermite_form() {
    let st = AnalyticState::new("ho_superposition_01", &unit()).unwrap();
    for &t in &[0.0f64, 0.7, 2.0] {
        for &x in &[-1.2f64, 0.0, 0.4, 2.0] {
            // phi0 = pi^-1/4 e^{-x^2/2}, phi1 = sqrt2 x phi0, relative phase e^{-i t}
            let g = PI.powf(-0.25) * (-x * x / 2.0).exp();
            let (a, b) = (g + 2f64.sqrt() * x * g * t.cos(), -(2f64.sqrt()) * x * g * t.sin());
            let want = 0.5 * (a * a + b * b);
            assert!((st.density(&[x], t) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ground_state_quantum_potential() {
    let g = Grid1::linspace(-8.0, 8.0, 1601).unwrap();
    let rho = ScalarFieldGrid::from_fn(g, |x| (-x * x).exp() / PI.sqrt());
    let q = quantum_potential(&rho, 1.0, 1.0).unwrap();
    for i in (400..1200).step_by(50) {
        let x = g.point(i);
        let v = q.defined(i).unwrap();
        assert!((v - (x * x / 2.0 - 0.5)).abs() < 1e-3, "x={x}: {v}");
    }
}

#[test]
fn ground_state_returns_after_a_period() {
    let st = AnalyticState::new("ho_ground", &unit()).unwrap();
    let g = Grid1::linspace(-12.0, 12.0, 512).unwrap();
    let psi0 = st.wavefunction(&[g], 0.0).unwrap();
    let pot: Vec<f64> = g.points().iter().map(|x| x * x / 2.0).collect();
    let out = schrodinger_evolve(&psi0, &pot, 2e-3, 2.0 * PI, 100_000).unwrap();
    let fid = psi0.fidelity(out.last().unwrap());
    assert!(fid > 1.0 - 1e-6, "fidelity {fid}");
}

#[test]
fn coupled_ground_state_covariance() {
    let mut p = unit();
    p.kappa = 0.6;
    let st = AnalyticState::new("two_particle_gaussian", &p).unwrap();
    let c = st.gaussian_at(0.0).unwrap().covariance();
    // normal modes (x1 +- x2)/sqrt2 with frequencies sqrt(1 +- kappa)
    let (wp, wm) = ((1.0f64 + 0.6).sqrt(), (1.0f64 - 0.6).sqrt());
    let diag = 0.25 * (1.0 / wp + 1.0 / wm);
    let off = 0.25 * (1.0 / wp - 1.0 / wm);
    assert!((c[(0, 0)] - diag).abs() < 1e-10 && (c[(1, 1)] - diag).abs() < 1e-10);
    assert!((c[(0, 1)] - off).abs() < 1e-10 && (c[(1, 0)] - off).abs() < 1e-10);
}

#[test]
fn window_collapse_of_correlated_gaussian() {
    let (s1, s2, r, mu1, mu2) = (1.0, 0.7, 0.6, 0.2, -0.3);
    let g = Grid1::linspace(-8.0, 8.0, 321).unwrap();
    let rho = ScalarFieldGrid2::from_fn(g, g, |a, b| {
        let (u, v) = ((a - mu1) / s1, (b - mu2) / s2);
        (-(u * u - 2.0 * r * u * v + v * v) / (2.0 * (1.0 - r * r))).exp()
    })
    .normalized()
    .unwrap();
    let (xb, w) = (1.1, 0.3);
    let c = collapse_density(&rho, 0, xb, w).unwrap();
    let m2 = c.integrate_with(|_, b| b);
    // the window is a Gaussian likelihood, so x1 shrinks toward mu1
    let m1 = (xb * s1 * s1 + mu1 * w * w) / (s1 * s1 + w * w);
    let want = mu2 + r * s2 / s1 * (m1 - mu1);
    assert!((m2 - want).abs() < 1e-4, "{m2} vs {want}");
}

#[test]
fn w1_of_a_shift_is_the_shift() {
    let g = Grid1::linspace(-10.0, 10.0, 4001).unwrap();
    let n = |m: f64| ScalarFieldGrid::from_fn(g, move |x| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * PI).sqrt());
    let d = marginal_distance(&n(0.0), &n(0.1), Metric::W1).unwrap();
    assert!((d - 0.1).abs() < 1e-4, "{d}");
}

#[test]
fn ou_stationary_variance_from_rest() {
    // beta = 10 from A0 = 0; discard the first unit of time
    let beta = 10.0;
    let cfg = IntegratorConfig::new(1e-3, 50_000).unwrap();
    let mut acc = Vec::new();
    for i in 0..40 {
        let mut s = NoiseStream::new(99, i);
        let p = simulate_ou(beta, 0.0, &cfg, Some(&mut s)).unwrap();
        acc.extend(p[1000..].iter().step_by(20));
    }
    let v = stats::variance(&acc);
    assert!((v / (beta / 2.0) - 1.0).abs() < 0.05, "variance {v}");
}

#[test]
fn white_nelson_relaxes_to_ground_variance() {
    let drift = |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -x[0];
    let cfg = IntegratorConfig::for_horizon(5e-3, 8.0).unwrap().with_recording(1600, 1600);
    let ens = simulate_nelson(&drift, &PositionSampler::Fixed(vec![0.0]), 1.0, (-50.0, 50.0), &cfg, 20_000, 4).unwrap();
    let xs = ens.positions(ens.n_records() - 1, 0);
    let v = stats::variance(&xs);
    assert!((v / 0.5 - 1.0).abs() < 0.05, "variance {v}");
}

#[test]
fn integrated_ou_variance() {
    // x(T) = eps int_0^T A, A stationary: Var = T - (1 - e^{-beta T}) / beta
    let (beta, t) = (10.0, 2.0);
    let zero = |_: &[f64], _t: f64, out: &mut [f64]| out[0] = 0.0;
    let cfg = IntegratorConfig::for_horizon(1e-3, t).unwrap().with_recording(2000, 2000);
    let ens = simulate_colored_smoothing(&zero, &PositionSampler::Fixed(vec![0.0]), 1.0, beta, (-50.0, 50.0), &cfg, 20_000, 8)
        .unwrap();
    let xs = ens.positions(ens.n_records() - 1, 0);
    let want = t - (1.0 - (-beta * t).exp()) / beta;
    let (v, se) = (stats::variance(&xs), stats::variance_stderr(&xs));
    assert!((v - want).abs() < 3.0 * se + 0.01 * want, "{v} +- {se} vs {want}");
}

#[test]
fn forward_and_backward_derivatives_of_ground_state() {
    // D+ x = -x, D- x = +x at m = omega = hbar = 1
    let drift = |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -x[0];
    let sampler = PositionSampler::independent_normal(&[0.0], &[0.5f64.sqrt()]);
    let cfg = IntegratorConfig::for_horizon(1e-3, 0.6).unwrap().with_recording(50, 10);
    let ens = simulate_nelson(&drift, &sampler, 1.0, (-50.0, 50.0), &cfg, 40_000, 21).unwrap();
    let bins = Bins::uniform(-1.5, 1.5, 10).unwrap();
    let s = DerivativeSettings::new(0.02).with_window(0.2);
    let fw = estimate_forward_derivative(&ens, 0, 0.3, &bins, &s).unwrap().slope_fit().unwrap();
    let bw = estimate_backward_derivative(&ens, 0, 0.3, &bins, &s).unwrap().slope_fit().unwrap();
    assert!((fw.slope + 1.0).abs() < 3.0 * fw.slope_stderr + 0.05, "D+ slope {} +- {}", fw.slope, fw.slope_stderr);
    assert!((bw.slope - 1.0).abs() < 3.0 * bw.slope_stderr + 0.05, "D- slope {} +- {}", bw.slope, bw.slope_stderr);
}

#[test]
fn periodic_kernel_and_mode_variances() {
    let l = 10.0;
    for (n, ratio) in [(8usize, 1.0 / 9.0), (16, 1.0 / 17.0), (32, 1.0 / 33.0)] {
        let m = mode_basis(l, n, 1.0).unwrap();
        let pairs = ((n - 1) / 2) as f64;
        let diag = (2.0 * pairs + 1.0) / l;
        let k0 = m.kernel(0.3, 0.3);
        let km = m.kernel(0.3, 0.3 + l / 2.0);
        // even n carries a lone cosine on top of the pairs
        let lone = if n % 2 == 0 { 2.0 / l * (2.0 * PI * (n / 2) as f64 * 0.3 / l).cos().powi(2) } else { 0.0 };
        assert!((k0 - diag - lone).abs() < 1e-10, "n={n}: {k0} vs {}", diag + lone);
        let at0 = m.kernel(0.0, 0.0);
        assert!((m.kernel(0.0, l / 2.0) / at0 - ratio).abs() < 1e-10, "n={n}: {}", km / k0);
        for (i, sd) in m.ground_sd(1.0).iter().enumerate() {
            let w = (1.0 + m.k[i] * m.k[i]).sqrt();
            assert!((sd * sd - 0.5 / w).abs() < 1e-12);
        }
    }
}

#[test]
fn spectra_closed_forms() {
    let g = 1.0 / (4.0 * PI);
    assert!((gravitational_spectrum(2.0, 1.0, 1.0, 1.0, g).unwrap() - 16.0).abs() < 1e-12);
    assert_eq!(gravitational_spectrum(3.0, 0.0, 1.0, 1.0, g).unwrap(), 0.0);
    assert!((potential_spectrum(2f64.powi(4), 2.0, g).unwrap() - 1.0).abs() < 1e-12);
    for &k in &[0.3, 1.0, 7.0] {
        let (eps, xi, t, gg) = (1.3, 0.4, 2.5, 0.9);
        let p = gravitational_spectrum(k, t, eps, xi, gg).unwrap();
        let pt = potential_spectrum(p, k, gg).unwrap();
        assert!((pt / (eps * eps * t / (xi * xi)) - 1.0).abs() < 1e-12);
    }
    assert!(gravitational_spectrum(1.0, 1.0, 1.0, 0.0, g).is_err());
    assert!(gravitational_spectrum(1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    assert!(potential_spectrum(1.0, 0.0, g).is_err());
}
