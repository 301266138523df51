//! Itô Euler-Maruyama integration and the Ornstein-Uhlenbeck colored noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// Largest allowed `dt * beta`: the correlation time `1/beta` must span
/// several steps.
pub const MAX_DT_BETA: f64 = 0.1;

/// How the colored noise is advanced over one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuScheme {
    /// Exact conditional Gaussian update.
    #[default]
    Exact,
    /// Plain Euler-Maruyama, kept for cross-checks.
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Time of step 0.
    #[serde(default)]
    pub t0: f64,
    /// Record every `record_stride` steps once `record_from` is reached.
    /// Step 0 is always recorded.
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default)]
    pub record_from: usize,
    #[serde(default)]
    pub ou_scheme: OuScheme,
}

fn one() -> usize {
    1
}

impl IntegratorConfig {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        let cfg = Self {
            dt,
            n_steps,
            t0: 0.0,
            record_stride: 1,
            record_from: 0,
            ou_scheme: OuScheme::Exact,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Steps needed to cover `horizon` at `dt`.
    pub fn for_horizon(dt: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Self::new(dt, steps_for(horizon, dt))
    }

    pub fn with_recording(mut self, from: usize, stride: usize) -> Self {
        self.record_from = from;
        self.record_stride = stride.max(1);
        self
    }

    pub fn with_t0(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    pub fn with_scheme(mut self, scheme: OuScheme) -> Self {
        self.ou_scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record_stride must be at least 1"));
        }
        Ok(())
    }

    /// Enforces the resolution rule `dt * beta <= 0.1`.
    pub fn check_beta(&self, beta: f64) -> Result<()> {
        check_resolution(self.dt, beta)
    }

    pub fn horizon(&self) -> f64 {
        self.t0 + self.n_steps as f64 * self.dt
    }

    pub fn time_of(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn is_recorded(&self, step: usize) -> bool {
        step == 0 || (step >= self.record_from && (step - self.record_from) % self.record_stride == 0)
    }

    pub fn recorded_steps(&self) -> Vec<usize> {
        (0..=self.n_steps).filter(|&k| self.is_recorded(k)).collect()
    }
}

pub fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt - 1e-9).ceil().max(1.0) as usize
}

pub fn check_resolution(dt: f64, beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if dt * beta > MAX_DT_BETA * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "under-resolved colored noise: dt*beta = {} exceeds {MAX_DT_BETA} (dt={dt}, beta={beta})",
            dt * beta
        )));
    }
    Ok(())
}

/// One-step propagator for `dA = -beta A dt + beta dW`.
#[derive(Clone, Copy, Debug)]
pub struct OuStepper {
    beta: f64,
    dt: f64,
    scheme: OuScheme,
    decay: f64,
    sd: f64,
}

impl OuStepper {
    pub fn new(beta: f64, dt: f64, scheme: OuScheme) -> Result<Self> {
        check_resolution(dt, beta)?;
        let (decay, sd) = match scheme {
            OuScheme::Exact => {
                let decay = (-beta * dt).exp();
                // Conditional variance (beta/2)(1 - e^{-2 beta dt}).
                let var = 0.5 * beta * -(-2.0 * beta * dt).exp_m1();
                (decay, var.sqrt())
            }
            OuScheme::Euler => (1.0 - beta * dt, beta * dt.sqrt()),
        };
        Ok(Self {
            beta,
            dt,
            scheme,
            decay,
            sd,
        })
    }

    #[inline]
    pub fn step(&self, a: f64, z: f64) -> f64 {
        self.decay * a + self.sd * z
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn scheme(&self) -> OuScheme {
        self.scheme
    }

    /// Stationary standard deviation `sqrt(beta/2)`.
    pub fn stationary_sd(&self) -> f64 {
        (0.5 * self.beta).sqrt()
    }
}

/// Colored-noise path `A_0 .. A_n` (every step, not only recorded ones).
///
/// With `stream == None` the noise is switched off and the path is the
/// deterministic decay of `a0`.
pub fn simulate_ou(
    beta: f64,
    a0: f64,
    cfg: &IntegratorConfig,
    stream: Option<&mut NoiseStream>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let stepper = OuStepper::new(beta, cfg.dt, cfg.ou_scheme)?;
    let mut path = Vec::with_capacity(cfg.n_steps + 1);
    let mut a = a0;
    path.push(a);
    match stream {
        Some(s) => {
            for _ in 0..cfg.n_steps {
                a = stepper.step(a, s.normal());
                path.push(a);
            }
        }
        None => {
            let decay = match cfg.ou_scheme {
                OuScheme::Exact => (-beta * cfg.dt).exp(),
                OuScheme::Euler => 1.0 - beta * cfg.dt,
            };
            for _ in 0..cfg.n_steps {
                a *= decay;
                path.push(a);
            }
        }
    }
    Ok(path)
}

/// Stationary law of the colored noise: variance `beta / 2` and
/// autocovariance `(beta / 2) exp(-beta |tau|)`.
///
/// Text elsewhere writes the autocovariance as `beta exp(beta |tau|)`; with
/// `dA = -beta A dt + beta dW` the exponent must be negative and the
/// prefactor is `beta / 2`.
pub const OU_LAW_NOTE: &str = "stationary autocovariance is (beta/2) exp(-beta |tau|); \
the form beta exp(beta |tau|) has the wrong sign in the exponent and a prefactor off by 2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuLawReport {
    pub beta: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub path_steps: usize,
    /// `n_paths * T * beta / 2`, independent samples of `A^2`.
    pub effective_samples: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub target_variance: f64,
    pub decay_rate: f64,
    pub decay_rate_se: f64,
    pub variance_rel_error: f64,
    pub rate_rel_error: f64,
    pub note: String,
}

/// Simulates `n_paths` stationary colored-noise paths of `path_steps` steps
/// and measures their variance and autocovariance decay rate.
pub fn ou_law(beta: f64, dt: f64, n_paths: usize, path_steps: usize, seed: u64) -> Result<OuLawReport> {
    use rayon::prelude::*;
    if n_paths < 20 || path_steps < 100 {
        return Err(Error::invalid("ou_law needs >= 20 paths of >= 100 steps"));
    }
    let stepper = OuStepper::new(beta, dt, OuScheme::Exact)?;
    let max_lag = ((3.0 / (beta * dt)).ceil() as usize).min(path_steps / 4);
    // per path: variance and autocovariance (known zero mean)
    let per: Vec<(f64, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut s = NoiseStream::new(seed, i as u64);
            let mut a = stepper.stationary_sd() * s.normal();
            let mut path = Vec::with_capacity(path_steps);
            for _ in 0..path_steps {
                path.push(a);
                a = stepper.step(a, s.normal());
            }
            let cov: Vec<f64> = (0..=max_lag)
                .map(|l| (0..path_steps - l).map(|k| path[k] * path[k + l]).sum::<f64>() / (path_steps - l) as f64)
                .collect();
            (cov[0], cov)
        })
        .collect();
    let groups = 20;
    let lags: Vec<f64> = (0..=max_lag).map(|l| l as f64 * dt).collect();
    let pooled = |skip: Option<usize>| -> Vec<f64> {
        let mut acc = vec![0.0; max_lag + 1];
        let mut m = 0.0;
        for (i, (_, c)) in per.iter().enumerate() {
            if skip.map_or(true, |g| crate::stats::group_of(i, n_paths, groups) != g) {
                acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                m += 1.0;
            }
        }
        acc.iter().map(|a| a / m).collect()
    };
    let rate = |skip: Option<usize>| crate::stats::fit_exponential_decay(&lags, &pooled(skip)).map(|(_, r)| r);
    let decay_rate = rate(None)?;
    let decay_rate_se = crate::stats::jackknife_stderr(groups, |g| rate(Some(g)).unwrap_or(f64::NAN));
    let vars: Vec<f64> = per.iter().map(|(v, _)| *v).collect();
    let (variance, variance_se) = crate::stats::mean_and_stderr(&vars);
    let target = 0.5 * beta;
    Ok(OuLawReport {
        beta,
        dt,
        n_paths,
        path_steps,
        effective_samples: n_paths as f64 * path_steps as f64 * dt * beta / 2.0,
        variance,
        variance_se,
        target_variance: target,
        decay_rate,
        decay_rate_se,
        variance_rel_error: variance / target - 1.0,
        rate_rel_error: decay_rate / beta - 1.0,
        note: OU_LAW_NOTE.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathStatus {
    Valid,
    /// Integration stopped at `step` because the state or drift became
    /// non-finite.
    Invalid { step: usize },
}

#[derive(Clone, Debug)]
pub struct Path {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub status: PathStatus,
}

impl Path {
    pub fn is_valid(&self) -> bool {
        self.status == PathStatus::Valid
    }
}

/// Scalar Itô Euler-Maruyama: `x_{k+1} = x_k + drift(x_k, t_k) dt + diffusion dW_k`.
///
/// Every step is returned. A non-finite drift stops the path and flags it.
pub fn euler_maruyama<F>(
    drift: F,
    diffusion: f64,
    x0: f64,
    cfg: &IntegratorConfig,
    stream: &mut NoiseStream,
) -> Result<Path>
where
    F: Fn(f64, f64) -> f64,
{
    cfg.validate()?;
    if !(diffusion >= 0.0) {
        return Err(Error::invalid(format!("diffusion must be >= 0, got {diffusion}")));
    }
    let sqdt = cfg.dt.sqrt();
    let mut times = Vec::with_capacity(cfg.n_steps + 1);
    let mut values = Vec::with_capacity(cfg.n_steps + 1);
    let mut x = x0;
    times.push(cfg.t0);
    values.push(x);
    for k in 0..cfg.n_steps {
        let t = cfg.time_of(k);
        let b = drift(x, t);
        let dw = sqdt * stream.normal();
        if !b.is_finite() {
            return Ok(Path {
                times,
                values,
                status: PathStatus::Invalid { step: k },
            });
        }
        x += b * cfg.dt + diffusion * dw;
        times.push(cfg.time_of(k + 1));
        values.push(x);
    }
    Ok(Path {
        times,
        values,
        status: PathStatus::Valid,
    })
}
