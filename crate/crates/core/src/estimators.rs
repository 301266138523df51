//! Nonparametric estimators over trajectory ensembles: densities, binned
//! conditional means, forward/backward stochastic derivatives, the
//! composed stochastic acceleration and the Newton-Nelson residual.
//!
//! Derivative fields are fitted bin by bin with a local-linear model in time,
//! `F(x, s) = a(x) + c(x) (s - t)`, pooled over records within `window` of
//! `t`. With `window == 0` this is the plain binned conditional mean at `t`.
//! Standard errors come from a delete-group jackknife over trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::grid::{Grid1, ScalarFieldGrid};
use crate::stats::{self, group_of, LineFit};

pub const N_MIN: usize = 50;
pub const JACKKNIFE_GROUPS: usize = 20;
pub const MAX_BINS: usize = 12;

// ---------------------------------------------------------------- density

/// Silverman's rule of thumb.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let s = stats::sorted(samples);
    let sd = stats::variance(samples).sqrt();
    let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

/// Gaussian kernel density estimate on `grid`, normalized to unit mass.
///
/// Samples are linearly binned onto the grid and convolved with the kernel,
/// so the cost is independent of the sample count beyond one pass.
pub fn estimate_density(samples: &[f64], grid: Grid1, bandwidth: f64) -> Result<ScalarFieldGrid> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if samples.len() < 1000 {
        return Err(Error::invalid(format!(
            "density estimation needs at least 1000 samples, got {}",
            samples.len()
        )));
    }
    let n = grid.n;
    let mut w = vec![0.0; n];
    for &x in samples {
        let s = (x - grid.x0) / grid.dx;
        if !(s >= 0.0) || s > (n - 1) as f64 {
            continue;
        }
        let i = (s.floor() as usize).min(n - 2);
        let f = s - i as f64;
        w[i] += 1.0 - f;
        w[i + 1] += f;
    }
    let reach = ((6.0 * bandwidth / grid.dx).ceil() as usize).min(n);
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| {
            let u = k as f64 * grid.dx / bandwidth;
            (-0.5 * u * u).exp()
        })
        .collect();
    let mut out = vec![0.0; n];
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let lo = i.saturating_sub(reach);
        let hi = (i + reach).min(n - 1);
        for (j, o) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *o += wi * kernel[i.abs_diff(j)];
        }
    }
    ScalarFieldGrid::new(grid, out).normalized()
}

// ---------------------------------------------------------------- bins

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub edges: Vec<f64>,
}

impl Bins {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !(hi > lo) {
            return Err(Error::invalid(format!("bad bins [{lo}, {hi}] x {n}")));
        }
        let h = (hi - lo) / n as f64;
        Ok(Self {
            edges: (0..=n).map(|i| lo + i as f64 * h).collect(),
        })
    }

    /// Freedman-Diaconis width over the central 99 % of the samples, with the
    /// bin count capped at `max_bins`.
    pub fn freedman_diaconis(samples: &[f64], max_bins: usize) -> Result<Self> {
        let s = stats::sorted(samples.iter().copied().filter(|x| x.is_finite()).collect::<Vec<_>>().as_slice());
        if s.len() < 2 {
            return Err(Error::invalid("need samples to choose bins"));
        }
        let lo = stats::quantile_sorted(&s, 0.005);
        let hi = stats::quantile_sorted(&s, 0.995);
        let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
        let h = 2.0 * iqr * (s.len() as f64).powf(-1.0 / 3.0);
        let n = if h > 0.0 { ((hi - lo) / h).ceil() as usize } else { 1 };
        Self::uniform(lo, hi, n.clamp(1, max_bins.max(1)))
    }

    pub fn n(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn width(&self) -> f64 {
        (self.edges[self.n()] - self.edges[0]) / self.n() as f64
    }

    #[inline]
    pub fn index(&self, x: f64) -> Option<usize> {
        let n = self.n();
        let lo = self.edges[0];
        let hi = self.edges[n];
        if !(x >= lo && x <= hi) {
            return None;
        }
        Some((((x - lo) / (hi - lo) * n as f64) as usize).min(n - 1))
    }

    /// Grid whose points are the bin centers.
    pub fn center_grid(&self) -> Grid1 {
        let c = self.centers();
        Grid1 {
            x0: c[0],
            dx: if c.len() > 1 { c[1] - c[0] } else { self.width() },
            n: c.len(),
        }
    }
}

// ---------------------------------------------------------------- conditional means

#[derive(Clone, Debug, PartialEq)]
pub struct BinnedConditional {
    pub bins: Bins,
    pub count: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n_min: usize,
}

impl BinnedConditional {
    pub fn reliable(&self, j: usize) -> bool {
        self.count[j] >= self.n_min
    }

    pub fn stderr(&self, j: usize) -> f64 {
        (self.var[j] / self.count[j] as f64).sqrt()
    }
}

/// Per-bin sample mean and variance of `f` given `x`. Samples outside the
/// bins are ignored; empty bins have NaN statistics.
pub fn conditional_mean(x: &[f64], f: &[f64], bins: &Bins, n_min: usize) -> BinnedConditional {
    let k = bins.n();
    let mut cnt = vec![0usize; k];
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for (&xi, &fi) in x.iter().zip(f) {
        if !fi.is_finite() {
            continue;
        }
        if let Some(j) = bins.index(xi) {
            cnt[j] += 1;
            sum[j] += fi;
            sq[j] += fi * fi;
        }
    }
    let mean: Vec<f64> = (0..k)
        .map(|j| if cnt[j] > 0 { sum[j] / cnt[j] as f64 } else { f64::NAN })
        .collect();
    let var = (0..k)
        .map(|j| {
            if cnt[j] > 1 {
                ((sq[j] - cnt[j] as f64 * mean[j] * mean[j]) / (cnt[j] - 1) as f64).max(0.0)
            } else {
                f64::NAN
            }
        })
        .collect();
    BinnedConditional {
        bins: bins.clone(),
        count: cnt,
        mean,
        var,
        n_min,
    }
}

// ---------------------------------------------------------------- derivative fields

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSettings {
    /// Finite lag of the difference quotients.
    pub delta: f64,
    /// Half-width of the time window pooled around `t`.
    pub window: f64,
    pub n_min: usize,
    pub groups: usize,
}

impl DerivativeSettings {
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            window: 0.0,
            n_min: N_MIN,
            groups: JACKKNIFE_GROUPS,
        }
    }

    pub fn with_window(mut self, window: f64) -> Self {
        self.window = window;
        self
    }
}

/// A binned field over x at time `t` with jackknife standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeField {
    pub t: f64,
    pub delta: f64,
    pub bins: Bins,
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub count: Vec<usize>,
    pub reliable: Vec<bool>,
    /// Mean conditioning position per bin (the bin center when empty). The
    /// estimate belongs here rather than at the center.
    pub position: Vec<f64>,
}

impl DerivativeField {
    pub fn centers(&self) -> Vec<f64> {
        self.bins.centers()
    }

    pub fn reliable_bins(&self) -> Vec<usize> {
        (0..self.bins.n()).filter(|&j| self.reliable[j]).collect()
    }

    /// Weighted straight-line fit over reliable bins (inverse-variance
    /// weights).
    pub fn slope_fit(&self) -> Result<LineFit> {
        let idx = self.reliable_bins();
        let c = &self.position;
        let x: Vec<f64> = idx.iter().map(|&j| c[j]).collect();
        let y: Vec<f64> = idx.iter().map(|&j| self.estimate[j]).collect();
        let w: Vec<f64> = idx.iter().map(|&j| 1.0 / self.stderr[j].max(1e-300).powi(2)).collect();
        stats::weighted_line_fit(&x, &y, &w, true)
    }

    pub fn to_grid(&self) -> ScalarFieldGrid {
        ScalarFieldGrid::with_mask(self.bins.center_grid(), self.estimate.clone(), self.reliable.clone())
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    n: f64,
    /// Sum of the conditioning positions.
    x: f64,
    s: f64,
    ss: f64,
    y: f64,
    sy: f64,
}

impl Acc {
    #[inline]
    fn push(&mut self, x: f64, s: f64, y: f64) {
        self.n += 1.0;
        self.x += x;
        self.s += s;
        self.ss += s * s;
        self.y += y;
        self.sy += s * y;
    }

    fn add(&mut self, o: &Acc) {
        self.n += o.n;
        self.x += o.x;
        self.s += o.s;
        self.ss += o.ss;
        self.y += o.y;
        self.sy += o.sy;
    }

    fn sub(&self, o: &Acc) -> Acc {
        Acc {
            n: self.n - o.n,
            x: self.x - o.x,
            s: self.s - o.s,
            ss: self.ss - o.ss,
            y: self.y - o.y,
            sy: self.sy - o.sy,
        }
    }

    /// Intercept at `s = 0` and slope in `s`.
    fn solve(&self) -> (f64, f64) {
        if self.n < 1.0 {
            return (f64::NAN, f64::NAN);
        }
        let sm = self.s / self.n;
        let ym = self.y / self.n;
        let sxx = self.ss - self.n * sm * sm;
        if sxx <= 1e-12 * self.ss.max(1e-300) || sxx <= 0.0 {
            return (ym, 0.0);
        }
        let c = (self.sy - self.n * sm * ym) / sxx;
        (ym - c * sm, c)
    }
}

/// Local-linear-in-time fit per bin.
#[derive(Clone, Debug)]
struct BinFit {
    a: Vec<f64>,
    /// Mean conditioning position per bin.
    xm: Vec<f64>,
    c: Vec<f64>,
    count: Vec<usize>,
}

fn fit_of(accs: &[Acc]) -> BinFit {
    let (a, c): (Vec<f64>, Vec<f64>) = accs.iter().map(Acc::solve).unzip();
    BinFit {
        a,
        c,
        xm: accs.iter().map(|a| if a.n > 0.0 { a.x / a.n } else { f64::NAN }).collect(),
        count: accs.iter().map(|a| a.n as usize).collect(),
    }
}

/// Records used around `t`.
#[derive(Clone, Debug)]
struct Layout {
    /// Record index of `t`.
    center: usize,
    /// Lag in records.
    lag: usize,
    /// Records pooled in the window (spaced by `lag`).
    window: Vec<usize>,
}

fn layout(ens: &TrajectoryEnsemble, t: f64, delta: f64, window: f64, back: usize, fwd: usize) -> Result<Layout> {
    let ic = ens.require_record(t)?;
    let times = &ens.times;
    let spacing = if ic + 1 < times.len() {
        times[ic + 1] - times[ic]
    } else if ic > 0 {
        times[ic] - times[ic - 1]
    } else {
        return Err(Error::invalid("ensemble has a single record"));
    };
    if !(delta > 0.0) {
        return Err(Error::invalid("lag delta must be positive"));
    }
    let lag = (delta / spacing).round() as usize;
    if lag == 0 || (lag as f64 * spacing - delta).abs() > 1e-6 * delta {
        return Err(Error::invalid(format!(
            "lag {delta} must be a positive multiple of the record spacing {spacing} (and so at least dt)"
        )));
    }
    if !(window >= 0.0) {
        return Err(Error::invalid("window must be >= 0"));
    }
    let half = ((window / delta) + 1e-9).floor() as usize;
    let mut recs = Vec::with_capacity(2 * half + 1);
    for m in -(half as isize)..=(half as isize) {
        let r = ic as isize + m * lag as isize;
        let need_lo = r - ((back + 1) * lag) as isize + lag as isize;
        let need_hi = r + (fwd * lag) as isize;
        let lo_r = r - (back * lag) as isize;
        if lo_r < 0 || need_lo < 0 || need_hi >= times.len() as isize {
            return Err(Error::invalid(format!(
                "insufficient horizon: t = {t} with lag {delta} and window {window} needs records outside the ensemble"
            )));
        }
        let r = r as usize;
        let ok = |a: usize, b: usize, k: usize| (times[b] - times[a] - k as f64 * spacing).abs() <= 1e-6 * spacing;
        if (back > 0 && !ok(r - back * lag, r, back * lag)) || (fwd > 0 && !ok(r, r + fwd * lag, fwd * lag)) {
            return Err(Error::invalid("records around t are not uniformly spaced"));
        }
        recs.push(r);
    }
    Ok(Layout {
        center: ic,
        lag,
        window: recs,
    })
}

/// Accumulates `(x_cond, y)` samples per jackknife group and bin. Groups run
/// in parallel; each is summed sequentially so results do not depend on the
/// thread count.
fn accumulate<F>(ens: &TrajectoryEnsemble, lay: &Layout, bins: &Bins, groups: usize, skip_group: Option<usize>, sample: F) -> Vec<Vec<Acc>>
where
    F: Fn(usize, usize, f64) -> Option<(f64, f64)> + Sync,
{
    let n = ens.n_traj;
    let t0 = ens.times[lay.center];
    (0..groups)
        .into_par_iter()
        .map(|g| {
            let mut acc = vec![Acc::default(); bins.n()];
            if Some(g) == skip_group {
                return acc;
            }
            let lo = (g * n).div_ceil(groups);
            let hi = ((g + 1) * n).div_ceil(groups).min(n);
            for traj in lo..hi {
                debug_assert_eq!(group_of(traj, n, groups), g);
                if !ens.is_valid(traj) {
                    continue;
                }
                for &r in &lay.window {
                    let s = ens.times[r] - t0;
                    if let Some((xc, y)) = sample(traj, r, s) {
                        if let Some(j) = bins.index(xc) {
                            if y.is_finite() {
                                acc[j].push(xc, s, y);
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect()
}

fn total(per_group: &[Vec<Acc>]) -> Vec<Acc> {
    let mut t = vec![Acc::default(); per_group[0].len()];
    for g in per_group {
        for (a, b) in t.iter_mut().zip(g) {
            a.add(b);
        }
    }
    t
}

/// Full fit plus leave-one-group-out fits.
fn fits(per_group: &[Vec<Acc>]) -> (BinFit, Vec<BinFit>) {
    let tot = total(per_group);
    let full = fit_of(&tot);
    let loo = per_group
        .iter()
        .map(|g| fit_of(&tot.iter().zip(g).map(|(a, b)| a.sub(b)).collect::<Vec<_>>()))
        .collect();
    (full, loo)
}

fn jackknife_field(t: f64, delta: f64, bins: &Bins, n_min: usize, full: &BinFit, loo: &[BinFit]) -> DerivativeField {
    let k = bins.n();
    let stderr = (0..k)
        .map(|j| stats::jackknife_stderr(loo.len(), |g| loo[g].a[j]))
        .collect();
    DerivativeField {
        t,
        delta,
        bins: bins.clone(),
        estimate: full.a.clone(),
        stderr,
        count: full.count.clone(),
        reliable: full.count.iter().map(|&c| c >= n_min).collect(),
        position: full.xm.iter().zip(bins.centers()).map(|(m, c)| if m.is_finite() { *m } else { c }).collect(),
    }
}

fn check_settings(s: &DerivativeSettings) -> Result<()> {
    if s.groups < 2 {
        return Err(Error::invalid("jackknife needs at least two groups"));
    }
    Ok(())
}

/// Default bins: capped Freedman-Diaconis on the positions at `t`.
pub fn default_bins(ens: &TrajectoryEnsemble, t: f64, particle: usize) -> Result<Bins> {
    let r = ens.require_record(t)?;
    Bins::freedman_diaconis(&ens.positions(r, particle), MAX_BINS)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Backward,
}

fn quotient_field(
    ens: &TrajectoryEnsemble,
    particle: usize,
    t: f64,
    bins: &Bins,
    s: &DerivativeSettings,
    dir: Direction,
) -> Result<(Layout, BinFit, Vec<BinFit>)> {
    check_settings(s)?;
    let (back, fwd) = match dir {
        Direction::Forward => (0, 1),
        Direction::Backward => (1, 0),
    };
    let lay = layout(ens, t, s.delta, s.window, back, fwd)?;
    let l = lay.lag;
    let delta = ens.times[lay.center + l] - ens.times[lay.center];
    let per = accumulate(ens, &lay, bins, s.groups, None, |traj, r, _| {
        let x = ens.x_at(r, traj, particle);
        let y = match dir {
            Direction::Forward => (ens.x_at(r + l, traj, particle) - x) / delta,
            Direction::Backward => (x - ens.x_at(r - l, traj, particle)) / delta,
        };
        Some((x, y))
    });
    let (full, loo) = fits(&per);
    Ok((lay, full, loo))
}

/// `D+ x` at `t`: binned conditional mean of `(x(t+delta) - x(t)) / delta`.
pub fn estimate_forward_derivative(
    ens: &TrajectoryEnsemble,
    particle: usize,
    t: f64,
    bins: &Bins,
    s: &DerivativeSettings,
) -> Result<DerivativeField> {
    let (_, full, loo) = quotient_field(ens, particle, t, bins, s, Direction::Forward)?;
    Ok(jackknife_field(t, s.delta, bins, s.n_min, &full, &loo))
}

/// `D- x` at `t`: binned conditional mean of `(x(t) - x(t-delta)) / delta`.
pub fn estimate_backward_derivative(
    ens: &TrajectoryEnsemble,
    particle: usize,
    t: f64,
    bins: &Bins,
    s: &DerivativeSettings,
) -> Result<DerivativeField> {
    let (_, full, loo) = quotient_field(ens, particle, t, bins, s, Direction::Backward)?;
    Ok(jackknife_field(t, s.delta, bins, s.n_min, &full, &loo))
}

/// Piecewise-linear interpolation of a bin fit across reliable bin centers,
/// extrapolated linearly beyond the outermost ones.
struct FieldInterp {
    x: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl FieldInterp {
    fn new(bins: &Bins, fit: &BinFit, n_min: usize) -> Result<Self> {
        let mut x = Vec::new();
        let mut a = Vec::new();
        let mut c = Vec::new();
        for j in 0..bins.n() {
            if fit.count[j] >= n_min && fit.a[j].is_finite() {
                x.push(fit.xm[j]);
                a.push(fit.a[j]);
                c.push(fit.c[j]);
            }
        }
        if x.len() < 2 {
            return Err(Error::invalid("fewer than two reliable bins; increase n_traj or widen bins"));
        }
        Ok(Self { x, a, c })
    }

    #[inline]
    fn eval(&self, x: f64, s: f64) -> f64 {
        let n = self.x.len();
        let k = self.x.partition_point(|&c| c <= x).clamp(1, n - 1) - 1;
        let w = (x - self.x[k]) / (self.x[k + 1] - self.x[k]);
        let a = self.a[k] + w * (self.a[k + 1] - self.a[k]);
        let wc = w.clamp(0.0, 1.0);
        let c = self.c[k] + wc * (self.c[k + 1] - self.c[k]);
        a + c * s
    }
}

/// Symmetric stochastic acceleration and its two composition orders.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelerationField {
    /// `(D- D+ x + D+ D- x) / 2`.
    pub accel: DerivativeField,
    /// `D- D+ x`.
    pub minus_plus: DerivativeField,
    /// `D+ D- x`.
    pub plus_minus: DerivativeField,
}

/// Stochastic acceleration by composition: the binned `D+x` and `D-x` fields
/// are evaluated along the trajectories and differenced again in the other
/// time direction.
pub fn stochastic_acceleration(
    ens: &TrajectoryEnsemble,
    particle: usize,
    t: f64,
    bins: &Bins,
    s: &DerivativeSettings,
) -> Result<AccelerationField> {
    let (lay, fp_full, fp_loo) = quotient_field(ens, particle, t, bins, s, Direction::Forward)?;
    let (_, fm_full, fm_loo) = quotient_field(ens, particle, t, bins, s, Direction::Backward)?;
    // the outer differences need one more lag on each side
    let lay2 = layout(ens, t, s.delta, s.window, 1, 1)?;
    debug_assert_eq!(lay.window, lay2.window);
    let l = lay2.lag;
    let delta = ens.times[lay2.center + l] - ens.times[lay2.center];

    let outer = |fp: &BinFit, fm: &BinFit, skip: Option<usize>| -> Result<(Vec<Acc>, Vec<Acc>)> {
        let ip = FieldInterp::new(bins, fp, s.n_min)?;
        let im = FieldInterp::new(bins, fm, s.n_min)?;
        let mp = accumulate(ens, &lay2, bins, s.groups, skip, |traj, r, sr| {
            let x = ens.x_at(r, traj, particle);
            let xb = ens.x_at(r - l, traj, particle);
            Some((x, (ip.eval(x, sr) - ip.eval(xb, sr - delta)) / delta))
        });
        let pm = accumulate(ens, &lay2, bins, s.groups, skip, |traj, r, sr| {
            let x = ens.x_at(r, traj, particle);
            let xf = ens.x_at(r + l, traj, particle);
            Some((x, (im.eval(xf, sr + delta) - im.eval(x, sr)) / delta))
        });
        Ok((total(&mp), total(&pm)))
    };

    let (mp_tot, pm_tot) = outer(&fp_full, &fm_full, None)?;
    let loo: Vec<(Vec<Acc>, Vec<Acc>)> = (0..s.groups)
        .map(|g| outer(&fp_loo[g], &fm_loo[g], Some(g)))
        .collect::<Result<_>>()?;

    let mp_full = fit_of(&mp_tot);
    let pm_full = fit_of(&pm_tot);
    let mp_loo: Vec<BinFit> = loo.iter().map(|(a, _)| fit_of(a)).collect();
    let pm_loo: Vec<BinFit> = loo.iter().map(|(_, b)| fit_of(b)).collect();
    let avg = |a: &BinFit, b: &BinFit| BinFit {
        a: a.a.iter().zip(&b.a).map(|(x, y)| 0.5 * (x + y)).collect(),
        c: a.c.iter().zip(&b.c).map(|(x, y)| 0.5 * (x + y)).collect(),
        xm: a.xm.clone(),
        count: a.count.clone(),
    };
    let sym_full = avg(&mp_full, &pm_full);
    let sym_loo: Vec<BinFit> = mp_loo.iter().zip(&pm_loo).map(|(a, b)| avg(a, b)).collect();
    Ok(AccelerationField {
        accel: jackknife_field(t, s.delta, bins, s.n_min, &sym_full, &sym_loo),
        minus_plus: jackknife_field(t, s.delta, bins, s.n_min, &mp_full, &mp_loo),
        plus_minus: jackknife_field(t, s.delta, bins, s.n_min, &pm_full, &pm_loo),
    })
}

/// Binned conditional mean of the velocity given the position, the
/// phase-space estimate of the drift, with jackknife errors.
pub fn velocity_drift(ens: &TrajectoryEnsemble, particle: usize, t: f64, bins: &Bins, n_min: usize, groups: usize) -> Result<DerivativeField> {
    if ens.v.is_none() {
        return Err(Error::invalid("ensemble carries no velocities"));
    }
    let r = ens.require_record(t)?;
    let lay = Layout {
        center: r,
        lag: 1,
        window: vec![r],
    };
    let per = accumulate(ens, &lay, bins, groups, None, |traj, r, _| {
        Some((ens.x_at(r, traj, particle), ens.v_at(r, traj, particle).unwrap()))
    });
    let (full, loo) = fits(&per);
    Ok(jackknife_field(t, 0.0, bins, n_min, &full, &loo))
}

/// Binned conditional mean of an arbitrary per-trajectory quantity at `t`.
pub fn binned_statistic<F>(ens: &TrajectoryEnsemble, t: f64, bins: &Bins, n_min: usize, groups: usize, f: F) -> Result<DerivativeField>
where
    F: Fn(usize, usize) -> Option<(f64, f64)> + Sync,
{
    let r = ens.require_record(t)?;
    let lay = Layout {
        center: r,
        lag: 1,
        window: vec![r],
    };
    let per = accumulate(ens, &lay, bins, groups, None, |traj, r, _| f(traj, r));
    let (full, loo) = fits(&per);
    Ok(jackknife_field(t, 0.0, bins, n_min, &full, &loo))
}

// ---------------------------------------------------------------- residual

/// Newton-Nelson residual `accel(x) + (1/m) dU/dx` over reliable bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub field: ScalarFieldGrid,
    pub stderr: Vec<f64>,
    pub weights: Vec<f64>,
    /// Density-weighted L2 norm.
    pub norm: f64,
    /// Density-weighted RMS of the per-bin standard errors.
    pub pooled_stderr: f64,
    /// Delta-method standard error of `norm`.
    pub norm_stderr: f64,
}

/// `force(x)` is `-(1/m) dU/dx` (an acceleration).
pub fn newton_nelson_residual(accel: &DerivativeField, force: impl Fn(f64) -> f64) -> Result<Residual> {
    let k = accel.bins.n();
    let centers = &accel.position;
    let total: f64 = (0..k).filter(|&j| accel.reliable[j]).map(|j| accel.count[j] as f64).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("no reliable bins for the residual"));
    }
    let mut values = vec![f64::NAN; k];
    let mut weights = vec![0.0; k];
    let (mut n2, mut p2) = (0.0, 0.0);
    for j in 0..k {
        if accel.reliable[j] {
            let r = accel.estimate[j] - force(centers[j]);
            let w = accel.count[j] as f64 / total;
            values[j] = r;
            weights[j] = w;
            n2 += w * r * r;
            p2 += w * accel.stderr[j].powi(2);
        }
    }
    let norm = n2.sqrt();
    let var_norm: f64 = (0..k)
        .filter(|&j| accel.reliable[j])
        .map(|j| (weights[j] * values[j] * accel.stderr[j]).powi(2))
        .sum::<f64>()
        / n2.max(1e-300);
    Ok(Residual {
        field: ScalarFieldGrid::with_mask(accel.bins.center_grid(), values, accel.reliable.clone()),
        stderr: accel.stderr.clone(),
        weights,
        norm,
        pooled_stderr: p2.sqrt(),
        norm_stderr: var_norm.sqrt(),
    })
}

/// Density-weighted L2 distance between a binned field and a reference
/// function, with a delta-method error.
pub fn weighted_mismatch(field: &DerivativeField, reference: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    let r = newton_nelson_residual(field, reference)?;
    Ok((r.norm, r.norm_stderr.max(r.pooled_stderr / (r.weights.iter().filter(|w| **w > 0.0).count() as f64).sqrt())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{simulate_nelson, PositionSampler};
    use crate::rng::NoiseStream;
    use crate::sde::IntegratorConfig;

    #[test]
    fn kde_of_normal_samples() {
        let mut s = NoiseStream::new(4, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| s.normal()).collect();
        let g = Grid1::linspace(-6.0, 6.0, 601).unwrap();
        let rho = estimate_density(&xs, g, silverman_bandwidth(&xs)).unwrap();
        let l1: f64 = g.integrate(
            &g.points()
                .iter()
                .zip(&rho.values)
                .map(|(x, r)| (r - (-x * x / 2.0).exp() / (std::f64::consts::TAU).sqrt()).abs())
                .collect::<Vec<_>>(),
        );
        assert!(l1 < 0.02, "L1 {l1}");
        assert!(estimate_density(&xs, g, 0.0).is_err());
    }

    #[test]
    fn kde_of_identical_samples_is_one_peak() {
        let xs = vec![0.5; 2000];
        let g = Grid1::linspace(-3.0, 3.0, 601).unwrap();
        let rho = estimate_density(&xs, g, 0.2).unwrap();
        assert!((rho.integral() - 1.0).abs() < 1e-12);
        let var: f64 = g.integrate(&g.points().iter().zip(&rho.values).map(|(x, r)| (x - 0.5).powi(2) * r).collect::<Vec<_>>());
        assert!((var.sqrt() - 0.2).abs() < 0.01);
    }

    #[test]
    fn identity_conditional_mean() {
        let mut s = NoiseStream::new(1, 1);
        let x: Vec<f64> = (0..20_000).map(|_| s.normal()).collect();
        let bins = Bins::uniform(-2.0, 2.0, 8).unwrap();
        let c = conditional_mean(&x, &x, &bins, N_MIN);
        for (j, cen) in bins.centers().iter().enumerate() {
            assert!((c.mean[j] - cen).abs() < bins.width() / 2.0);
        }
        // independent target: equal bin means
        let f: Vec<f64> = (0..20_000).map(|_| s.normal()).collect();
        let groups: Vec<Vec<f64>> = (0..bins.n())
            .map(|j| x.iter().zip(&f).filter(|(x, _)| bins.index(**x) == Some(j)).map(|(_, f)| *f).collect())
            .collect();
        assert!(stats::anova_oneway(&groups).unwrap().1 > 0.01);
        let empty = conditional_mean(&[], &[], &bins, N_MIN);
        assert!(empty.count.iter().all(|&c| c == 0));
    }

    fn ground_run(n: usize, steps: usize, seed: u64) -> TrajectoryEnsemble {
        let cfg = IntegratorConfig::new(0.001, steps).unwrap().with_recording(0, 20);
        let init = PositionSampler::independent_normal(&[0.0], &[0.5f64.sqrt()]);
        simulate_nelson(&|x: &[f64], _: f64, o: &mut [f64]| o[0] = -x[0], &init, 1.0, (-20.0, 20.0), &cfg, n, seed).unwrap()
    }

    #[test]
    fn forward_and_backward_derivatives_of_ground_state() {
        let ens = ground_run(40_000, 400, 11);
        let s = DerivativeSettings::new(0.02).with_window(0.1);
        let bins = Bins::uniform(-1.2, 1.2, 8).unwrap();
        let fp = estimate_forward_derivative(&ens, 0, 0.2, &bins, &s).unwrap();
        let fm = estimate_backward_derivative(&ens, 0, 0.2, &bins, &s).unwrap();
        let sp = fp.slope_fit().unwrap().slope;
        let sm = fm.slope_fit().unwrap().slope;
        assert!((sp + 1.0).abs() < 0.1, "D+ slope {sp}");
        assert!((sm - 1.0).abs() < 0.1, "D- slope {sm}");
        assert!(fp.stderr.iter().all(|e| e.is_finite() && *e > 0.0));
    }

    #[test]
    fn lag_below_spacing_is_rejected() {
        let ens = ground_run(200, 100, 1);
        let bins = Bins::uniform(-1.0, 1.0, 4).unwrap();
        let e = estimate_forward_derivative(&ens, 0, 0.04, &bins, &DerivativeSettings::new(0.005));
        assert!(e.is_err());
        let e = stochastic_acceleration(&ens, 0, 0.1, &bins, &DerivativeSettings::new(0.02));
        assert!(e.is_err(), "t + delta beyond horizon must fail");
    }

    #[test]
    fn acceleration_of_ground_state() {
        let ens = ground_run(60_000, 500, 12);
        let s = DerivativeSettings::new(0.02).with_window(0.2);
        let bins = Bins::uniform(-1.2, 1.2, 8).unwrap();
        let a = stochastic_acceleration(&ens, 0, 0.24, &bins, &s).unwrap();
        let f = a.accel.slope_fit().unwrap();
        assert!((f.slope + 1.0).abs() < 4.0 * f.slope_stderr + 0.1, "slope {} +- {}", f.slope, f.slope_stderr);
        let r = newton_nelson_residual(&a.accel, |x| -x).unwrap();
        assert!(r.norm < 3.0 * r.pooled_stderr + 0.05, "{} vs {}", r.norm, r.pooled_stderr);
    }

    #[test]
    fn deterministic_drift_only_ensemble() {
        // no noise: D+ x equals the drift up to integrator order
        let cfg = IntegratorConfig::new(0.001, 200).unwrap().with_recording(0, 10);
        let init = PositionSampler::Uniform { lo: -1.0, hi: 1.0, n: 1 };
        let ens = simulate_nelson(&|x: &[f64], _: f64, o: &mut [f64]| o[0] = -x[0], &init, 0.0, (-5.0, 5.0), &cfg, 5000, 2).unwrap();
        let bins = Bins::uniform(-0.8, 0.8, 8).unwrap();
        let s = DerivativeSettings::new(0.01);
        let fp = estimate_forward_derivative(&ens, 0, 0.1, &bins, &s).unwrap();
        let fm = estimate_backward_derivative(&ens, 0, 0.1, &bins, &s).unwrap();
        for (j, c) in bins.centers().iter().enumerate() {
            assert!((fp.estimate[j] + c).abs() < 0.02 + bins.width() / 2.0);
            assert!((fm.estimate[j] + c).abs() < 0.02 + bins.width() / 2.0);
        }
    }
}
