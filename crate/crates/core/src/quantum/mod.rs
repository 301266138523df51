//! Quantum ground truth: wavefunctions, the Madelung split, Nelson drift,
//! quantum potential, the analytic catalog and the split-step oracle.

mod catalog;
mod gaussian;
mod schrodinger;

pub use catalog::{analytic_state, AnalyticState, StateParams, CATALOG};
pub use catalog::coupling_matrix;
pub use gaussian::{sqrtm_spd, GaussianState, Oscillator};
pub use schrodinger::{schrodinger_evolve, SplitStep};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{derivative, second_derivative, Grid1, ScalarFieldGrid};

/// Relative density threshold below which a grid point counts as a node.
pub const NODE_EPS_REL: f64 = 1e-8;
/// Magnitude of the drift assigned inside node regions.
pub const B_MAX: f64 = 1e3;

/// A complex wavefunction on a 1-D grid or a 2-D product grid (row-major,
/// second axis fastest).
#[derive(Clone, Debug)]
pub struct WavefunctionState {
    pub axes: Vec<Grid1>,
    pub psi: Vec<Complex64>,
    pub masses: Vec<f64>,
    pub hbar: f64,
    pub t: f64,
}

impl WavefunctionState {
    pub fn new(axes: Vec<Grid1>, psi: Vec<Complex64>, masses: Vec<f64>, hbar: f64, t: f64) -> Result<Self> {
        let size: usize = axes.iter().map(|g| g.n).product();
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::invalid("wavefunctions live on 1-D or 2-D grids"));
        }
        if psi.len() != size || masses.len() != axes.len() {
            return Err(Error::invalid("wavefunction shape does not match its grid"));
        }
        if !(hbar > 0.0) || masses.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("hbar and masses must be positive"));
        }
        Ok(Self { axes, psi, masses, hbar, t })
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn cell(&self) -> f64 {
        self.axes.iter().map(|g| g.dx).product()
    }

    pub fn density_values(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn norm(&self) -> f64 {
        let rho = self.density_values();
        match self.dims() {
            1 => self.axes[0].integrate(&rho),
            _ => {
                let ny = self.axes[1].n;
                let rows: Vec<f64> = rho.chunks(ny).map(|r| self.axes[1].integrate(r)).collect();
                self.axes[0].integrate(&rows)
            }
        }
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::invalid("cannot normalize a zero wavefunction"));
        }
        let s = 1.0 / n.sqrt();
        self.psi.iter_mut().for_each(|z| *z *= s);
        Ok(())
    }

    /// `|<self|other>|` by the plain Riemann sum.
    pub fn fidelity(&self, other: &WavefunctionState) -> f64 {
        let s: Complex64 = self
            .psi
            .iter()
            .zip(&other.psi)
            .map(|(a, b)| a.conj() * b)
            .sum();
        (s * self.cell()).norm()
    }

    pub fn density(&self) -> Result<ScalarFieldGrid> {
        if self.dims() != 1 {
            return Err(Error::invalid("density() is defined for 1-D states"));
        }
        Ok(ScalarFieldGrid::new(self.axes[0], self.density_values()))
    }

    /// Largest density on the outermost grid cells.
    pub fn boundary_density(&self) -> f64 {
        let rho = self.density_values();
        match self.dims() {
            1 => rho[0].max(rho[rho.len() - 1]),
            _ => {
                let (nx, ny) = (self.axes[0].n, self.axes[1].n);
                let mut m = 0.0f64;
                for i in 0..nx {
                    for j in 0..ny {
                        if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                            m = m.max(rho[i * ny + j]);
                        }
                    }
                }
                m
            }
        }
    }

    /// Expectation of `f` over the density.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let rho = self.density_values();
        let mut acc = 0.0;
        match self.dims() {
            1 => {
                for (i, r) in rho.iter().enumerate() {
                    acc += r * f(&[self.axes[0].point(i)]);
                }
            }
            _ => {
                let ny = self.axes[1].n;
                for (k, r) in rho.iter().enumerate() {
                    acc += r * f(&[self.axes[0].point(k / ny), self.axes[1].point(k % ny)]);
                }
            }
        }
        acc * self.cell()
    }
}

/// Density and phase of a 1-D wavefunction.
#[derive(Clone, Debug)]
pub struct MadelungPair {
    pub rho: ScalarFieldGrid,
    /// Action; undefined (masked) at nodes, continuous on each valid component.
    pub s: ScalarFieldGrid,
    pub hbar: f64,
}

impl MadelungPair {
    pub fn valid_mask(&self) -> &[bool] {
        &self.s.mask
    }

    /// `sqrt(rho) exp(i S / hbar)`, zero where S is undefined.
    pub fn reconstruct(&self) -> Vec<Complex64> {
        (0..self.rho.values.len())
            .map(|i| match self.s.defined(i) {
                Some(s) => Complex64::from_polar(self.rho.values[i].sqrt(), s / self.hbar),
                None => Complex64::new(0.0, 0.0),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DriftField {
    pub b: ScalarFieldGrid,
    pub valid_mask: Vec<bool>,
}

impl DriftField {
    pub fn at(&self, x: f64) -> Option<f64> {
        self.b.at(x)
    }
}

fn node_mask(rho: &[f64]) -> Vec<bool> {
    let max = rho.iter().cloned().fold(0.0, f64::max);
    let eps = NODE_EPS_REL * max;
    rho.iter().map(|&r| r > eps).collect()
}

/// Maximal runs of `true` in a mask, as half-open index ranges.
fn components(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len()));
    }
    out
}

pub fn madelung_split(state: &WavefunctionState) -> Result<MadelungPair> {
    if state.dims() != 1 {
        return Err(Error::invalid("madelung_split is defined for 1-D states"));
    }
    let rho = state.density_values();
    let mask = node_mask(&rho);
    let mut s = vec![f64::NAN; rho.len()];
    for (a, b) in components(&mask) {
        let mut phase = state.psi[a].arg();
        s[a] = phase;
        for i in a + 1..b {
            let mut d = state.psi[i].arg() - state.psi[i - 1].arg();
            d -= (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            phase += d;
            s[i] = phase;
        }
    }
    let s: Vec<f64> = s.into_iter().map(|p| p * state.hbar).collect();
    let grid = state.axes[0];
    Ok(MadelungPair {
        rho: ScalarFieldGrid::new(grid, rho),
        s: ScalarFieldGrid::with_mask(grid, s, mask),
        hbar: state.hbar,
    })
}

/// Clamped drift inside a masked run: `B_MAX` towards the nearer valid edge
/// (runs touching the grid boundary push inwards).
fn clamp_direction(mask: &[bool], i: usize) -> f64 {
    let n = mask.len();
    let left = (0..i).rev().find(|&j| mask[j]);
    let right = (i + 1..n).find(|&j| mask[j]);
    match (left, right) {
        (Some(l), Some(r)) => {
            if i - l <= r - i {
                -1.0
            } else {
                1.0
            }
        }
        (Some(_), None) => -1.0,
        (None, Some(_)) => 1.0,
        (None, None) => 0.0,
    }
}

pub fn nelson_drift(pair: &MadelungPair, m: f64, hbar: f64) -> Result<DriftField> {
    if !(m > 0.0) || !(hbar > 0.0) {
        return Err(Error::invalid("mass and hbar must be positive"));
    }
    let grid = pair.rho.grid;
    let mask = pair.s.mask.clone();
    let log_rho: Vec<f64> = pair.rho.values.iter().map(|r| r.max(f64::MIN_POSITIVE).ln()).collect();
    let ds = derivative(&pair.s.values, &mask, grid.dx);
    let dl = derivative(&log_rho, &mask, grid.dx);
    let b: Vec<f64> = (0..mask.len())
        .map(|i| match (ds[i], dl[i]) {
            (Some(ds), Some(dl)) => ds / m + hbar / (2.0 * m) * dl,
            _ => B_MAX * clamp_direction(&mask, i),
        })
        .collect();
    Ok(DriftField {
        b: ScalarFieldGrid::with_mask(grid, b, vec![true; mask.len()]),
        valid_mask: mask,
    })
}

pub fn quantum_potential(rho: &ScalarFieldGrid, m: f64, hbar: f64) -> Result<ScalarFieldGrid> {
    if !(m > 0.0) || !(hbar > 0.0) {
        return Err(Error::invalid("mass and hbar must be positive"));
    }
    let mut mask = node_mask(&rho.values);
    for (k, ok) in mask.iter_mut().enumerate() {
        *ok &= rho.mask[k];
    }
    let root: Vec<f64> = rho.values.iter().map(|r| r.max(0.0).sqrt()).collect();
    let d2 = second_derivative(&root, &mask, rho.grid.dx);
    let mut q = vec![f64::NAN; root.len()];
    let mut qmask = vec![false; root.len()];
    for i in 0..root.len() {
        if let Some(d2) = d2[i] {
            q[i] = hbar * hbar / (2.0 * m) * d2 / root[i];
            qmask[i] = true;
        }
    }
    Ok(ScalarFieldGrid::with_mask(rho.grid, q, qmask))
}

/// `b = (hbar/m) (Re + Im)(psi'/psi)`: the drift from a wavefunction and its
/// gradient at one point.
#[inline]
pub fn drift_from_log_gradient(dlog: Complex64, m: f64, hbar: f64) -> f64 {
    hbar / m * (dlog.re + dlog.im)
}

/// Drift fields on a time grid, interpolated linearly in x and t.
#[derive(Clone, Debug)]
pub struct DriftSeries {
    pub times: Vec<f64>,
    pub fields: Vec<DriftField>,
}

impl DriftSeries {
    pub fn from_states(states: &[WavefunctionState]) -> Result<Self> {
        let mut times = Vec::with_capacity(states.len());
        let mut fields = Vec::with_capacity(states.len());
        for s in states {
            let pair = madelung_split(s)?;
            fields.push(nelson_drift(&pair, s.masses[0], s.hbar)?);
            times.push(s.t);
        }
        if times.is_empty() {
            return Err(Error::invalid("empty drift series"));
        }
        Ok(Self { times, fields })
    }

    /// Drift at (x, t); outside the grid the field is clamped to point back
    /// inside.
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let at = |k: usize| {
            let f = &self.fields[k];
            match f.at(x) {
                Some(b) => b,
                None if x < f.b.grid.x0 => B_MAX,
                None => -B_MAX,
            }
        };
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return at(0);
        }
        if t >= self.times[n - 1] {
            return at(n - 1);
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        at(k) * (1.0 - w) + at(k + 1) * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_from(grid: Grid1, f: impl Fn(f64) -> Complex64) -> WavefunctionState {
        let psi = grid.points().into_iter().map(f).collect();
        let mut s = WavefunctionState::new(vec![grid], psi, vec![1.0], 1.0, 0.0).unwrap();
        s.normalize().unwrap();
        s
    }

    #[test]
    fn plane_wave_phase_is_linear() {
        let g = Grid1::periodic(0.0, 10.0, 200).unwrap();
        let p = 2.0 * std::f64::consts::TAU / 10.0;
        let st = state_from(g, |x| Complex64::from_polar(1.0, p * x));
        let pair = madelung_split(&st).unwrap();
        for i in 0..g.n {
            let s = pair.s.values[i];
            assert!((s - (p * g.point(i) + pair.s.values[0])).abs() < 1e-9);
        }
        let b = nelson_drift(&pair, 1.0, 1.0).unwrap();
        for i in 0..g.n {
            assert!((b.b.values[i] - p).abs() < 1e-6);
        }
    }

    #[test]
    fn ground_state_drift_and_potential() {
        let g = Grid1::periodic(-10.0, 20.0, 512).unwrap();
        let st = state_from(g, |x| Complex64::new((-x * x / 2.0).exp(), 0.0));
        let pair = madelung_split(&st).unwrap();
        let b = nelson_drift(&pair, 1.0, 1.0).unwrap();
        let q = quantum_potential(&pair.rho, 1.0, 1.0).unwrap();
        for i in 0..g.n {
            let x = g.point(i);
            if x.abs() < 4.0 {
                assert!((b.b.values[i] + x).abs() < 1e-5, "b at {x}");
                assert!((q.values[i] - (x * x / 2.0 - 0.5)).abs() < 1e-4, "Q at {x}");
                assert!(pair.s.values[i].abs() < 1e-12);
            }
        }
        assert!((pair.rho.integral() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn first_excited_state_masks_the_node() {
        let g = Grid1::linspace(-8.0, 8.0, 1601).unwrap();
        let st = state_from(g, |x| Complex64::new(x * (-x * x / 2.0).exp(), 0.0));
        let pair = madelung_split(&st).unwrap();
        let i0 = 800;
        assert!(g.point(i0).abs() < 1e-12);
        assert!(!pair.valid_mask()[i0]);
        assert!(pair.valid_mask()[i0 + 10] && pair.valid_mask()[i0 - 10]);
        let b = nelson_drift(&pair, 1.0, 1.0).unwrap();
        // repelled from the node on both sides
        assert!(b.b.values[i0 + 3] > 0.0 && b.b.values[i0 - 3] < 0.0);
    }

    #[test]
    fn reconstruction_round_trip() {
        let g = Grid1::periodic(-10.0, 20.0, 400).unwrap();
        let st = state_from(g, |x| {
            Complex64::new((-x * x / 2.0).exp(), 0.0) * Complex64::from_polar(1.0, 0.7 * x * x + 2.0 * x)
        });
        let pair = madelung_split(&st).unwrap();
        let back = pair.reconstruct();
        for i in 0..g.n {
            if pair.valid_mask()[i] {
                assert!((back[i] - st.psi[i]).norm() < 1e-8);
            }
        }
    }
}
