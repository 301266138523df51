//! Multivariate Gaussian wavefunctions
//! `psi = N exp((i/hbar)[(x-q)^T Z (x-q)/2 + p^T (x-q)])` with symmetric
//! complex `Z`, `Im Z` positive definite.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Per-coordinate quadratic Hamiltonian `p^2/2m + m omega^2 x^2 / 2`
/// (`omega == 0` is a free particle).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Oscillator {
    pub mass: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub z: DMatrix<Complex64>,
    pub q: DVector<f64>,
    pub p: DVector<f64>,
    pub masses: Vec<f64>,
    pub hbar: f64,
}

fn re(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    m.map(|z| z.re)
}

fn im(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    m.map(|z| z.im)
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

impl GaussianState {
    pub fn new(z: DMatrix<Complex64>, q: Vec<f64>, p: Vec<f64>, masses: Vec<f64>, hbar: f64) -> Result<Self> {
        let n = masses.len();
        if z.nrows() != n || z.ncols() != n || q.len() != n || p.len() != n {
            return Err(Error::invalid("Gaussian state dimensions disagree"));
        }
        if !(hbar > 0.0) || masses.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("hbar and masses must be positive"));
        }
        if im(&z).cholesky().is_none() {
            return Err(Error::invalid("Im Z must be positive definite"));
        }
        Ok(Self {
            z,
            q: DVector::from_vec(q),
            p: DVector::from_vec(p),
            masses,
            hbar,
        })
    }

    /// One-dimensional packet with position variance `sigma^2`.
    pub fn packet(sigma: f64, q: f64, p: f64, mass: f64, hbar: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("packet width must be positive"));
        }
        let z = DMatrix::from_element(1, 1, Complex64::new(0.0, hbar / (2.0 * sigma * sigma)));
        Self::new(z, vec![q], vec![p], vec![mass], hbar)
    }

    pub fn dim(&self) -> usize {
        self.masses.len()
    }

    /// Position covariance `(2 Im Z / hbar)^{-1}`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let prec = im(&self.z) * (2.0 / self.hbar);
        prec.try_inverse().expect("Im Z is positive definite")
    }

    /// Symmetrised `<x_i p_j>` cross moments (centered): `Sigma Re Z`.
    pub fn position_momentum(&self) -> DMatrix<f64> {
        self.covariance() * re(&self.z)
    }

    fn normalization(&self) -> f64 {
        let a = im(&self.z) / (std::f64::consts::PI * self.hbar);
        a.determinant().powf(0.25)
    }

    pub fn psi(&self, x: &[f64]) -> Complex64 {
        let y = DVector::from_iterator(self.dim(), x.iter().zip(self.q.iter()).map(|(a, b)| a - b));
        let yc = complexify(&DMatrix::from_column_slice(self.dim(), 1, y.as_slice()));
        let quad = (yc.transpose() * &self.z * &yc)[(0, 0)];
        let lin: f64 = self.p.dot(&y);
        let phase = (quad * 0.5 + lin) * Complex64::new(0.0, 1.0 / self.hbar);
        phase.exp() * self.normalization()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.psi(x).norm_sqr()
    }

    /// `grad psi / psi = (i/hbar)(Z (x-q) + p)`.
    pub fn log_gradient(&self, x: &[f64]) -> Vec<Complex64> {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let mut s = Complex64::new(self.p[i], 0.0);
                for j in 0..n {
                    s += self.z[(i, j)] * (x[j] - self.q[j]);
                }
                s * Complex64::new(0.0, 1.0 / self.hbar)
            })
            .collect()
    }

    /// Nelson drift `M^{-1}[(Re Z - Im Z)(x - q) + p]`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = self.p[i];
            for j in 0..n {
                let z = self.z[(i, j)];
                s += (z.re - z.im) * (x[j] - self.q[j]);
            }
            out[i] = s / self.masses[i];
        }
    }

    /// Linear part of the drift, `M^{-1}(Re Z - Im Z)`.
    pub fn drift_matrix(&self) -> DMatrix<f64> {
        let mut m = re(&self.z) - im(&self.z);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                m[(i, j)] /= self.masses[i];
            }
        }
        m
    }

    /// Exact evolution for time `t` under decoupled quadratic Hamiltonians.
    pub fn evolve(&self, osc: &[Oscillator], t: f64) -> Result<Self> {
        let n = self.dim();
        if osc.len() != n {
            return Err(Error::invalid("one oscillator per coordinate is required"));
        }
        let mut c = DMatrix::<f64>::zeros(n, n);
        let mut s1 = DMatrix::<f64>::zeros(n, n);
        let mut s2 = DMatrix::<f64>::zeros(n, n);
        for (i, o) in osc.iter().enumerate() {
            if o.omega == 0.0 {
                c[(i, i)] = 1.0;
                s1[(i, i)] = t / o.mass;
            } else {
                let (s, co) = (o.omega * t).sin_cos();
                c[(i, i)] = co;
                s1[(i, i)] = s / (o.mass * o.omega);
                s2[(i, i)] = o.mass * o.omega * s;
            }
        }
        let (cc, s1c, s2c) = (complexify(&c), complexify(&s1), complexify(&s2));
        let num = &cc * &self.z - &s2c;
        let den = &cc + &s1c * &self.z;
        let inv = den
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular Gaussian propagation"))?;
        let mut z = num * inv;
        // keep Z exactly symmetric
        let zt = z.transpose();
        z = (z + zt) * Complex64::new(0.5, 0.0);
        let q = &c * &self.q + &s1 * &self.p;
        let p = &c * &self.p - &s2 * &self.q;
        Ok(Self {
            z,
            q,
            p,
            masses: self.masses.clone(),
            hbar: self.hbar,
        })
    }

    /// Multiplies by the window `exp(-(x_k - center)^2 / (4 w^2))` (a density
    /// window of standard deviation `w`) and renormalizes.
    pub fn collapse(&self, k: usize, center: f64, width: f64) -> Result<Self> {
        let n = self.dim();
        if k >= n || !(width > 0.0) {
            return Err(Error::invalid("bad collapse coordinate or width"));
        }
        let i = Complex64::new(0.0, 1.0);
        let a = i * (self.hbar / (2.0 * width * width));
        let mut z = self.z.clone();
        z[(k, k)] += a;
        // linear coefficient l = p - Z q, then the window's contribution
        let qc = complexify(&DMatrix::from_column_slice(n, 1, self.q.as_slice()));
        let pc = complexify(&DMatrix::from_column_slice(n, 1, self.p.as_slice()));
        let mut l = pc - &self.z * qc;
        l[(k, 0)] -= a * center;
        let iz = im(&z)
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular collapsed state"))?;
        let l_im = DVector::from_iterator(n, l.iter().map(|v| v.im));
        let l_re = DVector::from_iterator(n, l.iter().map(|v| v.re));
        let q = -(&iz * l_im);
        let p = l_re + re(&z) * &q;
        Ok(Self {
            z,
            q,
            p,
            masses: self.masses.clone(),
            hbar: self.hbar,
        })
    }

    /// Lower Cholesky factor of the position covariance.
    pub fn sampling_factor(&self) -> DMatrix<f64> {
        self.covariance()
            .cholesky()
            .expect("covariance is positive definite")
            .l()
    }
}

/// Principal square root of a symmetric positive definite matrix.
pub fn sqrtm_spd(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = k.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("matrix is not positive definite"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}
