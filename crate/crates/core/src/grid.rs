//! Uniform 1-D grids, sampled fields and finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1 {
    pub x0: f64,
    pub dx: f64,
    pub n: usize,
}

impl Grid1 {
    /// `n` points from `a` to `b` inclusive.
    pub fn linspace(a: f64, b: f64, n: usize) -> Result<Self> {
        if n < 2 || !(b > a) {
            return Err(Error::invalid(format!("bad grid [{a}, {b}] with {n} points")));
        }
        Ok(Self {
            x0: a,
            dx: (b - a) / (n - 1) as f64,
            n,
        })
    }

    /// `n` points covering the periodic cell `[a, a + length)`.
    pub fn periodic(a: f64, length: f64, n: usize) -> Result<Self> {
        if n < 2 || !(length > 0.0) {
            return Err(Error::invalid(format!("bad periodic grid: length {length}, {n} points")));
        }
        Ok(Self {
            x0: a,
            dx: length / n as f64,
            n,
        })
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    pub fn x_max(&self) -> f64 {
        self.point(self.n - 1)
    }

    pub fn length(&self) -> f64 {
        self.dx * self.n as f64
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x0 && x <= self.x_max()
    }

    /// Linear interpolation; `None` outside the grid.
    pub fn interpolate(&self, values: &[f64], x: f64) -> Option<f64> {
        let s = (x - self.x0) / self.dx;
        if !(s >= 0.0) || s > (self.n - 1) as f64 {
            return None;
        }
        let i = (s.floor() as usize).min(self.n - 2);
        let w = s - i as f64;
        Some(values[i] * (1.0 - w) + values[i + 1] * w)
    }

    /// Trapezoid rule.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let n = values.len();
        if n < 2 {
            return 0.0;
        }
        self.dx * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
    }
}

/// A real function sampled on a grid; `mask[i] == false` marks points where
/// the value is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarFieldGrid {
    pub grid: Grid1,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalarFieldGrid {
    pub fn new(grid: Grid1, values: Vec<f64>) -> Self {
        let mask = values.iter().map(|v| v.is_finite()).collect();
        Self { grid, values, mask }
    }

    pub fn from_fn(grid: Grid1, f: impl Fn(f64) -> f64) -> Self {
        Self::new(grid, grid.points().into_iter().map(f).collect())
    }

    pub fn with_mask(grid: Grid1, values: Vec<f64>, mask: Vec<bool>) -> Self {
        Self { grid, values, mask }
    }

    pub fn integral(&self) -> f64 {
        let v: Vec<f64> = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        self.grid.integrate(&v)
    }

    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.integral();
        if !(mass > 0.0) {
            return Err(Error::invalid("cannot normalize a field with non-positive mass"));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(self)
    }

    pub fn at(&self, x: f64) -> Option<f64> {
        self.grid.interpolate(&self.values, x)
    }

    pub fn defined(&self, i: usize) -> Option<f64> {
        self.mask[i].then_some(self.values[i])
    }
}

/// A real function on a 2-D product grid, row-major (`values[i * ny + j]`
/// at `(x[i], y[j])`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarFieldGrid2 {
    pub x: Grid1,
    pub y: Grid1,
    pub values: Vec<f64>,
}

impl ScalarFieldGrid2 {
    pub fn new(x: Grid1, y: Grid1, values: Vec<f64>) -> Result<Self> {
        if values.len() != x.n * y.n {
            return Err(Error::invalid("2-D field size does not match its grid"));
        }
        Ok(Self { x, y, values })
    }

    pub fn from_fn(x: Grid1, y: Grid1, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(x.n * y.n);
        for i in 0..x.n {
            for j in 0..y.n {
                values.push(f(x.point(i), y.point(j)));
            }
        }
        Self { x, y, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y.n + j]
    }

    fn weight(n: usize, i: usize) -> f64 {
        if n > 1 && (i == 0 || i == n - 1) {
            0.5
        } else {
            1.0
        }
    }

    /// Trapezoid integral of `f(x, y) * value`.
    pub fn integrate_with(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.x.n {
            let wi = Self::weight(self.x.n, i);
            let xi = self.x.point(i);
            for j in 0..self.y.n {
                acc += wi * Self::weight(self.y.n, j) * self.at(i, j) * f(xi, self.y.point(j));
            }
        }
        acc * self.x.dx * self.y.dx
    }

    pub fn integral(&self) -> f64 {
        self.integrate_with(|_, _| 1.0)
    }

    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.integral();
        if !(mass > 0.0) {
            return Err(Error::invalid("cannot normalize a field with non-positive mass"));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(self)
    }

    /// Marginal over `x` (a function of `y`).
    pub fn marginal_y(&self) -> ScalarFieldGrid {
        let mut m = vec![0.0; self.y.n];
        for i in 0..self.x.n {
            let wi = Self::weight(self.x.n, i) * self.x.dx;
            for (j, mj) in m.iter_mut().enumerate() {
                *mj += wi * self.at(i, j);
            }
        }
        ScalarFieldGrid::new(self.y, m)
    }

    /// Marginal over `y` (a function of `x`).
    pub fn marginal_x(&self) -> ScalarFieldGrid {
        let m = (0..self.x.n)
            .map(|i| {
                (0..self.y.n)
                    .map(|j| Self::weight(self.y.n, j) * self.at(i, j))
                    .sum::<f64>()
                    * self.y.dx
            })
            .collect();
        ScalarFieldGrid::new(self.x, m)
    }
}

/// First derivative: 4th-order centered where the 5-point stencil lies in
/// the mask, lower order (centered or one-sided) near mask edges.
pub fn derivative(values: &[f64], mask: &[bool], dx: f64) -> Vec<Option<f64>> {
    let n = values.len();
    let ok = |i: isize| i >= 0 && (i as usize) < n && mask[i as usize];
    let f = |i: isize| values[i as usize];
    (0..n as isize)
        .map(|i| {
            if !ok(i) {
                return None;
            }
            if ok(i - 2) && ok(i - 1) && ok(i + 1) && ok(i + 2) {
                Some((-f(i + 2) + 8.0 * f(i + 1) - 8.0 * f(i - 1) + f(i - 2)) / (12.0 * dx))
            } else if ok(i - 1) && ok(i + 1) {
                Some((f(i + 1) - f(i - 1)) / (2.0 * dx))
            } else if ok(i + 1) && ok(i + 2) {
                Some((-3.0 * f(i) + 4.0 * f(i + 1) - f(i + 2)) / (2.0 * dx))
            } else if ok(i - 1) && ok(i - 2) {
                Some((3.0 * f(i) - 4.0 * f(i - 1) + f(i - 2)) / (2.0 * dx))
            } else {
                None
            }
        })
        .collect()
}

/// Second derivative with the same stencil policy as [`derivative`].
pub fn second_derivative(values: &[f64], mask: &[bool], dx: f64) -> Vec<Option<f64>> {
    let n = values.len();
    let ok = |i: isize| i >= 0 && (i as usize) < n && mask[i as usize];
    let f = |i: isize| values[i as usize];
    let h2 = dx * dx;
    (0..n as isize)
        .map(|i| {
            if !ok(i) {
                return None;
            }
            if ok(i - 2) && ok(i - 1) && ok(i + 1) && ok(i + 2) {
                Some(
                    (-f(i + 2) + 16.0 * f(i + 1) - 30.0 * f(i) + 16.0 * f(i - 1) - f(i - 2))
                        / (12.0 * h2),
                )
            } else if ok(i - 1) && ok(i + 1) {
                Some((f(i + 1) - 2.0 * f(i) + f(i - 1)) / h2)
            } else if ok(i + 1) && ok(i + 2) && ok(i + 3) {
                Some((2.0 * f(i) - 5.0 * f(i + 1) + 4.0 * f(i + 2) - f(i + 3)) / h2)
            } else if ok(i - 1) && ok(i - 2) && ok(i - 3) {
                Some((2.0 * f(i) - 5.0 * f(i - 1) + 4.0 * f(i - 2) - f(i - 3)) / h2)
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_of_polynomials() {
        let g = Grid1::linspace(-1.0, 1.0, 41).unwrap();
        let xs = g.points();
        let f: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        let mask = vec![true; xs.len()];
        let d = derivative(&f, &mask, g.dx);
        let d2 = second_derivative(&f, &mask, g.dx);
        for i in 2..xs.len() - 2 {
            assert!((d[i].unwrap() - 3.0 * xs[i] * xs[i]).abs() < 1e-12);
            assert!((d2[i].unwrap() - 6.0 * xs[i]).abs() < 1e-9);
        }
        // edges fall back to one-sided second-order stencils
        assert!((d[0].unwrap() - 3.0).abs() < 0.01);
    }

    #[test]
    fn mask_holes_are_respected() {
        let g = Grid1::linspace(0.0, 1.0, 11).unwrap();
        let f = g.points();
        let mut mask = vec![true; 11];
        mask[5] = false;
        let d = derivative(&f, &mask, g.dx);
        assert!(d[5].is_none());
        assert!((d[4].unwrap() - 1.0).abs() < 1e-12);
        assert!((d[6].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_and_integration() {
        let g = Grid1::linspace(0.0, 2.0, 201).unwrap();
        let f: Vec<f64> = g.points().iter().map(|x| 2.0 * x).collect();
        assert!((g.interpolate(&f, 0.503).unwrap() - 1.006).abs() < 1e-12);
        assert!(g.interpolate(&f, 2.1).is_none());
        assert!((g.integrate(&f) - 4.0).abs() < 1e-12);
    }
}
