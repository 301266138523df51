//! Small statistical helpers: moments, fits and classical tests.

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

/// Standard error of the sample variance, from the fourth central moment.
pub fn variance_stderr(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2) / n).max(0.0).sqrt()
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(&xs[..n]), mean(&ys[..n]));
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1) as f64
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(n - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Result of a weighted straight-line fit `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
}

/// Weighted least squares. With inverse-variance weights the standard errors
/// are the usual ones; otherwise they are scaled by the residual variance.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64], inverse_variance: bool) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return Err(Error::invalid("line fit needs at least two matching points"));
    }
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let xm = sx / sw;
    let ym = sy / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("line fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let scale = if inverse_variance {
        1.0
    } else if n > 2 {
        let rss: f64 = (0..n)
            .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
            .sum();
        rss / (n - 2) as f64
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_stderr: (scale / sxx).sqrt(),
        intercept_stderr: (scale * (1.0 / sw + xm * xm / sxx)).sqrt(),
    })
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("KS test needs non-empty samples"));
    }
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok((d, kolmogorov_sf(lambda)))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-way ANOVA over groups; returns (F, p).
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    if k < 2 || n <= k {
        return Err(Error::invalid("ANOVA needs at least two non-empty groups"));
    }
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in &groups {
        let m = mean(g);
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let (d1, d2) = ((k - 1) as f64, (n - k) as f64);
    let f = (ssb / d1) / (ssw / d2);
    let dist = FisherSnedecor::new(d1, d2).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((f, 1.0 - dist.cdf(f)))
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(stat: f64, dof: f64) -> Result<f64> {
    let dist = ChiSquared::new(dof).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(1.0 - dist.cdf(stat))
}

/// Delete-group jackknife standard error of a statistic.
///
/// `stat(g)` evaluates the statistic with group `g` removed, for `g` in
/// `0..groups`.
pub fn jackknife_stderr(groups: usize, stat: impl Fn(usize) -> f64) -> f64 {
    let vals: Vec<f64> = (0..groups).map(stat).filter(|v| v.is_finite()).collect();
    let g = vals.len();
    if g < 2 {
        return f64::NAN;
    }
    let m = mean(&vals);
    ((g - 1) as f64 / g as f64 * vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
}

/// Jackknife group of trajectory `i` among `n`, in contiguous blocks.
#[inline]
pub fn group_of(i: usize, n: usize, groups: usize) -> usize {
    (i * groups / n.max(1)).min(groups - 1)
}

/// Lagged autocovariance of a stationary series, lags `0..=max_lag`.
pub fn autocovariance(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|lag| {
            (0..n - lag)
                .map(|i| (xs[i] - m) * (xs[i + lag] - m))
                .sum::<f64>()
                / (n - lag) as f64
        })
        .collect()
}

/// Fits `c(τ) = amplitude * exp(-rate * τ)` by a line fit of `log c` on the
/// lags where the autocovariance is clearly positive.
pub fn fit_exponential_decay(lags: &[f64], cov: &[f64]) -> Result<(f64, f64)> {
    let c0 = cov.first().copied().unwrap_or(0.0);
    let pts: Vec<(f64, f64)> = lags
        .iter()
        .zip(cov)
        .take_while(|(_, &c)| c > 0.05 * c0)
        .map(|(&t, &c)| (t, c.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::invalid("too few positive lags for an exponential fit"));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let w: Vec<f64> = y.iter().map(|l| l.exp()).collect();
    let fit = weighted_line_fit(&x, &y, &w, false)?;
    Ok((fit.intercept.exp(), -fit.slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;

    #[test]
    fn line_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 2.0 - 0.5 * x).collect();
        let f = weighted_line_fit(&x, &y, &vec![1.0; 10], false).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ks_same_and_shifted() {
        let mut s = NoiseStream::new(1, 0);
        let a: Vec<f64> = (0..5000).map(|_| s.normal()).collect();
        let b: Vec<f64> = (0..5000).map(|_| s.normal()).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &b).unwrap().1 > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().1 < 1e-6);
    }

    #[test]
    fn anova_detects_shift() {
        let mut s = NoiseStream::new(2, 0);
        let g: Vec<Vec<f64>> = (0..4).map(|_| (0..500).map(|_| s.normal()).collect()).collect();
        assert!(anova_oneway(&g).unwrap().1 > 0.001);
        let mut h = g.clone();
        h[0].iter_mut().for_each(|x| *x += 1.0);
        assert!(anova_oneway(&h).unwrap().1 < 1e-10);
    }

    #[test]
    fn chi_square_tail() {
        assert!((chi_square_sf(3.841458820694124, 1.0).unwrap() - 0.05).abs() < 1e-9);
    }

    #[test]
    fn exponential_fit() {
        let lags: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        let cov: Vec<f64> = lags.iter().map(|t| 5.0 * (-10.0 * t).exp()).collect();
        let (a, r) = fit_exponential_decay(&lags, &cov).unwrap();
        assert!((a - 5.0).abs() < 1e-9 && (r - 10.0).abs() < 1e-9);
    }
}
