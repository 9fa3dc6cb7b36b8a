//! Normal distribution function, Kolmogorov distance, log-log rate fits
//! and jackknife standard errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// `erfc(z)`, accurate to about `1e-16` absolute.
pub fn erfc(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z.abs() < 3.0 {
        1.0 - erf_series(z)
    } else if z > 0.0 {
        erfc_continued_fraction(z)
    } else {
        2.0 - erfc_continued_fraction(-z)
    }
}

pub fn erf(z: f64) -> f64 {
    if z.abs() < 3.0 {
        erf_series(z)
    } else {
        1.0 - erfc(z)
    }
}

/// `erf(z) = 2/sqrt(pi) e^{-z^2} sum_n 2^n z^{2n+1} / (2n+1)!!`.
fn erf_series(z: f64) -> f64 {
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * z2 / (2.0 * n + 1.0);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 * FRAC_1_SQRT_PI * (-z2).exp() * sum
}

/// `erfc(z) = e^{-z^2}/sqrt(pi) / (z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))`
/// for `z >= 3`, evaluated bottom-up.
fn erfc_continued_fraction(z: f64) -> f64 {
    let mut tail = z;
    for k in (1..=80).rev() {
        tail = z + (k as f64 / 2.0) / tail;
    }
    FRAC_1_SQRT_PI * (-z * z).exp() / tail
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `sup_x |F_n(x) - Phi(x)|` for the empirical distribution of `samples`.
pub fn ks_distance(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("Kolmogorov distance of an empty sample"));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::usage("Kolmogorov distance of a sample containing NaN"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(ks_sorted(&xs))
}

/// As [`ks_distance`] for data already in ascending order.
pub fn ks_sorted(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let phi = normal_cdf(x);
        let above = (i + 1) as f64 / n - phi;
        let below = phi - i as f64 / n;
        worst = worst.max(above).max(below);
    }
    worst
}

/// Ordinary least squares of `log y` on `log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl RateFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(Error::usage("a rate fit needs at least two points"));
    }
    if let Some((x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::usage(format!(
            "rate fit needs positive finite values, got ({x}, {y})"
        )));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = reduce::mean(&lx);
    let my = reduce::mean(&ly);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in lx.iter().zip(&ly) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::usage("rate fit needs at least two distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(RateFit {
        slope,
        intercept,
        r2,
    })
}

/// Delete-one-group jackknife standard error, given the estimate with each
/// of `groups` groups left out.
pub fn jackknife_se(leave_one_out: &[f64]) -> f64 {
    let g = leave_one_out.len();
    if g < 2 {
        return 0.0;
    }
    let m = reduce::mean(leave_one_out);
    let dev: Vec<f64> = leave_one_out.iter().map(|t| (t - m) * (t - m)).collect();
    ((g - 1) as f64 / g as f64 * reduce::pairwise_sum(&dev)).sqrt()
}

/// Per-group sums of several per-sample quantities, from which
/// leave-one-group-out means are cheap.
#[derive(Debug, Clone)]
pub struct GroupedSums {
    /// `sums[g][q]`.
    pub sums: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub totals: Vec<f64>,
    pub total_count: usize,
}

impl GroupedSums {
    /// `values(i)` gives the quantities of sample `i`, `group(i)` its group.
    pub fn new(
        n_samples: usize,
        n_groups: usize,
        n_quantities: usize,
        group: impl Fn(usize) -> usize,
        values: impl Fn(usize, &mut [f64]),
    ) -> Self {
        let mut sums = vec![vec![0.0; n_quantities]; n_groups];
        let mut counts = vec![0; n_groups];
        let mut buf = vec![0.0; n_quantities];
        for i in 0..n_samples {
            let g = group(i);
            values(i, &mut buf);
            for (s, v) in sums[g].iter_mut().zip(&buf) {
                *s += v;
            }
            counts[g] += 1;
        }
        let totals = (0..n_quantities)
            .map(|q| reduce::pairwise_sum(&sums.iter().map(|s| s[q]).collect::<Vec<_>>()))
            .collect();
        Self {
            sums,
            counts,
            totals,
            total_count: n_samples,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.counts.len()
    }

    pub fn mean(&self, q: usize) -> f64 {
        self.totals[q] / self.total_count as f64
    }

    /// Mean of quantity `q` without group `g`.
    pub fn mean_without(&self, g: usize, q: usize) -> f64 {
        (self.totals[q] - self.sums[g][q]) / (self.total_count - self.counts[g]) as f64
    }

    /// Jackknife standard error of `stat(means)` where `means[q]` is the
    /// mean of quantity `q`.
    pub fn jackknife<F: Fn(&[f64]) -> f64>(&self, stat: F) -> (f64, f64) {
        let nq = self.totals.len();
        let full: Vec<f64> = (0..nq).map(|q| self.mean(q)).collect();
        let loo: Vec<f64> = (0..self.n_groups())
            .filter(|&g| self.counts[g] < self.total_count)
            .map(|g| {
                let m: Vec<f64> = (0..nq).map(|q| self.mean_without(g, q)).collect();
                stat(&m)
            })
            .collect();
        (stat(&full), jackknife_se(&loo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, StreamRng};
    use proptest::prelude::*;

    #[test]
    fn cdf_reference_values() {
        let cases = [
            (0.0, 0.5),
            (1.0, 0.841_344_746_068_542_9),
            (-1.96, 0.024_997_895_148_220_435),
            (3.0, 0.998_650_101_968_369_9),
            (-5.0, 2.866_515_718_791_939e-7),
            (-8.0, 6.220_960_574_271_785e-16),
            (2.5, 0.993_790_334_674_223_8),
        ];
        for (x, p) in cases {
            assert!((normal_cdf(x) - p).abs() < 1e-15, "{x}: {} vs {p}", normal_cdf(x));
        }
        assert!((erfc(5.0) - 1.537_459_794_428_034_8e-12).abs() < 1e-25);
        assert_eq!(normal_cdf(f64::INFINITY), 1.0);
        assert_eq!(normal_cdf(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn cdf_matches_quadrature() {
        // composite Simpson on the density from -12
        let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let h = 1e-3;
        let mut x = -12.0;
        let mut acc = 0.0;
        while x < 6.0 - 1e-9 {
            acc += h / 6.0 * (density(x) + 4.0 * density(x + h / 2.0) + density(x + h));
            x += h;
            if ((x * 4.0).round() - x * 4.0).abs() < 1e-9 {
                assert!((normal_cdf(x) - acc).abs() < 1e-12, "at {x}");
            }
        }
    }

    #[test]
    fn cdf_continuous_at_branch_points() {
        for z in [3.0f64, -3.0] {
            let x = z * std::f64::consts::SQRT_2;
            let lo = normal_cdf(x - 1e-12);
            let hi = normal_cdf(x + 1e-12);
            assert!((hi - lo).abs() < 1e-14);
        }
    }

    #[test]
    fn ks_single_point() {
        assert_eq!(ks_distance(&[0.0]).unwrap(), 0.5);
        assert!(ks_distance(&[10.0; 7]).unwrap() >= 0.999);
        assert!(matches!(ks_distance(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn ks_of_normal_draws_within_dkw() {
        let mut rng = StreamRng::new(2024, Domain::Normal, [0, 0]);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                // Box-Muller
                let r = (-2.0 * rng.uniform_open0().ln()).sqrt();
                r * (2.0 * std::f64::consts::PI * rng.uniform()).cos()
            })
            .collect();
        let d = ks_distance(&xs).unwrap();
        assert!(d <= 2.0 / (n as f64).sqrt(), "{d}");
    }

    fn brute_force_ks(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut probes = sorted.clone();
        for w in sorted.windows(2) {
            probes.push(0.5 * (w[0] + w[1]));
        }
        probes.push(sorted[0] - 1.0);
        probes.push(sorted[sorted.len() - 1] + 1.0);
        let mut worst = 0.0f64;
        for &y in &probes {
            let at = xs.iter().filter(|&&x| x <= y).count() as f64 / n;
            let before = xs.iter().filter(|&&x| x < y).count() as f64 / n;
            let phi = normal_cdf(y);
            worst = worst.max((at - phi).abs()).max((before - phi).abs());
        }
        worst
    }

    proptest! {
        #[test]
        fn ks_matches_brute_force(xs in prop::collection::vec(-4.0f64..4.0, 1..100)) {
            let fast = ks_distance(&xs).unwrap();
            let slow = brute_force_ks(&xs);
            prop_assert!((fast - slow).abs() < 1e-14);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn ks_with_ties_matches_brute_force(xs in prop::collection::vec(-3i32..3, 1..60)) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            prop_assert!((ks_distance(&xs).unwrap() - brute_force_ks(&xs)).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 8.0, 100.0].iter().map(|&t: &f64| (t, t.powf(-0.2))).collect();
        let f = rate_fit(&pts).unwrap();
        assert!((f.slope + 0.2).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        let f = rate_fit(&[(1.0, 1.0), (10.0, 0.1)]).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-14);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = StreamRng::new(5, Domain::Normal, [1, 0]);
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let t = 2f64.powi(k);
                (t, 3.0 / t * (1.0 + 0.01 * (2.0 * rng.uniform() - 1.0)))
            })
            .collect();
        let f = rate_fit(&pts).unwrap();
        assert!((-1.03..=-0.97).contains(&f.slope), "{}", f.slope);
    }

    #[test]
    fn rate_fit_rejects_bad_input() {
        assert!(rate_fit(&[(1.0, 1.0)]).is_err());
        assert!(rate_fit(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
        assert!(rate_fit(&[(-1.0, 1.0), (2.0, 1.0)]).is_err());
        assert!(rate_fit(&[(2.0, 1.0), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn jackknife_of_mean_is_classical_stderr() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        let g = GroupedSums::new(xs.len(), xs.len(), 1, |i| i, |i, out| out[0] = xs[i]);
        let (m, se) = g.jackknife(|m| m[0]);
        let (m2, se2) = reduce::mean_stderr(&xs);
        assert!((m - m2).abs() < 1e-12);
        assert!((se - se2).abs() < 1e-12);
    }
}
