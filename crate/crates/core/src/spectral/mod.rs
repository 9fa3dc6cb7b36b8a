//! Exact linear algebra on small tori: the generator matrix, its spectral
//! resolution, spectral measures of site fields, and the closed forms that
//! serve as oracles for the Monte Carlo estimates.

pub mod eigen;

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::corrector::{solve_corrector, v_mu_field, SolverOptions};
use crate::env::{check_xi, Direction, Environment, EnvironmentSpec, FieldScalar};
use crate::error::{Error, Result};
use crate::reduce;
use crate::rng::derive_seed;
use crate::stats::{rate_fit, RateFit};

pub use eigen::{cholesky_solve, eigen_project, SymmetricEigen};

/// Largest torus handled by the dense path.
pub const MAX_DENSE_SITES: usize = 4096;

/// Dense `L^w` on the torus, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    pub dim: usize,
    pub entries: Vec<f64>,
}

pub fn build_generator(env: &Environment) -> Result<GeneratorMatrix> {
    let n = env.n_sites();
    if n > MAX_DENSE_SITES {
        return Err(Error::Capacity(format!(
            "{n} sites exceed the dense budget of {MAX_DENSE_SITES}; use the Monte Carlo commands for this torus"
        )));
    }
    let t = env.torus();
    let mut q = vec![0.0; n * n];
    for x in 0..n {
        for axis in 0..env.d() {
            let y = t.neighbor(x, Direction::plus(axis));
            let w = env.edge(x, axis);
            q[x * n + y] += w;
            q[y * n + x] += w;
        }
    }
    for x in 0..n {
        let row = &mut q[x * n..(x + 1) * n];
        row[x] = 0.0;
        let s: f64 = row.iter().sum();
        row[x] = -s;
    }
    Ok(GeneratorMatrix { dim: n, entries: q })
}

impl GeneratorMatrix {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.entries[x * self.dim + y]
    }

    /// Sum of row `x`, off-diagonal entries first.
    pub fn row_sum(&self, x: usize) -> f64 {
        let row = &self.entries[x * self.dim..(x + 1) * self.dim];
        let off: f64 = row.iter().enumerate().filter(|(y, _)| *y != x).map(|(_, v)| v).sum();
        off + row[x]
    }

    pub fn negated(&self) -> Vec<f64> {
        self.entries.iter().map(|v| -v).collect()
    }

    /// `(Q f)(x)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|x| {
                let row = &self.entries[x * self.dim..(x + 1) * self.dim];
                row.iter().zip(f).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn spectral_scale(&self) -> f64 {
        (0..self.dim).fold(0.0f64, |m, x| m.max(self.get(x, x).abs())).max(1.0)
    }
}

/// Eigenvalues of `-Q` below this multiple of the matrix scale are rounding
/// noise around zero.
const ZERO_TOL: f64 = 1e-10;

fn clean_spectrum(values: &mut [f64], scale: f64) -> Result<()> {
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -ZERO_TOL * scale {
                return Err(Error::Numerical(format!(
                    "generator has a positive eigenvalue {:e} (matrix scale {scale:e})",
                    -*v
                )));
            }
            *v = 0.0;
        }
    }
    Ok(())
}

fn eigen_failure(q: &GeneratorMatrix, e: Error) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "{msg}; dimension {}, diagonal range [{:e}, {:e}]",
            q.dim,
            (0..q.dim).map(|x| -q.get(x, x)).fold(f64::INFINITY, f64::min),
            (0..q.dim).map(|x| -q.get(x, x)).fold(0.0, f64::max)
        )),
        other => other,
    }
}

/// `-Q = sum_i lambda_i u_i u_i^T` with Euclidean-orthonormal `u_i`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigen: SymmetricEigen,
}

impl SpectralDecomposition {
    pub fn new(q: &GeneratorMatrix) -> Result<Self> {
        let mut eigen = SymmetricEigen::new(&q.negated(), q.dim).map_err(|e| eigen_failure(q, e))?;
        clean_spectrum(&mut eigen.values, q.spectral_scale())?;
        Ok(Self { eigen })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.eigen.values
    }

    /// `e^{tQ} f`.
    pub fn evolve(&self, f: &[f64], t: f64) -> Vec<f64> {
        let n = self.eigen.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let u = self.eigen.vector(i);
            let c: f64 = u.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() * (-self.eigen.values[i] * t).exp();
            for (o, ui) in out.iter_mut().zip(u) {
                *o += c * ui;
            }
        }
        out
    }
}

/// The spectral measure of `-Q` projected on a site field, normalized by
/// the uniform probability on the torus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralMeasure {
    pub lambdas: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn spectral_measure(q: &GeneratorMatrix, f: &FieldScalar) -> Result<SpectralMeasure> {
    if f.len() != q.dim {
        return Err(Error::usage(format!(
            "field has {} sites but the generator has dimension {}",
            f.len(),
            q.dim
        )));
    }
    let (mut lambdas, coords) =
        eigen_project(&q.negated(), q.dim, &[&f.values]).map_err(|e| eigen_failure(q, e))?;
    clean_spectrum(&mut lambdas, q.spectral_scale())?;
    let n = q.dim as f64;
    let weights = coords.iter().map(|c| c * c / n).collect();
    Ok(SpectralMeasure { lambdas, weights })
}

impl SpectralMeasure {
    pub fn total_mass(&self) -> f64 {
        reduce::pairwise_sum(&self.weights)
    }

    /// CSV `lambda,weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lambda,weight")?;
        for (l, x) in self.lambdas.iter().zip(&self.weights) {
            writeln!(w, "{l},{x}")?;
        }
        Ok(())
    }
}

/// `[1 - e^{-lt} + mu^2 (e^{-lt} - 1 + lt)/l^2]`, with series for small `lt`.
fn remainder_bracket(lambda: f64, mu: f64, t: f64) -> f64 {
    let x = lambda * t;
    let (a, b) = if x < 1e-6 {
        (x - 0.5 * x * x, 0.5 * t * t - lambda * t * t * t / 6.0)
    } else if x < 0.5 {
        // (e^{-x} - 1 + x)/x^2 = sum_k (-x)^k/(k+2)!, still cancelling directly
        let mut term: f64 = 0.5;
        let mut sum = 0.5;
        let mut k = 0.0;
        while term.abs() > 1e-18 * sum {
            k += 1.0;
            term *= -x / (k + 2.0);
            sum += term;
        }
        (-(-x).exp_m1(), sum * t * t)
    } else {
        (-(-x).exp_m1(), ((-x).exp_m1() + x) / (lambda * lambda))
    };
    a + mu * mu * b
}

/// `E[R_mu(t)^2] = 2 int (l+mu)^{-2} [...] de(l)` under the stationary start.
pub fn remainder_second_moment_exact(sm: &SpectralMeasure, mu: f64, t: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::usage(format!("mu must be positive, got {mu}")));
    }
    if !(t >= 0.0) {
        return Err(Error::usage(format!("t must be nonnegative, got {t}")));
    }
    let terms: Vec<f64> = sm
        .lambdas
        .iter()
        .zip(&sm.weights)
        .map(|(&l, &w)| 2.0 * w / ((l + mu) * (l + mu)) * remainder_bracket(l, mu, t))
        .collect();
    Ok(reduce::pairwise_sum(&terms))
}

/// `E[phi_mu^2] = int (l+mu)^{-2} de(l)`.
pub fn phi_second_moment_exact(sm: &SpectralMeasure, mu: f64) -> f64 {
    let terms: Vec<f64> = sm
        .lambdas
        .iter()
        .zip(&sm.weights)
        .map(|(&l, &w)| w / ((l + mu) * (l + mu)))
        .collect();
    reduce::pairwise_sum(&terms)
}

/// `e^{tQ} f` on the torus.
pub fn semigroup_evolve(q: &GeneratorMatrix, f: &FieldScalar, t: f64) -> Result<FieldScalar> {
    if !(t >= 0.0) {
        return Err(Error::usage(format!("t must be nonnegative, got {t}")));
    }
    let dec = SpectralDecomposition::new(q)?;
    Ok(FieldScalar::new(dec.evolve(&f.values, t), format!("{} evolved to t={t}", f.label)))
}

/// Corrector by a dense Cholesky solve of `(mu - Q) phi = drift`.
pub fn dense_corrector(env: &Environment, mu: f64, xi: &[f64]) -> Result<Vec<f64>> {
    check_xi(xi, env.d())?;
    let q = build_generator(env)?;
    let n = q.dim;
    let mut a = q.negated();
    for x in 0..n {
        a[x * n + x] += mu;
    }
    cholesky_solve(&a, n, &env.drift_field(xi)?.values)
}

/// Spatial variance of `e^{tQ} v_mu` across an ensemble of tori.
#[derive(Debug, Clone, Serialize)]
pub struct DecayCurve {
    pub mu: f64,
    pub t_grid: Vec<f64>,
    pub n_env: usize,
    pub env_seeds: Vec<u64>,
    /// `per_env[k][j]` at `t_grid[j]`.
    pub per_env: Vec<Vec<f64>>,
    pub var_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Smallest positive eigenvalue of `-Q` per environment.
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
    /// `1 / (2 mean_gap)`: beyond it the decay is dominated by the gap.
    pub knee: f64,
    /// Grid points `0 < t <= knee` used for the fit.
    pub fit_window: Vec<f64>,
    pub fit: Option<RateFit>,
    /// Delete-one-environment jackknife error of the fitted slope.
    pub slope_se: Option<f64>,
    /// Every per-environment curve is non-increasing on the grid.
    pub monotone: bool,
}

/// Evolves the centered `v_mu` of `n_env` environments (seeds derived from
/// `master_seed`) along `t_grid`.
pub fn variance_decay_curve(
    spec: &EnvironmentSpec,
    n_env: usize,
    mu: f64,
    t_grid: &[f64],
    master_seed: u64,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<DecayCurve> {
    spec.validate()?;
    check_xi(xi, spec.d)?;
    if n_env == 0 {
        return Err(Error::config("n_env", "must be positive"));
    }
    if spec.n_sites() > MAX_DENSE_SITES {
        return Err(Error::Capacity(format!(
            "{} sites exceed the dense budget of {MAX_DENSE_SITES}",
            spec.n_sites()
        )));
    }
    if let Some(t) = t_grid.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::config("t", format!("times must be nonnegative, got {t}")));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("t", "time grid must be strictly increasing"));
    }
    let env_seeds: Vec<u64> = (0..n_env as u64).map(|k| derive_seed(master_seed, k)).collect();
    let results: Vec<Result<(Vec<f64>, f64)>> = env_seeds
        .par_iter()
        .with_max_len(1)
        .map(|&seed| {
            let env = Environment::generate(&spec.with_seed(seed))?;
            let corr = solve_corrector(&env, mu, xi, opts).map_err(|e| attach_seed(e, seed))?;
            let v = v_mu_field(&env, &corr)?.centered();
            let q = build_generator(&env)?;
            let sm = spectral_measure(&q, &v)?;
            let gap = sm
                .lambdas
                .iter()
                .copied()
                .find(|&l| l > ZERO_TOL * q.spectral_scale())
                .unwrap_or(0.0);
            let curve = t_grid
                .iter()
                .map(|&t| {
                    let terms: Vec<f64> = sm
                        .lambdas
                        .iter()
                        .zip(&sm.weights)
                        .map(|(&l, &w)| w * (-2.0 * l * t).exp())
                        .collect();
                    reduce::pairwise_sum(&terms)
                })
                .collect();
            Ok((curve, gap))
        })
        .collect();
    let mut per_env = Vec::with_capacity(n_env);
    let mut gaps = Vec::with_capacity(n_env);
    for r in results {
        let (c, g) = r?;
        per_env.push(c);
        gaps.push(g);
    }
    let mut var_hat = Vec::with_capacity(t_grid.len());
    let mut stderr = Vec::with_capacity(t_grid.len());
    for j in 0..t_grid.len() {
        let col: Vec<f64> = per_env.iter().map(|c| c[j]).collect();
        let (m, se) = reduce::mean_stderr(&col);
        var_hat.push(m);
        stderr.push(se);
    }
    let monotone = per_env
        .iter()
        .all(|c| c.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-300));
    let mean_gap = reduce::mean(&gaps);
    let knee = if mean_gap > 0.0 { 0.5 / mean_gap } else { f64::INFINITY };
    let window: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(&var_hat)
        .filter(|(t, _)| **t > 0.0 && **t <= knee)
        .map(|(t, v)| (*t, *v))
        .collect();
    let fit = if window.len() >= 2 && window.iter().all(|p| p.1 > 0.0) {
        Some(rate_fit(&window)?)
    } else {
        None
    };
    let window_idx: Vec<usize> = (0..t_grid.len())
        .filter(|&j| t_grid[j] > 0.0 && t_grid[j] <= knee)
        .collect();
    let slope_se = match fit {
        Some(_) if n_env >= 2 => {
            let loo: Vec<f64> = (0..n_env)
                .map(|skip| {
                    let pts: Vec<(f64, f64)> = window_idx
                        .iter()
                        .map(|&j| {
                            let rest: Vec<f64> = (0..n_env).filter(|&k| k != skip).map(|k| per_env[k][j]).collect();
                            (t_grid[j], reduce::mean(&rest))
                        })
                        .collect();
                    rate_fit(&pts).map(|f| f.slope)
                })
                .collect::<Result<_>>()?;
            Some(crate::stats::jackknife_se(&loo))
        }
        _ => None,
    };
    Ok(DecayCurve {
        mu,
        t_grid: t_grid.to_vec(),
        n_env,
        env_seeds,
        per_env,
        var_hat,
        stderr,
        gaps,
        mean_gap,
        knee,
        fit_window: window.iter().map(|p| p.0).collect(),
        fit,
        slope_se,
        monotone,
    })
}

pub(crate) fn attach_seed(e: Error, seed: u64) -> Error {
    match e {
        Error::Convergence {
            iterations,
            residual,
            ..
        } => Error::Convergence {
            iterations,
            residual,
            env_seed: Some(seed),
        },
        other => other,
    }
}

impl DecayCurve {
    /// CSV `t,var_hat,n_env,mu`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,var_hat,n_env,mu")?;
        for (t, v) in self.t_grid.iter().zip(&self.var_hat) {
            writeln!(w, "{t},{v},{},{}", self.n_env, self.mu)?;
        }
        Ok(())
    }
}
