//! Experiments built from the primitives: Kolmogorov distance of the
//! normalized displacement against the Berry-Esseen rates, the V/J
//! functionals of the Hall-Heyde bound, convergence of `sigma_mu`, spatial
//! averages, corrector moments, the 1D chi tail, and the remainder oracle.
//!
//! Every estimate carries a standard error. Unless stated otherwise these
//! are delete-one-environment jackknife errors, falling back to 16 blocks
//! of walks when a run has a single environment.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{sigma_mu_sq, solve_corrector, w_mu_field, CorrectorField, SolverOptions};
use crate::env::{check_xi, Distribution, Environment, EnvironmentSpec, FieldScalar};
use crate::error::{Error, Result};
use crate::reduce::{self, mean_stderr};
use crate::rng::{derive_seed, Domain, StreamRng};
use crate::spectral::{attach_seed, build_generator, remainder_second_moment_exact, spectral_measure};
use crate::stats::{ks_sorted, rate_fit, GroupedSums, RateFit};
use crate::walk::{run_monte_carlo, run_monte_carlo_on, McConfig, McRun, MartingaleSample};

/// Blocks used for jackknife errors when a run has one environment.
const FALLBACK_BLOCKS: usize = 16;

/// Group count and group of each sample for jackknife errors.
fn grouping(n_samples: usize, per_env: usize) -> (usize, usize) {
    let n_env = n_samples / per_env.max(1);
    if n_env >= 2 {
        (n_env, per_env)
    } else {
        let g = FALLBACK_BLOCKS.min(n_samples).max(1);
        (g, n_samples.div_ceil(g))
    }
}

/// `V` and `J` of the normalized martingale `M(s t) / (sigma sqrt t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VjEstimate {
    pub v_hat: f64,
    pub v_hat_se: f64,
    pub j_hat: f64,
    pub j_hat_se: f64,
    /// `(V + J)^{1/5}`.
    pub hh_raw: f64,
    pub hh_raw_se: f64,
}

/// `v_hat = mean[(qv/(s t) - 1)^2]`, `j_hat = mean[j4]/(s^2 t^2)` with
/// `s = sigma_mu_sq`. Samples are grouped in consecutive runs of
/// `per_env` for the jackknife.
pub fn estimate_v_j(
    samples: &[MartingaleSample],
    per_env: usize,
    t: f64,
    sigma_mu_sq: f64,
) -> Result<VjEstimate> {
    if !(sigma_mu_sq > 0.0) {
        return Err(Error::usage(format!("sigma_mu^2 must be positive, got {sigma_mu_sq}")));
    }
    if samples.is_empty() {
        return Err(Error::usage("no samples"));
    }
    if !(t > 0.0) {
        return Err(Error::usage(format!("t must be positive, got {t}")));
    }
    let (n_groups, size) = grouping(samples.len(), per_env);
    let norm_v = sigma_mu_sq * t;
    let norm_j = norm_v * norm_v;
    let g = GroupedSums::new(
        samples.len(),
        n_groups,
        2,
        |i| i / size,
        |i, out| {
            let s = &samples[i];
            out[0] = (s.qv / norm_v - 1.0).powi(2);
            out[1] = s.j4 / norm_j;
        },
    );
    let (v_hat, v_hat_se) = g.jackknife(|m| m[0]);
    let (j_hat, j_hat_se) = g.jackknife(|m| m[1]);
    let (hh_raw, hh_raw_se) = g.jackknife(|m| (m[0] + m[1]).powf(0.2));
    Ok(VjEstimate {
        v_hat,
        v_hat_se,
        j_hat,
        j_hat_se,
        hh_raw,
        hh_raw_se,
    })
}

/// One horizon of the CLT experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub t: f64,
    pub mu: f64,
    pub ks: f64,
    pub ks_se: f64,
    pub v_hat: f64,
    pub v_hat_se: f64,
    pub j_hat: f64,
    pub j_hat_se: f64,
    pub hh_raw: f64,
    pub hh_raw_se: f64,
    pub sigma_mu: f64,
    pub sigma_mu_se: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    /// `log ks` against `log t`.
    pub fit: RateFit,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,mu,ks,ks_se,v_hat,v_hat_se,j_hat,j_hat_se,hh_raw,hh_raw_se,sigma_mu,sigma_mu_se,n_samples"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.mu,
                r.ks,
                r.ks_se,
                r.v_hat,
                r.v_hat_se,
                r.j_hat,
                r.j_hat_se,
                r.hh_raw,
                r.hh_raw_se,
                r.sigma_mu,
                r.sigma_mu_se,
                r.n_samples
            )?;
        }
        Ok(())
    }

    /// Rows with `ks(t) > ks(t0) (t/t0)^exponent * slack`, `t0` the first
    /// horizon.
    pub fn bound_violations(&self, exponent: f64, slack: f64) -> Vec<f64> {
        let Some(first) = self.rows.first() else {
            return Vec::new();
        };
        self.rows[1..]
            .iter()
            .filter(|r| r.ks > first.ks * (r.t / first.t).powf(exponent) * slack)
            .map(|r| r.t)
            .collect()
    }
}

/// Monte Carlo sizes shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub n_env: usize,
    pub n_walks: usize,
    pub master_seed: u64,
}

/// Kolmogorov distance of `xdotxi / (sigma_hat sqrt t)`, with `sigma_hat^2`
/// the mean over environments of `sigma_mu^2`, plus jackknife error.
/// Returns `(ks, ks_se, sigma_hat^2, sigma_hat_se)`.
pub fn ks_of_run(run: &McRun) -> Result<(f64, f64, f64, f64)> {
    let t = run.config.horizon;
    if !(t > 0.0) {
        return Err(Error::usage("Kolmogorov distance needs a positive horizon"));
    }
    let (sigma2, _) = mean_stderr(&run.sigma_mu_sq);
    let normalized = |sigma2: f64, skip: Option<(usize, usize)>| {
        let scale = 1.0 / (sigma2 * t).sqrt();
        let mut xs: Vec<f64> = run
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| skip.is_none_or(|(lo, hi)| *i < lo || *i >= hi))
            .map(|(_, s)| s.xdotxi * scale)
            .collect();
        xs.sort_by(f64::total_cmp);
        xs
    };
    let ks = ks_sorted(&normalized(sigma2, None));
    let (n_groups, size) = grouping(run.samples.len(), run.n_walks());
    let per_env = run.n_env_groups() >= 2;
    let loo: Vec<f64> = (0..n_groups)
        .map(|g| {
            let lo = g * size;
            let hi = ((g + 1) * size).min(run.samples.len());
            let s2 = if per_env {
                let rest: Vec<f64> = run
                    .sigma_mu_sq
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != g)
                    .map(|(_, s)| *s)
                    .collect();
                reduce::mean(&rest)
            } else {
                sigma2
            };
            ks_sorted(&normalized(s2, Some((lo, hi))))
        })
        .collect();
    let sigma_se = if run.sigma_mu_sq.len() >= 2 {
        let loo_s: Vec<f64> = (0..run.sigma_mu_sq.len())
            .map(|k| {
                let rest: Vec<f64> = run
                    .sigma_mu_sq
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .map(|(_, s)| *s)
                    .collect();
                reduce::mean(&rest).sqrt()
            })
            .collect();
        crate::stats::jackknife_se(&loo_s)
    } else {
        0.0
    };
    Ok((ks, crate::stats::jackknife_se(&loo), sigma2, sigma_se))
}

impl McRun {
    fn n_env_groups(&self) -> usize {
        self.env_seeds.len()
    }
}

fn check_geometric(grid: &[f64], field: &'static str, min_len: usize) -> Result<()> {
    if grid.len() < min_len {
        return Err(Error::config(field, format!("needs at least {min_len} grid points")));
    }
    if grid.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::config(field, "grid values must be positive and finite"));
    }
    if grid.len() >= 2 {
        let ratio = grid[1] / grid[0];
        if ratio == 1.0 || grid.windows(2).any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9) {
            return Err(Error::config(field, "grid must be geometric"));
        }
    }
    Ok(())
}

/// For each horizon `t` (ascending, geometric, at least four): `mu = 1/t`,
/// fresh correctors, Monte Carlo, KS of the normalized displacement and V/J.
/// The same environment seeds are used at every horizon.
pub fn clt_experiment(
    spec: &EnvironmentSpec,
    t_grid: &[f64],
    ens: &Ensemble,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<ExperimentReport> {
    check_geometric(t_grid, "t", 4)?;
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("t", "horizons must be increasing"));
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let run = run_monte_carlo(spec, &mc_config(ens, t, None), xi, opts)?;
        rows.push(clt_row(&run)?);
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.ks)).collect();
    let fit = rate_fit(&pts)?;
    Ok(ExperimentReport { rows, fit })
}

pub fn mc_config(ens: &Ensemble, t: f64, mu: Option<f64>) -> McConfig {
    McConfig {
        n_env: ens.n_env,
        n_walks_per_env: ens.n_walks,
        horizon: t,
        mu,
        master_seed: ens.master_seed,
    }
}

/// Report row of one Monte Carlo run.
pub fn clt_row(run: &McRun) -> Result<ExperimentRow> {
    let t = run.config.horizon;
    let (ks, ks_se, sigma2, sigma_se) = ks_of_run(run)?;
    let vj = estimate_v_j(&run.samples, run.n_walks(), t, sigma2)?;
    Ok(ExperimentRow {
        t,
        mu: run.mu,
        ks,
        ks_se,
        v_hat: vj.v_hat,
        v_hat_se: vj.v_hat_se,
        j_hat: vj.j_hat,
        j_hat_se: vj.j_hat_se,
        hh_raw: vj.hh_raw,
        hh_raw_se: vj.hh_raw_se,
        sigma_mu: sigma2.sqrt(),
        sigma_mu_se: sigma_se,
        n_samples: run.samples.len(),
    })
}

/// An ensemble of environments with correctors at one `mu`.
fn solve_ensemble<T: Send>(
    spec: &EnvironmentSpec,
    n_env: usize,
    master_seed: u64,
    mu: f64,
    xi: &[f64],
    opts: &SolverOptions,
    f: impl Fn(&Environment, &CorrectorField) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    spec.validate()?;
    check_xi(xi, spec.d)?;
    if n_env == 0 {
        return Err(Error::config("n_env", "must be positive"));
    }
    (0..n_env)
        .into_par_iter()
        .with_max_len(1)
        .map(|k| {
            let seed = derive_seed(master_seed, k as u64);
            let env = Environment::generate(&spec.with_seed(seed))?;
            let corr = solve_corrector(&env, mu, xi, opts).map_err(|e| attach_seed(e, seed))?;
            f(&env, &corr)
        })
        .collect()
}

/// Ensemble estimate at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_env: usize,
}

fn write_grid_csv<W: Write>(mut w: W, x: &str, y: &str, rows: &[GridRow]) -> Result<()> {
    writeln!(w, "{x},{y},stderr,n_env")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.x, r.value, r.stderr, r.n_env)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    /// `(mu, sigma_mu^2 hat)`.
    pub rows: Vec<GridRow>,
    /// `2 |xi|^2 E[1/w]^{-1}` in dimension one, `2 c |xi|^2` for a constant
    /// medium.
    pub exact: Option<f64>,
}

impl SigmaReport {
    /// CSV `mu,sigma_mu_sq,stderr,n_env`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_grid_csv(w, "mu", "sigma_mu_sq", &self.rows)
    }

    /// `|sigma_mu^2 - exact|` along the grid.
    pub fn gaps(&self) -> Option<Vec<f64>> {
        self.exact.map(|e| self.rows.iter().map(|r| (r.value - e).abs()).collect())
    }
}

/// `sigma_mu^2` averaged over `n_env` environments for each `mu`. The same
/// environments are used at every `mu`.
pub fn sigma_convergence_experiment(
    spec: &EnvironmentSpec,
    mu_grid: &[f64],
    n_env: usize,
    master_seed: u64,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<SigmaReport> {
    check_geometric(mu_grid, "mu", 1)?;
    let mut rows = Vec::with_capacity(mu_grid.len());
    for &mu in mu_grid {
        let s = solve_ensemble(spec, n_env, master_seed, mu, xi, opts, sigma_mu_sq)?;
        let (value, stderr) = mean_stderr(&s);
        rows.push(GridRow {
            x: mu,
            value,
            stderr,
            n_env,
        });
    }
    let xi2: f64 = xi.iter().map(|x| x * x).sum();
    let exact = match spec.distribution {
        Distribution::Constant { c } => Some(2.0 * c * xi2),
        _ if spec.d == 1 => Some(2.0 * xi2 * spec.distribution.inv_mean()),
        _ => None,
    };
    Ok(SigmaReport { rows, exact })
}

/// Sum of `g` over `{x + k e_axis : |k| <= n}` at every site, periodic.
fn window_sum_axis(torus: &crate::env::Torus, g: &[f64], axis: usize, n: usize) -> Vec<f64> {
    let l = torus.l;
    let stride = torus.stride(axis);
    let mut out = vec![0.0; g.len()];
    for base in 0..g.len() {
        if torus.coord(base, axis) != 0 {
            continue;
        }
        let line: Vec<f64> = (0..l).map(|c| g[base + c * stride]).collect();
        // direct sums per site keep the result independent of traversal order
        for c in 0..l {
            let mut s = 0.0;
            for k in 0..=2 * n {
                s += line[(c + l - n + k) % l];
            }
            out[base + c * stride] = s;
        }
    }
    out
}

/// `S_n(g)(x) = sum over the box x + {-n..n}^d`.
pub fn box_sums(torus: &crate::env::Torus, g: &[f64], n: usize) -> Result<Vec<f64>> {
    if 2 * n + 1 > torus.l {
        return Err(Error::usage(format!(
            "box of half-width {n} does not fit in a torus of side {}",
            torus.l
        )));
    }
    let mut cur = g.to_vec();
    for axis in 0..torus.d {
        cur = window_sum_axis(torus, &cur, axis, n);
    }
    Ok(cur)
}

/// `E[(S_n(w_bar)/|B_n|)^2]` for each `n`, with `w_bar = w_mu - ` the
/// ensemble mean of `w_mu`; the expectation is the mean over box centers
/// and environments.
pub fn spatial_average_variance(
    spec: &EnvironmentSpec,
    n_env: usize,
    mu: f64,
    n_grid: &[usize],
    master_seed: u64,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<GridRow>> {
    if n_grid.is_empty() {
        return Err(Error::config("n", "grid is empty"));
    }
    if let Some(n) = n_grid.iter().find(|&&n| 2 * n + 1 > spec.l) {
        return Err(Error::usage(format!(
            "box of half-width {n} does not fit in a torus of side {}",
            spec.l
        )));
    }
    let fields = solve_ensemble(spec, n_env, master_seed, mu, xi, opts, |e, c| {
        Ok(w_mu_field(e, c)?.values)
    })?;
    let means: Vec<f64> = fields.iter().map(|f| reduce::mean(f)).collect();
    let grand = reduce::mean(&means);
    let torus = crate::env::Torus::new(spec.d, spec.l);
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let vol = ((2 * n + 1) as f64).powi(spec.d as i32);
        let per_env: Vec<f64> = fields
            .par_iter()
            .map(|f| {
                let centered: Vec<f64> = f.iter().map(|w| w - grand).collect();
                let s = box_sums(&torus, &centered, n)?;
                let sq: Vec<f64> = s.iter().map(|x| (x / vol).powi(2)).collect();
                Ok(reduce::mean(&sq))
            })
            .collect::<Result<_>>()?;
        let (value, stderr) = mean_stderr(&per_env);
        rows.push(GridRow {
            x: n as f64,
            value,
            stderr,
            n_env,
        });
    }
    Ok(rows)
}

/// CSV `n,box_var,stderr,n_env`.
pub fn write_box_csv<W: Write>(w: W, rows: &[GridRow]) -> Result<()> {
    write_grid_csv(w, "n", "box_var", rows)
}

/// Ensemble-and-space average of `phi_mu^p` per `mu`.
pub fn phi_moment_experiment(
    spec: &EnvironmentSpec,
    mu_grid: &[f64],
    p: u32,
    n_env: usize,
    master_seed: u64,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<GridRow>> {
    if p == 0 || !p.is_multiple_of(2) {
        return Err(Error::config("p", format!("moment order must be even and positive, got {p}")));
    }
    check_geometric(mu_grid, "mu", 1)?;
    let mut rows = Vec::with_capacity(mu_grid.len());
    for &mu in mu_grid {
        let m = solve_ensemble(spec, n_env, master_seed, mu, xi, opts, |_, c| {
            let pow: Vec<f64> = c.phi.values.iter().map(|v| v.powi(p as i32)).collect();
            Ok(reduce::mean(&pow))
        })?;
        let (value, stderr) = mean_stderr(&m);
        rows.push(GridRow {
            x: mu,
            value,
            stderr,
            n_env,
        });
    }
    Ok(rows)
}

/// CSV `mu,phi_moment,stderr,n_env`.
pub fn write_moment_csv<W: Write>(w: W, rows: &[GridRow]) -> Result<()> {
    write_grid_csv(w, "mu", "phi_moment", rows)
}

/// Exceedance frequency of `|chi(n)| >= n^{1/2 + eps}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub n: usize,
    pub threshold: f64,
    pub frequency: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// `chi(n) = sum_{k<n} (E[1/w]^{-1}/w_k - 1)` on fresh i.i.d. paths, one
/// path per stream of `Domain::ChiPath`, shared across the `n` grid.
pub fn chi_tail_experiment(
    dist: &Distribution,
    n_grid: &[usize],
    eps: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<TailRow>> {
    dist.validate(dist.natural_ceiling())?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::config("eps", format!("must lie in (0, 1/2), got {eps}")));
    }
    if n_paths == 0 {
        return Err(Error::config("n_paths", "must be positive"));
    }
    if n_grid.is_empty() || n_grid.contains(&0) {
        return Err(Error::config("n", "grid must be nonempty and positive"));
    }
    let n_max = *n_grid.iter().max().expect("nonempty");
    let inv = dist.inv_mean();
    let hits: Vec<Vec<bool>> = (0..n_paths)
        .into_par_iter()
        .with_min_len(64)
        .map(|path| {
            let mut rng = StreamRng::new(master_seed, Domain::ChiPath, [path as u64, 0]);
            let mut chi = vec![0.0; n_max + 1];
            for k in 0..n_max {
                chi[k + 1] = chi[k] + inv / dist.sample(rng.uniform()) - 1.0;
            }
            n_grid
                .iter()
                .map(|&n| chi[n].abs() >= (n as f64).powf(0.5 + eps))
                .collect()
        })
        .collect();
    Ok(n_grid
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let count = hits.iter().filter(|h| h[j]).count();
            let p = count as f64 / n_paths as f64;
            TailRow {
                n,
                threshold: (n as f64).powf(0.5 + eps),
                frequency: p,
                stderr: (p * (1.0 - p) / n_paths as f64).sqrt(),
                n_paths,
            }
        })
        .collect())
}

/// CSV `n,threshold,frequency,stderr,n_paths`.
pub fn write_tail_csv<W: Write>(mut w: W, rows: &[TailRow]) -> Result<()> {
    writeln!(w, "n,threshold,frequency,stderr,n_paths")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.n, r.threshold, r.frequency, r.stderr, r.n_paths)?;
    }
    Ok(())
}

/// Monte Carlo `E[R^2]` against the spectral closed form on one torus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub t: f64,
    pub mu: f64,
    pub mc_r2: f64,
    pub mc_r2_se: f64,
    pub exact_r2: f64,
    pub mean_m: f64,
    pub mean_m_se: f64,
    /// `mean(m^2 - qv)` and its error.
    pub isometry_gap: f64,
    pub isometry_gap_se: f64,
    pub jumps: u64,
    pub violations: u64,
    pub n_samples: usize,
}

impl RemainderRow {
    pub fn z_score(&self) -> f64 {
        (self.mc_r2 - self.exact_r2) / self.mc_r2_se
    }
}

/// Runs `n_walks` stationary walks on `env` for each `t`, with `mu = 1/t`.
/// Returns the rows and the runs themselves (for sample dumps).
pub fn remainder_experiment(
    env: &Environment,
    t_grid: &[f64],
    n_walks: usize,
    master_seed: u64,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<RemainderRow>, Vec<McRun>)> {
    check_xi(xi, env.d())?;
    let q = build_generator(env)?;
    let sm = spectral_measure(&q, &env.drift_field(xi)?)?;
    let mut rows = Vec::with_capacity(t_grid.len());
    let mut runs = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(t > 0.0) {
            return Err(Error::config("t", "horizons must be positive"));
        }
        let cfg = McConfig {
            n_env: 1,
            n_walks_per_env: n_walks,
            horizon: t,
            mu: None,
            master_seed,
        };
        let run = run_monte_carlo_on(std::slice::from_ref(env), &cfg, xi, opts)?;
        let r2: Vec<f64> = run.samples.iter().map(|s| s.r * s.r).collect();
        let m: Vec<f64> = run.samples.iter().map(|s| s.m).collect();
        let iso: Vec<f64> = run.samples.iter().map(|s| s.m * s.m - s.qv).collect();
        let (mc_r2, mc_r2_se) = mean_stderr(&r2);
        let (mean_m, mean_m_se) = mean_stderr(&m);
        let (isometry_gap, isometry_gap_se) = mean_stderr(&iso);
        rows.push(RemainderRow {
            t,
            mu: run.mu,
            mc_r2,
            mc_r2_se,
            exact_r2: remainder_second_moment_exact(&sm, run.mu, t)?,
            mean_m,
            mean_m_se,
            isometry_gap,
            isometry_gap_se,
            jumps: run.total_jumps(),
            violations: run.violations(),
            n_samples: run.samples.len(),
        });
        runs.push(run);
    }
    Ok((rows, runs))
}

/// CSV of [`RemainderRow`]s.
pub fn write_remainder_csv<W: Write>(mut w: W, rows: &[RemainderRow]) -> Result<()> {
    writeln!(
        w,
        "t,mu,mc_r2,mc_r2_se,exact_r2,mean_m,mean_m_se,isometry_gap,isometry_gap_se,jumps,violations,n_samples"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.mu,
            r.mc_r2,
            r.mc_r2_se,
            r.exact_r2,
            r.mean_m,
            r.mean_m_se,
            r.isometry_gap,
            r.isometry_gap_se,
            r.jumps,
            r.violations,
            r.n_samples
        )?;
    }
    Ok(())
}

/// Run metadata written next to every output. `wall_time` is the only
/// field that varies between identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: Option<u64>,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    pub versions: serde_json::Value,
    pub wall_time: f64,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, master_seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            master_seed,
            outputs: Vec::new(),
            results: serde_json::Value::Null,
            versions: serde_json::json!({ "rcclt-core": env!("CARGO_PKG_VERSION") }),
            wall_time: 0.0,
        }
    }

    pub fn finish(&mut self, started: Instant) {
        self.wall_time = started.elapsed().as_secs_f64();
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Fills `dir/name` through a buffered writer.
pub fn write_file<F>(dir: &Path, name: &str, body: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>,
{
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Spatial mean of `f^p` as a field statistic.
pub fn field_moment(f: &FieldScalar, p: i32) -> f64 {
    let pow: Vec<f64> = f.values.iter().map(|v| v.powi(p)).collect();
    reduce::mean(&pow)
}
