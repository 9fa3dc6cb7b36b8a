//! The regularized corrector and the stationary fields built from it.
//!
//! On the torus the generator of the environment seen from the walker acts
//! on the orbit `{theta_x w}` exactly as `L^w` acts on site functions, so
//! `(mu - L) phi = drift` is a sparse SPD system with one unknown per site.
//! It is solved matrix-free by Jacobi-preconditioned conjugate gradients.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Direction, Environment, FieldScalar};
use crate::error::{Error, Result};
use crate::reduce::{self, BLOCK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `||(mu - L)phi - drift||_inf <= tol * max(1, ||drift||_inf)`.
    pub tol: f64,
    /// Defaults to `20 L^d`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

/// `phi_mu(theta_x w)` at every torus site, with solve metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorField {
    pub env_ref: u64,
    pub mu: f64,
    pub xi: Vec<f64>,
    pub phi: FieldScalar,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// `u -> (mu - L^w) u` without assembling a matrix.
pub struct ShiftedGenerator {
    mu: f64,
    k: usize,
    neighbors: Vec<u32>,
    rates: Vec<f64>,
    diag: Vec<f64>,
}

impl ShiftedGenerator {
    pub fn new(env: &Environment, mu: f64) -> Self {
        let k = 2 * env.d();
        let neighbors = env.torus().neighbor_table();
        let rates = env.rate_table();
        let diag = rates
            .chunks_exact(k)
            .map(|r| mu + r.iter().sum::<f64>())
            .collect();
        Self {
            mu,
            k,
            neighbors,
            rates,
            diag,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    #[inline]
    fn row(&self, x: usize, u: &[f64]) -> f64 {
        let base = x * self.k;
        let mut off = 0.0;
        for j in 0..self.k {
            off += self.rates[base + j] * u[self.neighbors[base + j] as usize];
        }
        self.diag[x] * u[x] - off
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| {
            let lo = b * BLOCK;
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = self.row(lo + i, u);
            }
        });
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    reduce::par_max_by(v.len(), |i| v[i].abs())
}

/// Solves `(mu - L^w) phi = drift_xi` by preconditioned CG.
pub fn solve_corrector(
    env: &Environment,
    mu: f64,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<CorrectorField> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::config("mu", format!("regularization {mu} must be > 0")));
    }
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::config("tol", format!("tolerance {} must be > 0", opts.tol)));
    }
    let drift = env.drift_field(xi)?;
    let op = ShiftedGenerator::new(env, mu);
    let n = op.dim();
    let max_iter = opts.max_iter.unwrap_or(20 * n);
    let b = &drift.values;
    let target = opts.tol * sup_norm(b).max(1.0);

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();

    let precondition = |r: &[f64], z: &mut [f64]| {
        z.par_iter_mut()
            .with_min_len(BLOCK)
            .enumerate()
            .for_each(|(i, zi)| *zi = r[i] * inv_diag[i]);
    };

    let mut res = sup_norm(&r);
    let mut iterations = 0;
    let mut restart = true;
    let mut rz = 0.0;
    while res > target {
        if iterations >= max_iter {
            return Err(Error::Convergence {
                iterations,
                residual: res,
                env_seed: Some(env.spec().seed),
            });
        }
        if restart {
            precondition(&r, &mut z);
            p.copy_from_slice(&z);
            rz = reduce::dot(&r, &z);
            restart = false;
        }
        op.apply(&p, &mut q);
        let pq = reduce::dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::Numerical(format!(
                "CG breakdown, p.Ap = {pq:e} at iteration {iterations}"
            )));
        }
        let alpha = rz / pq;
        x.par_iter_mut()
            .zip(r.par_iter_mut())
            .with_min_len(BLOCK)
            .enumerate()
            .for_each(|(i, (xi, ri))| {
                *xi += alpha * p[i];
                *ri -= alpha * q[i];
            });
        iterations += 1;
        res = sup_norm(&r);
        if res <= target {
            // Confirm against the true residual; drift in the recursive
            // residual triggers a restart from the current iterate.
            op.apply(&x, &mut q);
            r.par_iter_mut()
                .with_min_len(BLOCK)
                .enumerate()
                .for_each(|(i, ri)| *ri = b[i] - q[i]);
            res = sup_norm(&r);
            restart = true;
            continue;
        }
        precondition(&r, &mut z);
        let rz_new = reduce::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut()
            .with_min_len(BLOCK)
            .enumerate()
            .for_each(|(i, pi)| *pi = z[i] + beta * *pi);
    }

    Ok(CorrectorField {
        env_ref: env.fingerprint(),
        mu,
        xi: xi.to_vec(),
        phi: FieldScalar::new(x, "phi"),
        residual_norm: res,
        iterations,
    })
}

/// `||(mu - L^w) phi - drift||_inf`, recomputed from scratch.
pub fn residual_sup_norm(env: &Environment, corr: &CorrectorField) -> Result<f64> {
    check_match(env, corr)?;
    let drift = env.drift_field(&corr.xi)?;
    let op = ShiftedGenerator::new(env, corr.mu);
    let mut out = vec![0.0; op.dim()];
    op.apply(&corr.phi.values, &mut out);
    Ok(out
        .iter()
        .zip(&drift.values)
        .fold(0.0, |a, (u, b)| a.max((u - b).abs())))
}

pub(crate) fn check_match(env: &Environment, corr: &CorrectorField) -> Result<()> {
    if corr.phi.len() != env.n_sites() || corr.xi.len() != env.d() {
        return Err(Error::usage("corrector shape does not match the environment"));
    }
    if corr.env_ref != env.fingerprint() {
        return Err(Error::usage(
            "corrector was solved on a different environment",
        ));
    }
    Ok(())
}

/// Evaluates `f(x, z, w(x,x+z), phi(x+z) - phi(x))` summed over the 2d
/// directions, at every site.
fn edge_field<F>(env: &Environment, corr: &CorrectorField, label: &str, f: F) -> Result<FieldScalar>
where
    F: Fn(Direction, f64, f64) -> f64 + Sync,
{
    check_match(env, corr)?;
    let phi = &corr.phi.values;
    let torus = env.torus();
    let d = env.d();
    let values = (0..env.n_sites())
        .into_par_iter()
        .with_min_len(BLOCK)
        .map(|x| {
            let mut s = 0.0;
            for z in Direction::all(d) {
                let y = torus.neighbor(x, z);
                s += f(z, env.conductance_at(x, z), phi[y] - phi[x]);
            }
            s
        })
        .collect();
    Ok(FieldScalar::new(values, label))
}

/// `v_mu(theta_x w) = sum_z w(x,x+z) (xi.z + phi(x+z) - phi(x))^2`, the
/// density of the quadratic variation of `M_mu`.
pub fn v_mu_field(env: &Environment, corr: &CorrectorField) -> Result<FieldScalar> {
    let xi = corr.xi.clone();
    edge_field(env, corr, "v_mu", move |z, w, dphi| {
        let g = z.dot(&xi) + dphi;
        w * g * g
    })
}

/// `sigma_mu^2`, the spatial mean of `v_mu`.
pub fn sigma_mu_sq(env: &Environment, corr: &CorrectorField) -> Result<f64> {
    Ok(v_mu_field(env, corr)?.mean())
}

/// `w_mu = mu phi^2 + v_mu`.
pub fn w_mu_field(env: &Environment, corr: &CorrectorField) -> Result<FieldScalar> {
    let v = v_mu_field(env, corr)?;
    let values = v
        .values
        .iter()
        .zip(&corr.phi.values)
        .map(|(v, p)| corr.mu * p * p + v)
        .collect();
    Ok(FieldScalar::new(values, "w_mu"))
}

/// `d_mu = |xi| + sum_z |phi(x+z) - phi(x)|`, which dominates every jump of
/// `M_mu` leaving `x`.
pub fn d_mu_field(env: &Environment, corr: &CorrectorField) -> Result<FieldScalar> {
    let norm = corr.xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut field = edge_field(env, corr, "d_mu", |_, _, dphi| dphi.abs())?;
    for v in &mut field.values {
        *v += norm;
    }
    Ok(field)
}

#[derive(Debug, Serialize)]
struct CorrectorMeta<'a> {
    mu: f64,
    xi: &'a [f64],
    residual: f64,
    iterations: usize,
    env_ref: String,
    label: &'a str,
}

impl CorrectorField {
    /// CSV `site_index,phi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "site_index,phi")?;
        for (i, p) in self.phi.values.iter().enumerate() {
            writeln!(w, "{i},{p}")?;
        }
        Ok(())
    }

    pub fn metadata_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CorrectorMeta {
            mu: self.mu,
            xi: &self.xi,
            residual: self.residual_norm,
            iterations: self.iterations,
            env_ref: format!("{:016x}", self.env_ref),
            label: &self.phi.label,
        })?)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let f = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        std::fs::write(dir.join(format!("{stem}.json")), self.metadata_json()? + "\n")?;
        Ok(())
    }
}

/// The explicit one-dimensional corrector on a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Chi1D {
    /// `chi[k]` for `k = 0..=n`, `chi[0] = 0`.
    pub chi: Vec<f64>,
    pub inv_mean: f64,
}

/// `chi(0) = 0`, `chi(x+1) - chi(x) = inv_mean / w(x,x+1) - 1`.
pub fn chi_1d(conductances: &[f64], inv_mean: f64) -> Result<Chi1D> {
    if conductances.is_empty() {
        return Err(Error::usage("chi needs at least one conductance"));
    }
    let mut chi = Vec::with_capacity(conductances.len() + 1);
    chi.push(0.0);
    let mut acc = 0.0;
    for w in conductances {
        acc += inv_mean / w - 1.0;
        chi.push(acc);
    }
    Ok(Chi1D { chi, inv_mean })
}

impl Chi1D {
    /// `max_z |L^w (x + chi)(z)|` over interior points of the segment,
    /// where `conductances[k]` is the edge `{k, k+1}`.
    pub fn harmonicity_residual(&self, conductances: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for z in 1..self.chi.len() - 1 {
            let right = conductances[z] * (1.0 + self.chi[z + 1] - self.chi[z]);
            let left = conductances[z - 1] * (-1.0 + self.chi[z - 1] - self.chi[z]);
            worst = worst.max((right + left).abs());
        }
        worst
    }
}

/// Quadratic-variation density of `X + chi(X)`:
/// `E[1/w]^{-2} (1/w(0,1) + 1/w(0,-1))`.
pub fn v_1d(w_right: f64, w_left: f64, inv_mean: f64) -> f64 {
    inv_mean * inv_mean * (1.0 / w_right + 1.0 / w_left)
}

/// Half-width `ceil(8 sqrt(2 M t))` of a chi window that a walk up to time
/// `t` leaves only with negligible probability.
pub fn chi_line_window(ceiling: f64, horizon: f64) -> usize {
    ((8.0 * (2.0 * ceiling * horizon).sqrt()).ceil() as usize).max(2)
}

/// `chi` on the window `(-K, K)` around an origin of a 1D torus of side
/// `2K`, built from the torus edges without using the wrap-around edge.
#[derive(Debug, Clone)]
pub struct ChiLine {
    values: Vec<f64>,
    half: i64,
    pub inv_mean: f64,
}

impl ChiLine {
    pub fn new(env: &Environment, origin: usize, inv_mean: f64) -> Result<Self> {
        if env.d() != 1 {
            return Err(Error::usage("chi is only defined in dimension one"));
        }
        let l = env.l();
        let half = (l / 2) as i64;
        let mut values = vec![0.0; l - 1];
        let at = |y: i64| (y + half - 1) as usize;
        let slot = |y: i64| (origin as i64 + y).rem_euclid(l as i64) as usize;
        for y in 1..half {
            values[at(y)] = values[at(y - 1)] + inv_mean / env.edge(slot(y - 1), 0) - 1.0;
        }
        for y in (-half + 1..0).rev() {
            values[at(y)] = values[at(y + 1)] - (inv_mean / env.edge(slot(y), 0) - 1.0);
        }
        Ok(Self {
            values,
            half,
            inv_mean,
        })
    }

    /// `chi(y)` for the unwrapped displacement `y`, if inside the window.
    #[inline]
    pub fn get(&self, y: i64) -> Option<f64> {
        if y <= -self.half || y >= self.half {
            None
        } else {
            Some(self.values[(y + self.half - 1) as usize])
        }
    }

    pub fn half_width(&self) -> i64 {
        self.half
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Distribution, EnvironmentSpec};

    fn two_site(a: f64, b: f64) -> Environment {
        let spec = EnvironmentSpec::new(1, 2, Distribution::TwoPoint { m: 4.0, p: 0.5 }, 0);
        Environment::from_conductances(&spec, vec![a, b]).unwrap()
    }

    #[test]
    fn two_site_closed_form() {
        let env = two_site(1.0, 4.0);
        let c = solve_corrector(&env, 1.0, &[1.0], &SolverOptions::default()).unwrap();
        let u = -3.0 / 11.0;
        assert!((c.phi.values[0] - u).abs() < 1e-12);
        assert!((c.phi.values[1] + u).abs() < 1e-12);
        let s = sigma_mu_sq(&env, &c).unwrap();
        assert!((s - 389.0 / 121.0).abs() < 1e-12);
        let v = v_mu_field(&env, &c).unwrap();
        for x in &v.values {
            assert!((x - 389.0 / 121.0).abs() < 1e-12);
        }
        let w = w_mu_field(&env, &c).unwrap();
        for x in &w.values {
            assert!((x - 398.0 / 121.0).abs() < 1e-12);
        }
        let dm = d_mu_field(&env, &c).unwrap();
        for x in &dm.values {
            assert!((x - 23.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_env_zero_corrector() {
        let spec = EnvironmentSpec::new(2, 4, Distribution::Constant { c: 2.0 }, 0);
        let env = Environment::generate(&spec).unwrap();
        let xi = [0.6, -0.8];
        let c = solve_corrector(&env, 0.3, &xi, &SolverOptions::default()).unwrap();
        assert!(c.phi.values.iter().all(|&p| p == 0.0));
        assert_eq!(c.iterations, 0);
        let expect = 2.0 * 2.0 * (0.36 + 0.64);
        assert!(v_mu_field(&env, &c).unwrap().values.iter().all(|&v| (v - expect).abs() < 1e-15));
        assert!((sigma_mu_sq(&env, &c).unwrap() - expect).abs() < 1e-15);
        assert!(w_mu_field(&env, &c).unwrap().values.iter().all(|&v| (v - expect).abs() < 1e-15));
        assert!(d_mu_field(&env, &c).unwrap().values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn small_mu_approaches_harmonic_mean() {
        let env = two_site(1.0, 4.0);
        let c = solve_corrector(&env, 1e-7, &[1.0], &SolverOptions::default()).unwrap();
        let s = sigma_mu_sq(&env, &c).unwrap();
        assert!((s - 3.2).abs() < 1e-5, "{s}");
    }

    #[test]
    fn residual_invariant_and_fields() {
        let spec = EnvironmentSpec::new(2, 8, Distribution::Uniform { m: 4.0 }, 3);
        let env = Environment::generate(&spec).unwrap();
        let opts = SolverOptions::default();
        let c = solve_corrector(&env, 0.05, &[1.0, 0.5], &opts).unwrap();
        let drift = env.drift_field(&c.xi).unwrap();
        let res = residual_sup_norm(&env, &c).unwrap();
        assert!(res <= opts.tol * drift.sup_norm().max(1.0));
        assert!(c.phi.values.iter().all(|p| p.is_finite()));
        let v = v_mu_field(&env, &c).unwrap();
        let w = w_mu_field(&env, &c).unwrap();
        assert!(v.min() >= 0.0);
        assert!(v.values.iter().zip(&w.values).all(|(v, w)| w >= v));
        assert_eq!(sigma_mu_sq(&env, &c).unwrap(), v.mean());
        // each edge term is dominated by d_mu at the departure site
        let dm = d_mu_field(&env, &c).unwrap();
        let t = env.torus();
        for x in 0..env.n_sites() {
            for z in Direction::all(2) {
                let jump = z.dot(&c.xi) + c.phi.values[t.neighbor(x, z)] - c.phi.values[x];
                assert!(jump.abs() <= dm.values[x]);
            }
        }
    }

    #[test]
    fn nonconvergence_reports_residual() {
        let spec = EnvironmentSpec::new(2, 8, Distribution::Uniform { m: 4.0 }, 3);
        let env = Environment::generate(&spec).unwrap();
        let opts = SolverOptions {
            tol: 1e-14,
            max_iter: Some(2),
        };
        match solve_corrector(&env, 0.01, &[1.0, 0.0], &opts) {
            Err(Error::Convergence {
                iterations,
                residual,
                env_seed,
            }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
                assert_eq!(env_seed, Some(3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_mu_rejected() {
        let env = two_site(1.0, 4.0);
        assert!(solve_corrector(&env, 0.0, &[1.0], &SolverOptions::default()).is_err());
        assert!(solve_corrector(&env, -1.0, &[1.0], &SolverOptions::default()).is_err());
    }

    #[test]
    fn mismatched_corrector_rejected() {
        let a = two_site(1.0, 4.0);
        let b = two_site(4.0, 1.0);
        let c = solve_corrector(&a, 1.0, &[1.0], &SolverOptions::default()).unwrap();
        assert!(matches!(v_mu_field(&b, &c), Err(Error::Usage(_))));
        assert!(matches!(sigma_mu_sq(&b, &c), Err(Error::Usage(_))));
    }

    #[test]
    fn chi_alternating() {
        let w: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 1.0 } else { 4.0 }).collect();
        let chi = chi_1d(&w, 1.6).unwrap();
        assert_eq!(chi.chi[0], 0.0);
        for (k, c) in chi.chi.iter().enumerate() {
            let expect = if k % 2 == 0 { 0.0 } else { 0.6 };
            assert!((c - expect).abs() < 1e-14, "{k}: {c}");
        }
        assert!(chi.harmonicity_residual(&w) < 1e-12 * 4.0);
    }

    #[test]
    fn chi_constant_and_empty() {
        let chi = chi_1d(&[2.5; 7], 2.5).unwrap();
        assert!(chi.chi.iter().all(|&c| c == 0.0));
        assert!(matches!(chi_1d(&[], 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn v_1d_values() {
        assert_eq!(v_1d(3.0, 3.0, 3.0), 6.0);
        assert!((v_1d(1.0, 4.0, 1.6) - 3.2).abs() < 1e-15);
        // E[v] under TwoPoint{1,4}, p = 1/2, equals 2 E[1/w]^{-1}
        let e: f64 = [(1.0, 1.0), (1.0, 4.0), (4.0, 1.0), (4.0, 4.0)]
            .iter()
            .map(|&(a, b)| 0.25 * v_1d(a, b, 1.6))
            .sum();
        assert!((e - 3.2).abs() < 1e-14);
    }

    #[test]
    fn chi_line_matches_segment_recursion() {
        let spec = EnvironmentSpec::new(1, 20, Distribution::TwoPoint { m: 4.0, p: 0.5 }, 5);
        let env = Environment::generate(&spec).unwrap();
        let origin = 13;
        let line = ChiLine::new(&env, origin, 1.6).unwrap();
        assert_eq!(line.get(0), Some(0.0));
        assert_eq!(line.get(10), None);
        assert_eq!(line.get(-10), None);
        // right half against chi_1d on the rotated edge sequence
        let seq: Vec<f64> = (0..9).map(|k| env.edge((origin + k) % 20, 0)).collect();
        let chi = chi_1d(&seq, 1.6).unwrap();
        for y in 0..10 {
            assert!((line.get(y).unwrap() - chi.chi[y as usize]).abs() < 1e-14);
        }
        // harmonicity of y + chi(y) across the whole window
        for y in -8i64..=8 {
            let w_r = env.edge((origin as i64 + y).rem_euclid(20) as usize, 0);
            let w_l = env.edge((origin as i64 + y - 1).rem_euclid(20) as usize, 0);
            let h = |y: i64| y as f64 + line.get(y).unwrap();
            let lap = w_r * (h(y + 1) - h(y)) + w_l * (h(y - 1) - h(y));
            assert!(lap.abs() < 1e-12, "{y}: {lap}");
        }
    }
}
