//! Continuous-time random walk among the conductances and the martingale
//! decomposition `xi . X_t = M_mu(t) + R_mu(t)` accumulated along it.
//!
//! The walk lives in `Z^d` (unwrapped coordinates) while the medium is read
//! modulo `L`. Walks start at a uniformly chosen torus site, which is the
//! stationary start of the environment seen from the particle.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{
    check_match, chi_line_window, d_mu_field, solve_corrector, v_1d, v_mu_field, ChiLine,
    CorrectorField, SolverOptions,
};
use crate::env::{check_xi, Direction, Distribution, Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Domain, StreamRng};
use crate::spectral::attach_seed;

/// A stored path. Site `n` occupies `[T_n, T_{n+1})` with `T_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub d: usize,
    /// Torus index of `Y_0`.
    pub origin: usize,
    pub jump_times: Vec<f64>,
    /// `Y_n - Y_0` in `Z^d`, flattened `[n * d + axis]`, starting with zeros.
    pub sites_unwrapped: Vec<i64>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    pub fn site(&self, n: usize) -> &[i64] {
        &self.sites_unwrapped[n * self.d..(n + 1) * self.d]
    }

    /// Direction of the `n`-th jump (from `Y_n` to `Y_{n+1}`).
    pub fn direction(&self, n: usize) -> Direction {
        let (a, b) = (self.site(n), self.site(n + 1));
        let axis = (0..self.d).find(|&i| a[i] != b[i]).expect("consecutive sites differ");
        if b[axis] > a[axis] {
            Direction::plus(axis)
        } else {
            Direction::minus(axis)
        }
    }

    /// Unwrapped position at time `s`.
    pub fn position_at(&self, s: f64) -> &[i64] {
        let n = self.jump_times.partition_point(|&t| t <= s);
        self.site(n)
    }
}

/// Jump rates and neighbor indices of one environment, laid out
/// `[site * 2d + k]` in canonical direction order.
#[derive(Debug, Clone)]
pub struct WalkTables {
    d: usize,
    rates: Vec<f64>,
    totals: Vec<f64>,
    neighbors: Vec<u32>,
}

impl WalkTables {
    pub fn new(env: &Environment) -> Self {
        let k = 2 * env.d();
        let rates = env.rate_table();
        let totals = rates.chunks(k).map(|r| r.iter().sum()).collect();
        Self {
            d: env.d(),
            rates,
            totals,
            neighbors: env.torus().neighbor_table(),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.totals.len()
    }

    #[inline]
    fn neighbor(&self, x: usize, k: usize) -> usize {
        self.neighbors[x * 2 * self.d + k] as usize
    }

    /// Runs the chain from `origin` until `horizon`, calling
    /// `on_jump(from, k, to, time)` for each jump in order.
    ///
    /// Per jump the stream yields the holding time, then the direction.
    #[inline]
    pub fn run<F: FnMut(usize, usize, usize, f64)>(
        &self,
        origin: usize,
        horizon: f64,
        rng: &mut StreamRng,
        mut on_jump: F,
    ) {
        let k = 2 * self.d;
        let mut x = origin;
        let mut time = 0.0;
        loop {
            let total = self.totals[x];
            time += rng.exponential(total);
            if time > horizon {
                break;
            }
            let mut u = rng.uniform() * total;
            let rates = &self.rates[x * k..(x + 1) * k];
            let mut dir = k - 1;
            for (j, &r) in rates.iter().enumerate() {
                if u < r {
                    dir = j;
                    break;
                }
                u -= r;
            }
            let y = self.neighbor(x, dir);
            on_jump(x, dir, y, time);
            x = y;
        }
    }
}

/// Uniform torus site, the first draw of every walk stream.
pub fn draw_origin(rng: &mut StreamRng, n_sites: usize) -> usize {
    use rand::RngCore;
    ((rng.next_u64() as u128 * n_sites as u128) >> 64) as usize
}

/// Stream of walk `walk_index` in environment slot `env_index`.
pub fn walk_stream(master_seed: u64, env_index: u64, walk_index: u64) -> StreamRng {
    StreamRng::new(master_seed, Domain::Walk, [env_index, walk_index])
}

/// Simulates the walk from torus site `origin` up to `horizon`.
pub fn simulate_trajectory(
    env: &Environment,
    origin: usize,
    horizon: f64,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    check_horizon(horizon)?;
    if origin >= env.n_sites() {
        return Err(Error::usage(format!("origin {origin} is not a torus site")));
    }
    let tables = WalkTables::new(env);
    let d = env.d();
    let mut jump_times = Vec::new();
    let mut sites = vec![0i64; d];
    let mut pos = vec![0i64; d];
    tables.run(origin, horizon, rng, |_, k, _, time| {
        let z = Direction::from_index(k);
        pos[z.axis] += z.sign();
        jump_times.push(time);
        sites.extend_from_slice(&pos);
    });
    Ok(Trajectory {
        d,
        origin,
        jump_times,
        sites_unwrapped: sites,
        horizon,
    })
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::config("t", format!("horizon must be finite and nonnegative, got {horizon}")));
    }
    Ok(())
}

/// Martingale observables of one walk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSample {
    pub xdotxi: f64,
    pub m: f64,
    pub r: f64,
    pub qv: f64,
    pub j4: f64,
    pub jumps: u64,
    /// Jumps with `|dM| > d_mu` at the departure site.
    pub violations: u64,
}

/// Site fields needed along a walk for a solved corrector.
#[derive(Debug, Clone)]
pub struct MartingaleFields {
    pub mu: f64,
    phi: Vec<f64>,
    v: Vec<f64>,
    d_mu: Vec<f64>,
    /// `xi . z` in canonical direction order.
    step: Vec<f64>,
}

impl MartingaleFields {
    pub fn new(env: &Environment, corr: &CorrectorField) -> Result<Self> {
        check_match(env, corr)?;
        Ok(Self {
            mu: corr.mu,
            phi: corr.phi.values.clone(),
            v: v_mu_field(env, corr)?.values,
            d_mu: d_mu_field(env, corr)?.values,
            step: Direction::all(env.d()).map(|z| z.dot(&corr.xi)).collect(),
        })
    }
}

/// Time integrals `int_0^t g(Y_s) ds` are formed by summation by parts,
/// `t g(Y_N) - sum_n T_n (g(Y_n) - g(Y_{n-1}))`, so that a constant field
/// integrates to exactly `t g`.
struct Accumulator<'a> {
    f: &'a MartingaleFields,
    start: usize,
    x: usize,
    xdotxi: f64,
    phi_parts: f64,
    v_parts: f64,
    j4: f64,
    jumps: u64,
    violations: u64,
}

impl<'a> Accumulator<'a> {
    fn new(f: &'a MartingaleFields, origin: usize) -> Self {
        Self {
            f,
            start: origin,
            x: origin,
            xdotxi: 0.0,
            phi_parts: 0.0,
            v_parts: 0.0,
            j4: 0.0,
            jumps: 0,
            violations: 0,
        }
    }

    #[inline]
    fn jump(&mut self, from: usize, k: usize, to: usize, time: f64) {
        let f = self.f;
        let step = f.step[k];
        let dm = step + f.phi[to] - f.phi[from];
        if dm.abs() > f.d_mu[from] * (1.0 + 1e-12) {
            self.violations += 1;
        }
        self.xdotxi += step;
        self.phi_parts += time * (f.phi[to] - f.phi[from]);
        self.v_parts += time * (f.v[to] - f.v[from]);
        let d2 = dm * dm;
        self.j4 += d2 * d2;
        self.jumps += 1;
        self.x = to;
    }

    fn finish(self, horizon: f64) -> MartingaleSample {
        let f = self.f;
        let int_phi = horizon * f.phi[self.x] - self.phi_parts;
        let qv = horizon * f.v[self.x] - self.v_parts;
        let m = self.xdotxi + f.phi[self.x] - f.phi[self.start] - f.mu * int_phi;
        MartingaleSample {
            xdotxi: self.xdotxi,
            m,
            r: self.xdotxi - m,
            qv: qv.max(0.0),
            j4: self.j4,
            jumps: self.jumps,
            violations: self.violations,
        }
    }
}

/// Replays a stored trajectory through the accumulator.
pub fn accumulate_martingale(
    env: &Environment,
    corr: &CorrectorField,
    traj: &Trajectory,
) -> Result<MartingaleSample> {
    let fields = MartingaleFields::new(env, corr)?;
    if traj.d != env.d() {
        return Err(Error::usage("trajectory dimension does not match the environment"));
    }
    Ok(accumulate_with(&fields, env, traj))
}

fn accumulate_with(fields: &MartingaleFields, env: &Environment, traj: &Trajectory) -> MartingaleSample {
    let torus = env.torus();
    let mut acc = Accumulator::new(fields, traj.origin);
    let mut x = traj.origin;
    for n in 0..traj.n_jumps() {
        let z = traj.direction(n);
        let y = torus.neighbor(x, z);
        acc.jump(x, z.index(), y, traj.jump_times[n]);
        x = y;
    }
    acc.finish(traj.horizon)
}

/// Simulates and accumulates in one pass without storing the path. Draws
/// exactly as [`simulate_trajectory`] after the origin.
pub fn sample_martingale(
    tables: &WalkTables,
    fields: &MartingaleFields,
    origin: usize,
    horizon: f64,
    rng: &mut StreamRng,
) -> MartingaleSample {
    let mut acc = Accumulator::new(fields, origin);
    tables.run(origin, horizon, rng, |x, k, y, time| acc.jump(x, k, y, time));
    acc.finish(horizon)
}

/// The one-dimensional decomposition `X_t = M(t) - chi(X_t)` with the
/// explicit harmonic corrector `chi` rooted at the trajectory origin.
pub fn accumulate_martingale_1d(
    env: &Environment,
    chi: &ChiLine,
    traj: &Trajectory,
) -> Result<MartingaleSample> {
    if env.d() != 1 || traj.d != 1 {
        return Err(Error::usage("the chi decomposition is one-dimensional"));
    }
    let l = env.l() as i64;
    let site = |y: i64| (traj.origin as i64 + y).rem_euclid(l) as usize;
    let v_at = |y: i64| {
        let x = site(y);
        v_1d(env.edge(x, 0), env.edge(site(y - 1), 0), chi.inv_mean)
    };
    let chi_at = |y: i64| {
        chi.get(y).ok_or_else(|| {
            Error::Range(format!(
                "walk reached {y}, outside the chi segment of half-width {}; use a longer segment",
                chi.half_width()
            ))
        })
    };
    let mut y = 0i64;
    let mut v_parts = 0.0;
    let mut j4 = 0.0;
    let mut c = chi_at(0)?;
    for n in 0..traj.n_jumps() {
        let y1 = traj.site(n + 1)[0];
        let c1 = chi_at(y1)?;
        let dm = (y1 - y) as f64 + c1 - c;
        j4 += dm.powi(4);
        v_parts += traj.jump_times[n] * (v_at(y1) - v_at(y));
        y = y1;
        c = c1;
    }
    let qv = traj.horizon * v_at(y) - v_parts;
    let m = y as f64 + c;
    Ok(MartingaleSample {
        xdotxi: y as f64,
        m,
        r: -c,
        qv: qv.max(0.0),
        j4,
        jumps: traj.n_jumps() as u64,
        violations: 0,
    })
}

/// Annealed sampling of the 1D chi decomposition: every walk gets its own
/// fresh line of conductances. The segment half-width starts at
/// `ceil(8 sqrt(2 M t))` and doubles when a walk leaves it.
pub fn sample_chi_walk(
    dist: &Distribution,
    ceiling: f64,
    horizon: f64,
    master_seed: u64,
    walk_index: u64,
) -> Result<MartingaleSample> {
    check_horizon(horizon)?;
    let mut half = chi_line_window(ceiling, horizon);
    let env_seed = derive_seed(master_seed, walk_index);
    loop {
        let mut spec = EnvironmentSpec::new(1, 2 * half, *dist, env_seed);
        spec.m = ceiling;
        let env = Environment::generate(&spec)?;
        let chi = ChiLine::new(&env, 0, dist.inv_mean())?;
        let mut rng = walk_stream(master_seed, 0, walk_index);
        let traj = simulate_trajectory(&env, 0, horizon, &mut rng)?;
        match accumulate_martingale_1d(&env, &chi, &traj) {
            Err(Error::Range(_)) if half < 1 << 28 => half *= 2,
            other => return other,
        }
    }
}

/// Monte Carlo sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_env: usize,
    pub n_walks_per_env: usize,
    pub horizon: f64,
    /// Defaults to `1 / horizon`.
    pub mu: Option<f64>,
    pub master_seed: u64,
}

impl McConfig {
    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(1.0 / self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_env == 0 {
            return Err(Error::config("n_env", "must be positive"));
        }
        if self.n_walks_per_env == 0 {
            return Err(Error::config("n_walks", "must be positive"));
        }
        check_horizon(self.horizon)?;
        let mu = self.mu();
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::config("mu", format!("must be positive and finite, got {mu}")));
        }
        Ok(())
    }
}

/// Samples of a Monte Carlo run, environment-major.
#[derive(Debug, Clone)]
pub struct McRun {
    pub config: McConfig,
    pub mu: f64,
    pub xi: Vec<f64>,
    pub env_seeds: Vec<u64>,
    /// `sigma_mu^2` of each environment.
    pub sigma_mu_sq: Vec<f64>,
    /// Corrector iterations of each environment.
    pub iterations: Vec<usize>,
    pub samples: Vec<MartingaleSample>,
}

impl McRun {
    pub fn n_walks(&self) -> usize {
        self.config.n_walks_per_env
    }

    pub fn env_of(&self, i: usize) -> usize {
        i / self.config.n_walks_per_env
    }

    pub fn samples_of(&self, env: usize) -> &[MartingaleSample] {
        let w = self.config.n_walks_per_env;
        &self.samples[env * w..(env + 1) * w]
    }

    pub fn violations(&self) -> u64 {
        self.samples.iter().map(|s| s.violations).sum()
    }

    pub fn total_jumps(&self) -> u64 {
        self.samples.iter().map(|s| s.jumps).sum()
    }

    /// CSV `env_seed,walk_index,t,mu,xdotxi,m,r,qv,j4,jumps`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "env_seed,walk_index,t,mu,xdotxi,m,r,qv,j4,jumps")?;
        let nw = self.config.n_walks_per_env;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                self.env_seeds[i / nw],
                i % nw,
                self.config.horizon,
                self.mu,
                s.xdotxi,
                s.m,
                s.r,
                s.qv,
                s.j4,
                s.jumps
            )?;
        }
        Ok(())
    }
}

/// Runs `n_env` environments with seeds derived from the master seed.
pub fn run_monte_carlo(
    spec: &EnvironmentSpec,
    cfg: &McConfig,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<McRun> {
    spec.validate()?;
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_env as u64).map(|k| derive_seed(cfg.master_seed, k)).collect();
    run_with(cfg, xi, opts, &seeds, |k| Environment::generate(&spec.with_seed(seeds[k])))
}

/// As [`run_monte_carlo`] on given environments, cycled over `n_env` slots.
pub fn run_monte_carlo_on(
    envs: &[Environment],
    cfg: &McConfig,
    xi: &[f64],
    opts: &SolverOptions,
) -> Result<McRun> {
    cfg.validate()?;
    if envs.is_empty() {
        return Err(Error::usage("no environments given"));
    }
    let seeds: Vec<u64> = (0..cfg.n_env).map(|k| envs[k % envs.len()].spec().seed).collect();
    run_with(cfg, xi, opts, &seeds, |k| Ok(envs[k % envs.len()].clone()))
}

fn run_with<G: Fn(usize) -> Result<Environment>>(
    cfg: &McConfig,
    xi: &[f64],
    opts: &SolverOptions,
    seeds: &[u64],
    env_of: G,
) -> Result<McRun> {
    let mu = cfg.mu();
    let nw = cfg.n_walks_per_env;
    let mut samples = vec![MartingaleSample::default(); cfg.n_env * nw];
    let mut sigma = Vec::with_capacity(cfg.n_env);
    let mut iterations = Vec::with_capacity(cfg.n_env);
    for (k, slots) in samples.chunks_mut(nw).enumerate() {
        let env = env_of(k)?;
        check_xi(xi, env.d())?;
        let corr = solve_corrector(&env, mu, xi, opts).map_err(|e| attach_seed(e, seeds[k]))?;
        let fields = MartingaleFields::new(&env, &corr)?;
        let tables = WalkTables::new(&env);
        sigma.push(crate::corrector::sigma_mu_sq(&env, &corr)?);
        iterations.push(corr.iterations);
        let n_sites = env.n_sites();
        slots.par_iter_mut().with_min_len(64).enumerate().for_each(|(w, slot)| {
            let mut rng = walk_stream(cfg.master_seed, k as u64, w as u64);
            let origin = draw_origin(&mut rng, n_sites);
            *slot = sample_martingale(&tables, &fields, origin, cfg.horizon, &mut rng);
        });
    }
    Ok(McRun {
        config: *cfg,
        mu,
        xi: xi.to_vec(),
        env_seeds: seeds.to_vec(),
        sigma_mu_sq: sigma,
        iterations,
        samples,
    })
}
