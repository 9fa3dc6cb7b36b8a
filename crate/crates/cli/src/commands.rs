use std::path::Path;

use rcclt_core::corrector::{residual_sup_norm, sigma_mu_sq, solve_corrector, SolverOptions};
use rcclt_core::env::{Distribution, Environment};
use rcclt_core::experiments::{
    chi_tail_experiment, clt_experiment, phi_moment_experiment, remainder_experiment,
    sigma_convergence_experiment, spatial_average_variance, write_box_csv, write_file,
    write_moment_csv, write_remainder_csv, write_tail_csv, Ensemble, GridRow,
};
use rcclt_core::reduce::mean_stderr;
use rcclt_core::spectral::{build_generator, phi_second_moment_exact, spectral_measure, variance_decay_curve};
use rcclt_core::stats::{rate_fit, RateFit};
use rcclt_core::walk::{run_monte_carlo, McConfig};
use rcclt_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;

/// Pass/fail of one acceptance check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        pass,
        detail: detail.into(),
    }
}

/// What a command produced, before the manifest is assembled.
pub struct Outcome {
    pub config: Value,
    pub master_seed: Option<u64>,
    pub outputs: Vec<String>,
    pub results: Value,
    pub checks: Vec<Check>,
}

pub fn dispatch(cmd: &Command, out: &Path) -> Result<Outcome> {
    match cmd {
        Command::GenEnv(a) => gen_env(a, out),
        Command::SolveCorrector(a) => solve(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Spectral(a) => spectral(a, out),
        Command::Clt(a) => clt(a, out),
        Command::Sigma(a) => sigma(a, out),
        Command::Decay(a) => decay(a, out),
        Command::Boxvar(a) => boxvar(a, out),
        Command::Moments(a) => moments(a, out),
        Command::ChiTail(a) => chi_tail(a, out),
        Command::RateFit(a) => fit_csv(a, out),
    }
}

fn solver_options(s: &SolverArgs) -> SolverOptions {
    SolverOptions {
        tol: s.tol,
        max_iter: s.max_iter,
    }
}

fn solver_json(s: &SolverArgs) -> Value {
    json!({ "tol": s.tol, "max_iter": s.max_iter })
}

fn fmt_list(xs: impl IntoIterator<Item = f64>) -> String {
    xs.into_iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", ")
}

/// Names the file in I/O errors.
fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn gen_env(a: &GenEnvArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(MC_SIDES)?;
    let env = Environment::generate(&spec)?;
    env.save(out, "env")?;
    Ok(Outcome {
        config: json!({ "spec": spec }),
        master_seed: None,
        outputs: vec!["env.bin".into(), "env.json".into()],
        results: json!({
            "n_edges": env.conductances().len(),
            "min": env.min_conductance(),
            "max": env.max_conductance(),
            "fingerprint": format!("{:016x}", env.fingerprint()),
        }),
        checks: Vec::new(),
    })
}

fn solve(a: &SolveArgs, out: &Path) -> Result<Outcome> {
    let env = match &a.env_file {
        Some(path) => Environment::load(path).map_err(|e| with_path(e, path))?,
        None => Environment::generate(&a.env.resolve(MC_SIDES)?)?,
    };
    let xi = a.xi.resolve(env.d());
    let corr = solve_corrector(&env, a.mu, &xi, &solver_options(&a.solver))?;
    corr.save(out, "corrector")?;
    let residual = residual_sup_norm(&env, &corr)?;
    let target = a.solver.tol * env.drift_field(&xi)?.sup_norm().max(1.0);
    Ok(Outcome {
        config: json!({
            "spec": env.spec(),
            "env_file": a.env_file,
            "mu": a.mu,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: None,
        outputs: vec!["corrector.csv".into(), "corrector.json".into()],
        results: json!({
            "sigma_mu_sq": sigma_mu_sq(&env, &corr)?,
            "residual": residual,
            "iterations": corr.iterations,
            "phi_sup": corr.phi.sup_norm(),
        }),
        checks: vec![check(
            "residual",
            residual <= target,
            format!("residual {residual:.3e}, target {target:.3e}"),
        )],
    })
}

fn simulate(a: &SimulateArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(MC_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let cfg = McConfig {
        n_env: a.n_env.unwrap_or(a.n_walks),
        n_walks_per_env: a.n_walks,
        horizon: a.t,
        mu: a.mu,
        master_seed: spec.seed,
    };
    cfg.validate()?;
    let run = run_monte_carlo(&spec, &cfg, &xi, &solver_options(&a.solver))?;
    write_file(out, "samples.csv", |w| run.write_csv(w))?;

    let m: Vec<f64> = run.samples.iter().map(|s| s.m).collect();
    let iso: Vec<f64> = run.samples.iter().map(|s| s.m * s.m - s.qv).collect();
    let (mean_m, mean_m_se) = mean_stderr(&m);
    let (gap, gap_se) = mean_stderr(&iso);
    let (sigma2, _) = mean_stderr(&run.sigma_mu_sq);
    Ok(Outcome {
        config: json!({
            "spec": spec,
            "t": a.t,
            "n_env": cfg.n_env,
            "n_walks": cfg.n_walks_per_env,
            "mu": cfg.mu(),
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["samples.csv".into()],
        results: json!({
            "n_samples": run.samples.len(),
            "sigma_mu_sq": sigma2,
            "mean_m": mean_m,
            "mean_m_se": mean_m_se,
            "isometry_gap": gap,
            "isometry_gap_se": gap_se,
            "jumps": run.total_jumps(),
            "violations": run.violations(),
        }),
        checks: vec![
            check(
                "martingale_mean",
                mean_m.abs() <= 3.0 * mean_m_se,
                format!("mean(m) {mean_m:.4e} +- {mean_m_se:.4e}"),
            ),
            check(
                "isometry",
                gap.abs() <= 3.0 * gap_se,
                format!("mean(m^2 - qv) {gap:.4e} +- {gap_se:.4e}"),
            ),
            check(
                "jump_domination",
                run.violations() == 0,
                format!("{} violations over {} jumps", run.violations(), run.total_jumps()),
            ),
        ],
    })
}

fn spectral(a: &SpectralArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(DENSE_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let opts = solver_options(&a.solver);
    let env = Environment::generate(&spec)?;
    let q = build_generator(&env)?;
    let drift = env.drift_field(&xi)?;
    let sm = spectral_measure(&q, &drift)?;
    write_file(out, "spectrum.csv", |w| sm.write_csv(w))?;

    let mass = sm.total_mass();
    let energy = drift.mean_square();
    let parseval = (mass - energy).abs() / energy.max(1e-300);
    let phi2 = solve_corrector(&env, a.mu, &xi, &opts)?.phi.mean_square();
    let exact_phi2 = phi_second_moment_exact(&sm, a.mu);
    let resolvent = (phi2 - exact_phi2).abs() / exact_phi2.abs().max(1e-300);

    let (rows, _) = remainder_experiment(&env, &a.t, a.n_walks, spec.seed, &xi, &opts)?;
    write_file(out, "remainder.csv", |w| write_remainder_csv(w, &rows))?;
    let z: Vec<f64> = rows.iter().map(|r| r.z_score()).collect();
    let violations: u64 = rows.iter().map(|r| r.violations).sum();
    let jumps: u64 = rows.iter().map(|r| r.jumps).sum();
    let m_ok = rows.iter().all(|r| r.mean_m.abs() <= 3.0 * r.mean_m_se);
    let iso_ok = rows
        .iter()
        .all(|r| r.isometry_gap.abs() <= 3.0 * r.isometry_gap_se);

    Ok(Outcome {
        config: json!({
            "spec": spec,
            "t": a.t,
            "mu": a.mu,
            "n_walks": a.n_walks,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["spectrum.csv".into(), "remainder.csv".into()],
        results: json!({
            "total_mass": mass,
            "drift_mean_square": energy,
            "phi_mean_square": phi2,
            "phi_mean_square_exact": exact_phi2,
            "z_scores": z,
            "jumps": jumps,
            "violations": violations,
        }),
        checks: vec![
            check("parseval", parseval <= 1e-10, format!("relative gap {parseval:.3e}")),
            check("resolvent", resolvent <= 1e-8, format!("relative gap {resolvent:.3e}")),
            check(
                "remainder",
                z.iter().all(|z| z.abs() <= 3.0),
                format!("z = {}", fmt_list(z.iter().copied())),
            ),
            check("martingale_mean", m_ok, "mean(m) within 3 standard errors"),
            check("isometry", iso_ok, "mean(m^2 - qv) within 3 standard errors"),
            check(
                "jump_domination",
                violations == 0,
                format!("{violations} violations over {jumps} jumps"),
            ),
        ],
    })
}

/// Exponent of the Berry-Esseen rate for the fitted KS curve, and whether
/// the rate carries a logarithmic factor in that dimension.
fn clt_rate(d: usize) -> (f64, bool) {
    match d {
        1 => (-0.1, false),
        2 => (-0.1, true),
        3 => (-0.2, true),
        _ => (-0.2, false),
    }
}

fn clt(a: &CltArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(MC_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let ens = Ensemble {
        n_env: a.n_env.unwrap_or(a.n_walks),
        n_walks: a.n_walks,
        master_seed: spec.seed,
    };
    let rep = clt_experiment(&spec, &a.t, &ens, &xi, &solver_options(&a.solver))?;
    write_file(out, "report.csv", |w| rep.write_csv(w))?;

    const SLACK: f64 = 1.5;
    let (exponent, log_factor) = clt_rate(spec.d);
    let over = rep.bound_violations(exponent, SLACK);
    let mut checks = vec![check(
        "ks_bound",
        over.is_empty(),
        format!(
            "ks = {}; horizons above ks(t0) (t/t0)^{exponent} * {SLACK}: {over:?}",
            fmt_list(rep.rows.iter().map(|r| r.ks))
        ),
    )];
    // With a logarithmic factor the fitted slope is reported, not tested.
    if !log_factor {
        checks.push(check(
            "ks_slope",
            rep.fit.slope <= exponent,
            format!("slope {:.4} against {exponent}", rep.fit.slope),
        ));
    }
    Ok(Outcome {
        config: json!({
            "spec": spec,
            "t": a.t,
            "n_env": ens.n_env,
            "n_walks": ens.n_walks,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["report.csv".into()],
        results: json!({
            "fit": rep.fit,
            "exponent": exponent,
            "slack": SLACK,
            "bound_violations": over,
        }),
        checks,
    })
}

/// `a[i+1] < a[i]` along the sequence, treating values below `floor` as
/// converged.
fn strictly_decreasing(a: &[f64], floor: f64) -> bool {
    a.windows(2).all(|w| w[1] < w[0] || w[1] <= floor)
}

fn sigma(a: &SigmaArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(MC_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let rep = sigma_convergence_experiment(&spec, &a.mu, a.n_env, spec.seed, &xi, &solver_options(&a.solver))?;
    write_file(out, "sigma.csv", |w| rep.write_csv(w))?;

    let scale = rep.rows.iter().map(|r| r.value.abs()).fold(0.0, f64::max);
    let (label, gaps) = match rep.gaps() {
        Some(g) => ("gap to the exact limit", g),
        None => (
            "successive differences",
            rep.rows.windows(2).map(|w| (w[1].value - w[0].value).abs()).collect(),
        ),
    };
    Ok(Outcome {
        config: json!({
            "spec": spec,
            "mu": a.mu,
            "n_env": a.n_env,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["sigma.csv".into()],
        results: json!({ "exact": rep.exact, "gaps": gaps }),
        checks: vec![check(
            "gaps_decreasing",
            strictly_decreasing(&gaps, 1e-9 * scale),
            format!("{label}: {}", fmt_list(gaps.iter().copied())),
        )],
    })
}

fn decay(a: &DecayArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(DECAY_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let curve = variance_decay_curve(&spec, a.n_env, a.mu, &a.t, spec.seed, &xi, &solver_options(&a.solver))?;
    write_file(out, "decay.csv", |w| curve.write_csv(w))?;

    const BAND: (f64, f64) = (-1.0, -0.3);
    let slope = curve.fit.map(|f| f.slope);
    Ok(Outcome {
        config: json!({
            "spec": spec,
            "mu": a.mu,
            "t": a.t,
            "n_env": a.n_env,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["decay.csv".into()],
        results: json!({
            "mean_gap": curve.mean_gap,
            "knee": curve.knee,
            "fit_window": curve.fit_window,
            "fit": curve.fit,
            "slope_se": curve.slope_se,
            "monotone": curve.monotone,
        }),
        checks: vec![
            check("monotone", curve.monotone, "every per-environment curve non-increasing"),
            check(
                "slope",
                slope.is_some_and(|s| (BAND.0..=BAND.1).contains(&s)),
                format!(
                    "slope {} over t <= knee {:.3}, band [{}, {}]",
                    slope.map_or("none".into(), |s| format!("{s:.4}")),
                    curve.knee,
                    BAND.0,
                    BAND.1
                ),
            ),
        ],
    })
}

/// Fit over rows with positive abscissa and value; `None` with fewer than
/// two such rows.
fn grid_fit(rows: &[GridRow]) -> Option<RateFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.x > 0.0 && r.value > 0.0)
        .map(|r| (r.x, r.value))
        .collect();
    rate_fit(&pts).ok()
}

fn boxvar_band(d: usize) -> Option<(f64, f64)> {
    match d {
        1 => None,
        2 => Some((-1.6, -0.6)),
        _ => {
            let e = 1.0 - d as f64;
            Some((e - 0.6, e + 0.6))
        }
    }
}

fn boxvar(a: &BoxvarArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(MC_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let rows = spatial_average_variance(&spec, a.n_env, a.mu, &a.n, spec.seed, &xi, &solver_options(&a.solver))?;
    write_file(out, "boxvar.csv", |w| write_box_csv(w, &rows))?;

    let fit = grid_fit(&rows);
    let checks = match boxvar_band(spec.d) {
        Some((lo, hi)) => vec![check(
            "slope",
            fit.is_some_and(|f| (lo..=hi).contains(&f.slope)),
            format!(
                "slope {} against [{lo}, {hi}]",
                fit.map_or("none".into(), |f| format!("{:.4}", f.slope))
            ),
        )],
        None => Vec::new(),
    };
    Ok(Outcome {
        config: json!({
            "spec": spec,
            "mu": a.mu,
            "n": a.n,
            "n_env": a.n_env,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["boxvar.csv".into()],
        results: json!({ "fit": fit }),
        checks,
    })
}

fn moments(a: &MomentsArgs, out: &Path) -> Result<Outcome> {
    let spec = a.env.resolve(MC_SIDES)?;
    let xi = a.xi.resolve(spec.d);
    let rows = phi_moment_experiment(&spec, &a.mu, a.p, a.n_env, spec.seed, &xi, &solver_options(&a.solver))?;
    write_file(out, "moments.csv", |w| write_moment_csv(w, &rows))?;

    const MAX_RATIO: f64 = 3.0;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].value / w[0].value).collect();
    let bounded = rows.windows(2).all(|w| w[1].value <= MAX_RATIO * w[0].value);
    Ok(Outcome {
        config: json!({
            "spec": spec,
            "mu": a.mu,
            "p": a.p,
            "n_env": a.n_env,
            "xi": xi,
            "solver": solver_json(&a.solver),
        }),
        master_seed: Some(spec.seed),
        outputs: vec!["moments.csv".into()],
        results: json!({ "ratios": ratios }),
        checks: vec![check(
            "bounded",
            bounded,
            format!("successive ratios {} against {MAX_RATIO}", fmt_list(ratios.iter().copied())),
        )],
    })
}

/// Hoeffding bound `2 exp(-2 n^{2 eps} / c^2)` for a sum of `n` increments
/// `E[1/w]^{-1}/w - 1` with range `c`.
fn hoeffding_tail(dist: &Distribution, n: usize, eps: f64) -> f64 {
    let (lo, hi) = match *dist {
        Distribution::Constant { c } => (c, c),
        Distribution::TwoPoint { m, .. } | Distribution::Uniform { m } => (1.0, m),
    };
    let c = dist.inv_mean() * (1.0 / lo - 1.0 / hi);
    if c <= 0.0 {
        return 0.0;
    }
    (2.0 * (-2.0 * (n as f64).powf(2.0 * eps) / (c * c)).exp()).min(1.0)
}

fn chi_tail(a: &ChiTailArgs, out: &Path) -> Result<Outcome> {
    let rows = chi_tail_experiment(&a.dist, &a.n, a.eps, a.n_paths, a.seed)?;
    write_file(out, "chi_tail.csv", |w| write_tail_csv(w, &rows))?;

    let bounds: Vec<f64> = rows.iter().map(|r| hoeffding_tail(&a.dist, r.n, a.eps)).collect();
    let within = rows.iter().zip(&bounds).all(|(r, &b)| {
        r.frequency <= b + 3.0 * (b * (1.0 - b) / r.n_paths as f64).sqrt()
    });
    let non_increasing = rows
        .windows(2)
        .all(|w| w[1].n < w[0].n || w[1].frequency <= w[0].frequency + 3.0 * w[0].stderr.max(w[1].stderr));
    Ok(Outcome {
        config: json!({
            "dist": a.dist,
            "n": a.n,
            "eps": a.eps,
            "n_paths": a.n_paths,
        }),
        master_seed: Some(a.seed),
        outputs: vec!["chi_tail.csv".into()],
        results: json!({ "hoeffding": bounds }),
        checks: vec![
            check(
                "hoeffding",
                within,
                format!(
                    "frequencies {} against {}",
                    fmt_list(rows.iter().map(|r| r.frequency)),
                    fmt_list(bounds.iter().copied())
                ),
            ),
            check("non_increasing", non_increasing, "frequency non-increasing in n up to stderr"),
        ],
    })
}

fn read_columns(path: &Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let format = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => with_path(Error::Io(io), path),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers().map_err(format)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Usage(format!("column {name:?} not found in {}", path.display())))
    };
    let (ix, iy) = (column(x)?, column(y)?);
    let mut pts = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(format)?;
        let cell = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            s.parse().map_err(|_| {
                Error::Format(format!("{}: row {}: {s:?} is not a number", path.display(), line + 1))
            })
        };
        pts.push((cell(ix)?, cell(iy)?));
    }
    Ok(pts)
}

fn fit_csv(a: &RateFitArgs, out: &Path) -> Result<Outcome> {
    let pts = read_columns(&a.input, &a.x, &a.y)?;
    let fit = rate_fit(&pts)?;
    let body = json!({ "x": a.x, "y": a.y, "n_points": pts.len(), "fit": fit });
    std::fs::write(out.join("rate_fit.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    println!("slope={} intercept={} r2={}", fit.slope, fit.intercept, fit.r2);
    Ok(Outcome {
        config: json!({ "in": a.input, "x": a.x, "y": a.y }),
        master_seed: None,
        outputs: vec!["rate_fit.json".into()],
        results: json!({ "fit": fit }),
        checks: Vec::new(),
    })
}
