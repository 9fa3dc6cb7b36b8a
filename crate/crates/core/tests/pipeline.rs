use rcclt_core::corrector::{solve_corrector, SolverOptions};
use rcclt_core::env::{unit_xi, Distribution, Environment, EnvironmentSpec};
use rcclt_core::spectral::{build_generator, dense_corrector, phi_second_moment_exact, spectral_measure};
use rcclt_core::walk::{run_monte_carlo, McConfig};

fn spec(d: usize, l: usize, seed: u64) -> EnvironmentSpec {
    EnvironmentSpec::new(d, l, Distribution::Uniform { m: 4.0 }, seed)
}

#[test]
fn environment_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let env = Environment::generate(&spec(3, 4, 11)).unwrap();
    env.save(dir.path(), "env").unwrap();
    let back = Environment::load(&dir.path().join("env.bin")).unwrap();
    assert_eq!(back.spec(), env.spec());
    assert_eq!(back.conductances(), env.conductances());
    assert_eq!(back.fingerprint(), env.fingerprint());
}

#[test]
fn loaded_environment_gives_the_same_corrector_by_both_routes() {
    let dir = tempfile::tempdir().unwrap();
    Environment::generate(&spec(2, 6, 5)).unwrap().save(dir.path(), "e").unwrap();
    let env = Environment::load(&dir.path().join("e.bin")).unwrap();
    let xi = [0.6, -0.8];
    let mu = 0.05;
    let cg = solve_corrector(&env, mu, &xi, &SolverOptions::default()).unwrap();
    let dense = dense_corrector(&env, mu, &xi).unwrap();
    let gap = cg.phi.values.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-8, "sup gap {gap}");

    let sm = spectral_measure(&build_generator(&env).unwrap(), &env.drift_field(&xi).unwrap()).unwrap();
    let exact = phi_second_moment_exact(&sm, mu);
    assert!((cg.phi.mean_square() - exact).abs() <= 1e-8 * exact);
}

#[test]
fn monte_carlo_is_independent_of_the_pool_size() {
    let cfg = McConfig {
        n_env: 3,
        n_walks_per_env: 200,
        horizon: 8.0,
        mu: None,
        master_seed: 9,
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let r = run_monte_carlo(&spec(2, 8, 0), &cfg, &unit_xi(2), &SolverOptions::default()).unwrap();
            let mut csv = Vec::new();
            r.write_csv(&mut csv).unwrap();
            csv
        })
    };
    assert_eq!(run(1), run(4));
}
