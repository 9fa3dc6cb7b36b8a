mod args;
mod commands;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use rcclt_core::experiments::Manifest;
use serde_json::json;

use args::Cli;

enum Failure {
    Core(rcclt_core::Error),
    Check(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.kind(),
            Failure::Check(_) => "check",
        }
    }

    fn code(&self) -> u8 {
        match self.kind() {
            "config" | "usage" => 2,
            "convergence" | "capacity" | "numerical" | "range" => 3,
            "check" => 4,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Check(m) => m.clone(),
        }
    }
}

impl From<rcclt_core::Error> for Failure {
    fn from(e: rcclt_core::Error) -> Self {
        Failure::Core(e)
    }
}

fn report(kind: &str, message: &str) {
    let one_line = message.lines().map(str::trim).collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} message={one_line:?}");
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let started = Instant::now();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(rcclt_core::Error::Usage("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| rcclt_core::Error::Usage(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(rcclt_core::Error::from)?;
    let out: &Path = &cli.out;

    let name = cli.command.name();
    let outcome = commands::dispatch(&cli.command, out)?;
    let failed: Vec<&str> = outcome.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();

    let mut manifest = Manifest::new(name, outcome.config, outcome.master_seed);
    manifest.outputs = outcome.outputs;
    manifest.versions["rcclt"] = json!(env!("CARGO_PKG_VERSION"));
    manifest.results = json!({
        "values": outcome.results,
        "checks": outcome.checks,
        "all_checks_pass": failed.is_empty(),
    });
    manifest.finish(started);
    manifest.write(out, &format!("{name}.manifest.json"))?;

    for c in &outcome.checks {
        eprintln!("check {} {}: {}", c.name, if c.pass { "pass" } else { "FAIL" }, c.detail);
    }
    if cli.check && !failed.is_empty() {
        return Err(Failure::Check(format!("{name}: failed {}", failed.join(", "))));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            report("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(f.kind(), &f.message());
            ExitCode::from(f.code())
        }
    }
}
