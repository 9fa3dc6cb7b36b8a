use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rcclt_core::env::{unit_xi, Distribution, EnvironmentSpec};
use rcclt_core::Result;

#[derive(Debug, Parser)]
#[command(name = "rcclt", version, about = "Random conductance model: correctors, walks and CLT experiments")]
pub struct Cli {
    /// Worker threads. Never changes any output.
    #[arg(long, global = true, env = "RCCLT_THREADS")]
    pub threads: Option<usize>,

    /// Output directory, created if missing.
    #[arg(long, global = true, env = "RCCLT_OUT", default_value = ".")]
    pub out: PathBuf,

    /// Exit with status 4 when the command's acceptance check fails.
    #[arg(long, global = true)]
    pub check: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample an environment and write env.bin / env.json.
    GenEnv(GenEnvArgs),
    /// Solve the regularized corrector on one environment.
    SolveCorrector(SolveArgs),
    /// Monte Carlo martingale samples at one horizon.
    Simulate(SimulateArgs),
    /// Spectral measure of the drift and the exact remainder against Monte Carlo.
    Spectral(SpectralArgs),
    /// Kolmogorov distance of the normalized displacement across horizons.
    Clt(CltArgs),
    /// Convergence of sigma_mu^2 as mu decreases.
    Sigma(SigmaArgs),
    /// Variance decay of the semigroup applied to v_mu.
    Decay(DecayArgs),
    /// Variance of box averages of w_mu.
    Boxvar(BoxvarArgs),
    /// Moments of the corrector across mu.
    Moments(MomentsArgs),
    /// Tail frequency of the 1D harmonic coordinate correction.
    ChiTail(ChiTailArgs),
    /// Log-log least squares on two columns of a CSV file.
    RateFit(RateFitArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenEnv(_) => "gen-env",
            Command::SolveCorrector(_) => "solve-corrector",
            Command::Simulate(_) => "simulate",
            Command::Spectral(_) => "spectral",
            Command::Clt(_) => "clt",
            Command::Sigma(_) => "sigma",
            Command::Decay(_) => "decay",
            Command::Boxvar(_) => "boxvar",
            Command::Moments(_) => "moments",
            Command::ChiTail(_) => "chi-tail",
            Command::RateFit(_) => "rate-fit",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    /// Lattice dimension, 1 to 4.
    #[arg(long, default_value_t = 2)]
    pub d: usize,

    /// Torus side (even). The default depends on the command and on d.
    #[arg(long = "L")]
    pub l: Option<usize>,

    /// constant:c | twopoint:M:p | uniform:M. Defaults to twopoint:4:0.5 in
    /// d = 1 and uniform:4 otherwise.
    #[arg(long)]
    pub dist: Option<Distribution>,

    /// Ellipticity ceiling; defaults to the distribution's own upper end.
    #[arg(long = "M")]
    pub m: Option<f64>,

    /// Environment seed for single-environment commands, master seed for
    /// ensembles.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Default torus sides for d = 1..=4.
pub type SideTable = [usize; 4];

pub const MC_SIDES: SideTable = [4096, 32, 16, 8];
pub const DENSE_SIDES: SideTable = [64, 8, 8, 4];
pub const DECAY_SIDES: SideTable = [256, 32, 8, 4];

impl EnvArgs {
    pub fn resolve(&self, sides: SideTable) -> Result<EnvironmentSpec> {
        let dist = self.dist.unwrap_or(if self.d == 1 {
            Distribution::TwoPoint { m: 4.0, p: 0.5 }
        } else {
            Distribution::Uniform { m: 4.0 }
        });
        let l = self
            .l
            .unwrap_or_else(|| sides[self.d.clamp(1, 4) - 1]);
        let mut spec = EnvironmentSpec::new(self.d, l, dist, self.seed);
        if let Some(m) = self.m {
            spec.m = m;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Args)]
pub struct XiArg {
    /// Projection direction, comma separated. Defaults to e_1.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi: Option<Vec<f64>>,
}

impl XiArg {
    pub fn resolve(&self, d: usize) -> Vec<f64> {
        self.xi.clone().unwrap_or_else(|| unit_xi(d))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Corrector stopping tolerance (relative sup-norm residual).
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,

    /// Corrector iteration cap; defaults to 20 L^d.
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenEnvArgs {
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    /// Regularization.
    #[arg(long)]
    pub mu: f64,

    /// Read the environment from a file written by gen-env instead of
    /// sampling one.
    #[arg(long = "env")]
    pub env_file: Option<PathBuf>,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    /// Horizon.
    #[arg(long)]
    pub t: f64,

    /// Environments; defaults to --n-walks.
    #[arg(long)]
    pub n_env: Option<usize>,

    /// Walks per environment.
    #[arg(long, default_value_t = 256)]
    pub n_walks: usize,

    /// Regularization; defaults to 1/t.
    #[arg(long)]
    pub mu: Option<f64>,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SpectralArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    /// Horizons for the remainder comparison; mu = 1/t at each.
    #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
    pub t: Vec<f64>,

    /// Regularization for the resolvent identity check.
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,

    /// Walks per horizon.
    #[arg(long, default_value_t = 10_000)]
    pub n_walks: usize,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct CltArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    /// Horizons: increasing, geometric, at least four.
    #[arg(long, value_delimiter = ',', required = true)]
    pub t: Vec<f64>,

    /// Environments; defaults to --n-walks.
    #[arg(long)]
    pub n_env: Option<usize>,

    /// Walks per environment.
    #[arg(long, default_value_t = 256)]
    pub n_walks: usize,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SigmaArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    /// Geometric grid of regularizations.
    #[arg(long, value_delimiter = ',', default_value = "1,0.25,0.0625,0.015625")]
    pub mu: Vec<f64>,

    #[arg(long, default_value_t = 16)]
    pub n_env: usize,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct DecayArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    #[arg(long, default_value_t = 1e-3)]
    pub mu: f64,

    /// Time grid.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    pub t: Vec<f64>,

    #[arg(long, default_value_t = 100)]
    pub n_env: usize,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct BoxvarArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    #[arg(long, default_value_t = 0.01)]
    pub mu: f64,

    /// Box half-widths; boxes must fit in the torus.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub n: Vec<usize>,

    #[arg(long, default_value_t = 100)]
    pub n_env: usize,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct MomentsArgs {
    #[command(flatten)]
    pub env: EnvArgs,

    /// Geometric grid of regularizations.
    #[arg(long, value_delimiter = ',', default_value = "1,0.1,0.01")]
    pub mu: Vec<f64>,

    /// Even moment order.
    #[arg(long, default_value_t = 4)]
    pub p: u32,

    #[arg(long, default_value_t = 16)]
    pub n_env: usize,

    #[command(flatten)]
    pub xi: XiArg,

    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct ChiTailArgs {
    /// Conductance law of the i.i.d. line.
    #[arg(long, default_value = "twopoint:4:0.5")]
    pub dist: Distribution,

    /// Path lengths.
    #[arg(long, value_delimiter = ',', default_value = "100,400,1600")]
    pub n: Vec<usize>,

    /// Threshold exponent offset in (0, 1/2).
    #[arg(long, default_value_t = 0.25)]
    pub eps: f64,

    #[arg(long, default_value_t = 10_000)]
    pub n_paths: usize,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RateFitArgs {
    /// CSV file with a header row.
    #[arg(long = "in")]
    pub input: PathBuf,

    /// Column used as abscissa.
    #[arg(long, default_value = "t")]
    pub x: String,

    /// Column used as ordinate.
    #[arg(long)]
    pub y: String,
}
