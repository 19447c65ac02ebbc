mod commands;
mod potential;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Hybrid invariant/equivariant interatomic potential: training, prediction
/// and atomistic workflows.
///
/// Exit codes: 0 success, 2 usage or configuration error, 3 training
/// divergence, 4 model/data mismatch, 5 relaxation not converged.
/// HIENET_THREADS caps the number of worker threads.
#[derive(Parser, Debug)]
#[command(name = "hienet", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint plus metrics.csv.
    Train(TrainArgs),
    /// Write an oracle-labeled dataset as extended XYZ.
    GenData(GenDataArgs),
    /// Report prediction errors against labeled frames.
    Evaluate(EvaluateArgs),
    /// Print energy, forces and stress for each frame.
    Predict(PredictArgs),
    /// Molecular dynamics (velocity Verlet, or Langevin with friction > 0).
    Md(MdArgs),
    /// Relax positions and optionally the cell.
    Relax(RelaxArgs),
    /// Phonon frequencies from finite displacements.
    Phonon(PhononArgs),
    /// Elastic stiffness and bulk moduli from stress–strain fits.
    Elastic(ElasticArgs),
    /// Throughput and held-out loss of the architecture variants.
    Bench(BenchArgs),
    /// Print every configuration key with its default.
    Config,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PotentialArgs {
    /// Checkpoint path, `lj`, `lj:EPS,SIGMA,RCUT` or `isotropic:C11,C12`.
    #[arg(long)]
    pub potential: String,
    /// Extended-XYZ structure file; the first frame is used.
    #[arg(long)]
    pub structure: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub potential: String,
    /// Extended-XYZ file of labeled frames.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub potential: String,
    #[arg(long)]
    pub structure: PathBuf,
    /// Writes the frames annotated with the predictions.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MdArgs {
    #[command(flatten)]
    pub common: PotentialArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    /// fs
    #[arg(long)]
    pub dt: Option<f64>,
    /// K
    #[arg(long)]
    pub temperature: Option<f64>,
    /// 1/fs
    #[arg(long)]
    pub friction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct RelaxArgs {
    #[command(flatten)]
    pub common: PotentialArgs,
    /// eV/Å
    #[arg(long, default_value_t = hienet_core::simulate::relax::DEFAULT_FORCE_TOLERANCE)]
    pub fmax: f64,
    #[arg(long, default_value_t = 500)]
    pub max_steps: usize,
    #[arg(long)]
    pub cell: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PhononArgs {
    #[command(flatten)]
    pub common: PotentialArgs,
    /// Fractional wavevector `q1,q2,q3`; repeatable.
    #[arg(long = "q", required = true)]
    pub q: Vec<String>,
    /// Supercell repeats `n1,n2,n3`.
    #[arg(long)]
    pub supercell: Option<String>,
    /// Å
    #[arg(long)]
    pub displacement: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ElasticArgs {
    #[command(flatten)]
    pub common: PotentialArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
