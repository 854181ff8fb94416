mod qc;
mod segment;
mod simulate;
mod tensor;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jointseg::error::Category;
use jointseg::io::{read_config, RunConfig};
use jointseg::{Error, Result};

#[derive(Parser)]
#[command(name = "jointseg", version, about = "Joint structural/diffusion MRI segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a subject against a probabilistic atlas.
    Segment(segment::SegmentArgs),
    /// Draw a synthetic dataset from the generative model.
    Simulate(simulate::SimulateArgs),
    /// Fit diffusion tensors and write FA and principal directions.
    TensorFeatures(tensor::TensorArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Order-fixed reductions: results do not depend on the thread count.
    #[arg(long)]
    pub deterministic: bool,
}

impl CommonArgs {
    pub fn load_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn prepare_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::Io {
            path: self.out_dir.clone(),
            source: e,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Config => 2,
        Category::Data => 3,
        Category::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let common = match &cli.command {
        Command::Segment(a) => &a.common,
        Command::Simulate(a) => &a.common,
        Command::TensorFeatures(a) => &a.common,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            eprintln!("jointseg: error[config]: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("jointseg: error[config]: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Segment(a) => segment::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::TensorFeatures(a) => tensor::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = e.category();
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("jointseg: error[{}]: {msg}", c.as_str());
            ExitCode::from(exit_code(c))
        }
    }
}
