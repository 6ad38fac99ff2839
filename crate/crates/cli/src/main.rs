use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

#[derive(Parser, Debug)]
#[command(name = "splatsurf", version, about = "Gaussian splatting for novel-view rendering and surface reconstruction")]
struct Cli {
    /// Worker threads (0 = all logical cores). Results do not depend on it.
    #[arg(long, global = true, env = "SPLATSURF_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray-trace a canonical scene into a dataset directory.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Fuse geometry-pass depth into a TSDF and write the mesh (.ply or .obj).
    Extract(ExtractArgs),
    /// Held-out PSNR/SSIM and mesh F1/Chamfer of a checkpoint.
    Eval(EvalArgs),
    /// Pruning and ablation studies.
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// sphere, blocks or room.
    #[arg(long, default_value = "sphere")]
    pub scene: String,
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    /// Size of the initial point cloud.
    #[arg(long, default_value_t = 4000)]
    pub points: usize,
    /// Standard deviation of the initial point jitter.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with [train] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total iterations; warm-up and densification window scale along.
    #[arg(long, conflicts_with = "resume")]
    pub iters: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Continue from a checkpoint (its config is used).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed iterations and save a checkpoint.
    #[arg(long)]
    pub until: Option<usize>,
    /// Also save `checkpoint.ckpt` every N iterations.
    #[arg(long)]
    pub save_every: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output mesh; the extension selects PLY or OBJ.
    #[arg(long)]
    pub out: PathBuf,
    /// TSDF voxel size in world units (default: scene box / 128).
    #[arg(long)]
    pub voxel: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with an [eval] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum StudyCommand {
    /// Remove neural Gaussians ranked by distance to the true surface.
    Prune(PruneArgs),
    /// Train and evaluate ablation arms with one seed and budget.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Retained percentages, comma separated.
    #[arg(long, default_value = "100,90,75,50,25,10")]
    pub fractions: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma separated: a, b, c, d, baseline, detach-cov, detach-opacity.
    #[arg(long, default_value = "a,b,c,d")]
    pub arms: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(4);
        }
    }
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Extract(a) => commands::extract(a),
        Command::Eval(a) => commands::eval(a),
        Command::Study(StudyCommand::Prune(a)) => commands::prune(a),
        Command::Study(StudyCommand::Ablate(a)) => commands::ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
