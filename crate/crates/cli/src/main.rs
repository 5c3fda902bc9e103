use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfface_core::commands::{cmd_eval, cmd_sweep, cmd_synth, cmd_train};
use lfface_core::config::RunConfig;
use lfface_core::synth::SynthDatasetConfig;
use lfface_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "lfface", version, about = "Spatio-angular face recognition on light-field images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic light-field face dataset.
    Synth(SynthArgs),
    /// Train angular models on the protocol's training part.
    Train(RunArgs),
    /// Score a split part with trained models and write reports.
    Eval(RunArgs),
    /// Train and validate over a hyper-parameter grid.
    Sweep(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    /// Variations per session (at most 20).
    #[arg(long, default_value_t = 20)]
    variations: usize,
    #[arg(long, default_value_t = 2)]
    sessions: usize,
    /// Angular grid as UxV.
    #[arg(long, default_value = "9x9")]
    views: String,
    /// View size in pixels as WxH.
    #[arg(long, default_value = "32x32")]
    size: String,
    /// Comma-separated disparity levels in pixels per view step.
    #[arg(long, default_value = "0.5,1.0")]
    disparities: String,
    #[arg(long, default_value_t = 6.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Line-based `key = value` file applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    topology: Option<String>,
    /// toy-cnn[:dim[:seed]], random-projection[:dim[:seed]] or embedding:<path>
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    batches: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<String>,
    /// Global gradient-norm clip, or `none`.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Directory holding trained models (eval); defaults to --out.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// Side of the square network input, in pixels.
    #[arg(long)]
    target: Option<String>,
    /// Grid assumed for embedding-only records, as UxV.
    #[arg(long)]
    grid: Option<String>,
    /// mean or last-cell
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long = "share-branch-weights")]
    share_branch_weights: Option<String>,
    /// Split part scored by eval: train, validation or test.
    #[arg(long)]
    part: Option<String>,
    #[arg(long = "sweep-hidden")]
    sweep_hidden: Option<String>,
    #[arg(long = "sweep-batches")]
    sweep_batches: Option<String>,
    #[arg(long = "sweep-epochs")]
    sweep_epochs: Option<String>,
    #[arg(long = "sweep-topologies")]
    sweep_topologies: Option<String>,
    /// Any other config key, as KEY=VALUE; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> lfface_core::Result<RunConfig> {
        let mut run = RunConfig::default();
        if let Some(path) = &self.config {
            run.apply_file(path)?;
        }
        let flags = [
            ("manifest", &self.manifest),
            ("topology", &self.topology),
            ("backend", &self.backend),
            ("hidden", &self.hidden),
            ("batches", &self.batches),
            ("epochs", &self.epochs),
            ("learning_rate", &self.learning_rate),
            ("clip", &self.clip),
            ("protocol", &self.protocol),
            ("out", &self.out),
            ("models", &self.models),
            ("seed", &self.seed),
            ("workers", &self.workers),
            ("target", &self.target),
            ("grid", &self.grid),
            ("aggregation", &self.aggregation),
            ("share_branch_weights", &self.share_branch_weights),
            ("eval_part", &self.part),
            ("sweep_hidden", &self.sweep_hidden),
            ("sweep_batches", &self.sweep_batches),
            ("sweep_epochs", &self.sweep_epochs),
            ("sweep_topologies", &self.sweep_topologies),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                run.apply(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            run.apply(k, v)?;
        }
        run.validate()?;
        Ok(run)
    }
}

fn pair(what: &str, s: &str) -> lfface_core::Result<(usize, usize)> {
    let bad = || Error::Config(format!("--{what}: expected AxB, got {s:?}"));
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn synth(args: &SynthArgs) -> lfface_core::Result<()> {
    let (views_u, views_v) = pair("views", &args.views)?;
    let (width, height) = pair("size", &args.size)?;
    let disparities = args
        .disparities
        .split(',')
        .map(|d| d.trim().parse().map_err(|_| Error::Config(format!("--disparities: bad value {d:?}"))))
        .collect::<lfface_core::Result<Vec<f64>>>()?;
    let cfg = SynthDatasetConfig {
        subjects: args.subjects,
        variations: args.variations,
        sessions: args.sessions,
        views_u,
        views_v,
        width,
        height,
        disparities,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let manifest = cmd_synth(&cfg, &args.out)?;
    let images: usize = manifest.subjects.iter().flat_map(|s| s.sessions.values()).map(Vec::len).sum();
    println!("wrote {images} light-field images for {} subjects to {}", manifest.subjects.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> lfface_core::Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Train(args) => {
            let run = args.resolve()?;
            let summary = cmd_train(&run)?;
            for (path, loss) in summary.model_paths.iter().zip(&summary.final_losses) {
                println!("{} (final loss {loss:.6})", path.display());
            }
            Ok(())
        }
        Command::Eval(args) => {
            let run = args.resolve()?;
            let summary = cmd_eval(&run)?;
            print!("{}", summary.outcome.report.to_text());
            print!("{}", summary.timing.to_text());
            Ok(())
        }
        Command::Sweep(args) => {
            let run = args.resolve()?;
            let rows = cmd_sweep(&run)?;
            print!("{}", lfface_core::commands::sweep_csv(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Divergence => 4,
            })
        }
    }
}
