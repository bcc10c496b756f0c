use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adkit_cli::pipeline::{self, create_run_dir};
use adkit_cli::{CliError, Mode, RunConfig};
use adkit_core::data::synthetic::SyntheticDataset;
use adkit_core::data::Layout;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adkit",
    version,
    about = "Zero-/few-shot anomaly classification and segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set k=4` or `--set train.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset layout; autodetected when omitted.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<Layout>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the projection heads.
    Train(Common),
    /// Evaluate every category of the eval dataset for each seed.
    Eval(Common),
    /// Score one image and render its anomaly map.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Category whose prompts describe the image.
        #[arg(long, default_value = "object")]
        category: String,
    },
    /// Write a small synthetic dataset in the MVTec layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse().map_err(|e: adkit_core::Error| e.to_string())
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    if let Some(layout) = common.layout {
        overrides.push(format!(
            "data.layout={}",
            serde_json::to_string(&layout).expect("layout serializes")
        ));
    }
    if let Some(mode) = common.mode {
        overrides.push(format!(
            "mode={}",
            serde_json::to_string(&mode).expect("mode serializes")
        ));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

/// Runs `f` in a fresh run directory, removing it again if `f` fails before
/// writing anything.
fn in_run_dir<T>(
    cfg: &RunConfig,
    f: impl FnOnce(&Path) -> Result<T, CliError>,
) -> Result<(T, PathBuf), CliError> {
    let dir = create_run_dir(&cfg.output_dir)?;
    match f(&dir) {
        Ok(v) => Ok((v, dir)),
        Err(e) => {
            let _ = std::fs::remove_dir(&dir);
            Err(e)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let (out, _) = in_run_dir(&cfg, |dir| pipeline::train(&cfg, dir))?;
            for e in &out.report.epochs {
                eprintln!("epoch {} mean loss {:.6}", e.epoch, e.mean_loss);
            }
            println!("{}", out.checkpoint.display());
        }
        Command::Eval(common) => {
            let cfg = load(&common)?;
            let (out, run_dir) = in_run_dir(&cfg, |dir| pipeline::eval(&cfg, dir))?;
            let m = &out.aggregate.mean.mean;
            eprintln!(
                "mean over categories: auroc_segm {:.4} f1max_segm {:.4} auroc_cls {:.4} f1max_cls {:.4} harmonic {:.4}",
                m.auroc_segm, m.f1max_segm, m.auroc_cls, m.f1max_cls, m.harmonic
            );
            println!("{}", run_dir.display());
        }
        Command::Predict {
            common,
            image,
            category,
        } => {
            let cfg = load(&common)?;
            let (p, _) = in_run_dir(&cfg, |dir| pipeline::predict(&cfg, &image, &category, dir))?;
            println!(
                "{}",
                serde_json::to_string(&p).expect("prediction serializes")
            );
        }
        Command::Synth { out, seed } => {
            let n = SyntheticDataset {
                seed,
                ..Default::default()
            }
            .write(&out)?;
            eprintln!("wrote {n} images");
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
