use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eegflow::pipeline::{cmd_convert, cmd_reduce_experiment, cmd_train, cmd_visualize, PipelineConfig};
use eegflow::synth::{write_synth_dataset, SynthDataset};
use eegflow::Error;

#[derive(Parser)]
#[command(name = "eegflow", version, about = "EEG optical flow conversion and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, e.g. `--set resample=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Raw EEG to flow containers and manifest.
    Convert(Common),
    /// Joint training, classifier training and evaluation.
    Train(Common),
    /// Accuracy at shrinking training-set sizes, with and without joint training.
    ReduceExperiment(Common),
    /// Frame, flow and confusion-matrix images for one converted epoch.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epoch: usize,
    },
    /// Write a synthetic montage, recording, image set and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 32)]
        electrodes: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = common.alpha {
        cfg.alpha = alpha;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Convert(common) => {
            let cfg = load(&common)?;
            let s = cmd_convert(&cfg)?;
            warn(&s.warnings);
            println!(
                "converted {} source epochs into {} flow containers ({} dropped, {} ignored events)",
                s.sources,
                s.containers,
                s.dropped.len(),
                s.ignored
            );
        }
        Command::Train(common) => {
            let cfg = load(&common)?;
            let s = cmd_train(&cfg)?;
            warn(&s.warnings);
            println!(
                "trained on {} epochs, tested on {}: accuracy {:.4}",
                s.train_epochs, s.test_epochs, s.report.accuracy
            );
            if let (Some(img), Some(disc)) = (s.image_accuracy, s.disc_accuracy) {
                println!("image accuracy {img:.4}, discriminator accuracy {disc:.4}");
            }
        }
        Command::ReduceExperiment(common) => {
            let cfg = load(&common)?;
            let rows = cmd_reduce_experiment(&cfg)?;
            println!("fraction  joint   no-joint");
            for r in rows {
                println!("{:>7}%  {:.4}  {:.4}", r.fraction * 100.0, r.joint, r.no_joint);
            }
        }
        Command::Visualize { common, epoch } => {
            let cfg = load(&common)?;
            let s = cmd_visualize(&cfg, epoch)?;
            println!(
                "wrote {} frames, {} flow images{} to {}",
                s.gray_frames,
                s.hsv_frames,
                if s.heatmap { " and a confusion heatmap" } else { "" },
                s.dir.display()
            );
        }
        Command::Synth {
            out,
            classes,
            trials,
            electrodes,
            noise,
            seed,
        } => {
            let mut ds = SynthDataset::default();
            ds.electrodes = electrodes;
            ds.eeg.classes = classes;
            ds.eeg.trials_per_class = trials;
            ds.eeg.noise = noise;
            ds.eeg.seed = seed;
            let cfg = write_synth_dataset(&out, &ds)?;
            println!("wrote synthetic dataset; config at {}", cfg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
