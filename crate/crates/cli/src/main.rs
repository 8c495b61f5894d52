//! `ssga` command-line entry point.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ssga::checkpoint;
use ssga::dataset::{self, Dataset};
use ssga::eval::{self, SweepSpec};
use ssga::model::SsgaModel;
use ssga::runtime::{write_stream_report, StreamRuntime};
use ssga::train::train;
use ssga::{ConfigFile, SsgaConfig, StopThreshold};

#[derive(Parser)]
#[command(name = "ssga", version, about = "Stepwise global-local aggregation for online video detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into <out>/train and <out>/val.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root; `<data>/train` is used when it exists.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; `<data>/val` is used when it exists.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stop threshold, or `never`.
        #[arg(long)]
        delta: Option<StopThreshold>,
        #[arg(long)]
        force_stages: Option<usize>,
        /// Per-frame CSV; the summary goes to `<report>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Include frames per second in the JSON summary.
        #[arg(long)]
        timing: bool,
    },
    /// Stream one video directory through the memory bank.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        delta: Option<StopThreshold>,
        #[arg(long)]
        force_stages: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Evaluate one checkpoint under several stop thresholds or stage counts.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', conflicts_with = "stages", required_unless_present = "stages")]
        deltas: Vec<StopThreshold>,
        /// Forced stage counts, evaluated with early stop disabled.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ConfigFile::default()),
    }
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.join(dataset::MANIFEST).is_file() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn read_data(root: &Path, split: &str) -> Result<Dataset> {
    let dir = split_dir(root, split);
    dataset::read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_model(path: &Path) -> Result<SsgaModel> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn inference_config(model: &SsgaModel, delta: Option<StopThreshold>) -> SsgaConfig {
    let mut cfg = model.config.clone();
    if let Some(d) = delta {
        cfg.delta = d;
    }
    cfg
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(config.as_deref())?.data;
            let (train_videos, val_videos) = dataset::generate_benchmark(&cfg, seed)?;
            let names = ssga::synth::class_names(cfg.num_classes);
            for (split, videos) in [("train", &train_videos), ("val", &val_videos)] {
                dataset::write_dataset(&out.join(split), names.clone(), cfg.frame_size, videos)?;
            }
            eprintln!(
                "wrote {} train and {} val clips to {}",
                train_videos.len(),
                val_videos.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let ds = read_data(&data, "train")?;
            if ds.manifest.class_names.len() != cfg.model.num_classes {
                bail!(
                    "dataset has {} classes, config has num_classes = {}",
                    ds.manifest.class_names.len(),
                    cfg.model.num_classes
                );
            }
            let model = SsgaModel::new(cfg.model.clone(), cfg.train.seed)?;
            let (model, _) = train(model, &ds, &cfg.train, |log| {
                eprintln!("epoch {:>3}  loss {:.5}  steps {}", log.epoch + 1, log.mean_loss, log.steps)
            })?;
            checkpoint::save(&model, &out)?;
            eprintln!("saved {} (checksum {})", out.display(), model.checksum());
        }
        Command::Eval {
            ckpt,
            data,
            delta,
            force_stages,
            report,
            timing,
        } => {
            let model = load_model(&ckpt)?;
            let ds = read_data(&data, "val")?;
            let cfg = inference_config(&model, delta);
            let result = eval::evaluate(&model, &ds, &cfg, force_stages)?;
            let json = eval::summary_json(&result.summary, timing)?;
            match report {
                Some(path) => {
                    eval::write_eval_report(&path, &result, timing)?;
                    eprint!("{json}");
                }
                None => print!("{json}"),
            }
            if let Some(fps) = result.summary.overall.frames_per_second {
                eprintln!("relative refinement throughput: {fps:.1} frames/s");
            }
        }
        Command::Stream {
            ckpt,
            video,
            delta,
            force_stages,
            report,
        } => {
            let model = load_model(&ckpt)?;
            let (_, clip) = dataset::read_video(&video, Some(model.config.num_classes))
                .with_context(|| format!("reading video {}", video.display()))?;
            let cfg = inference_config(&model, delta);
            let mut rt = StreamRuntime::new(&model, cfg.clone())?;
            rt.reconfigure(cfg.delta, force_stages)?;
            let mut results = Vec::with_capacity(clip.frames.len());
            for frame in &clip.frames {
                results.push(rt.step(frame)?.0);
            }
            write_stream_report(&report, &results)?;
            let mean = results.iter().map(|r| r.stages_executed).sum::<usize>() as f64 / results.len().max(1) as f64;
            eprintln!("{} frames, mean stages {:.3}", results.len(), mean);
        }
        Command::Sweep {
            ckpt,
            data,
            deltas,
            stages,
            report,
        } => {
            let model = load_model(&ckpt)?;
            let ds = read_data(&data, "val")?;
            let spec = if stages.is_empty() {
                SweepSpec::Deltas(deltas)
            } else {
                SweepSpec::StageCounts(stages)
            };
            let rows = eval::sweep(&model, &ds, &model.config, &spec)?;
            for row in &rows {
                if let Err(e) = &row.result {
                    eprintln!("{}: {e}", row.setting);
                }
            }
            write_or_print(report.as_deref(), &eval::sweep_report(&rows))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
