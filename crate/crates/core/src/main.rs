//! Command-line front end: data generation and conversion, autoencoder
//! pretraining, training, evaluation, the constant-velocity baseline and the
//! variant ablation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use trajcast::data::{self, Track};
use trajcast::harness::{self, DatasetSource, ExperimentConfig, MetricsReport, Variant};
use trajcast::predictor::{LossMode, Model};
use trajcast::preprocess::{LaneTable, PreprocessParams, Window};
use trajcast::{Error, Result};

#[derive(Parser)]
#[command(name = "trajcast", version, about = "Maneuver-aware trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mixture,
    Teacher,
}

impl From<Mode> for LossMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Mixture => LossMode::Mixture,
            Mode::Teacher => LossMode::Teacher,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Turn an NGSIM CSV (or a .ndjson track store) into forecasting windows.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Output JSON array of windows.
        #[arg(long)]
        out: PathBuf,
        /// Downsampling factor from the source rate to the working rate.
        #[arg(long, default_value_t = 2)]
        rate: usize,
        /// Experiment config supplying the remaining window settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit preprocessing on the training split and pretrain the autoencoder.
    PretrainSsae {
        #[arg(long)]
        config: PathBuf,
        /// Autoencoder checkpoint; the fitted preprocessing is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        loss_mode: Option<Mode>,
    },
    /// Score a checkpoint on a windows file.
    Evaluate {
        /// Checkpoint directory written by `train` (or its model.json).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; a CSV table is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and score several variants on one shared split.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant tags; all four when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic highway scene as a track store.
    GenData {
        /// Experiment config with a synthetic dataset section.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the constant-velocity baseline on a windows file.
    BaselineCv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_input_tracks(input: &Path) -> Result<Vec<Track>> {
    match input.extension().and_then(|e| e.to_str()) {
        Some("ndjson") | Some("jsonl") => data::read_store(input),
        _ => {
            let site = input.file_stem().and_then(|s| s.to_str()).unwrap_or("ngsim");
            let report = data::parse_ngsim(input, site)?;
            if report.malformed > 0 {
                info!("skipped {} malformed rows", report.malformed);
            }
            Ok(report.tracks)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::synthetic(Default::default(), 0)),
    }
}

fn timed(mut report: MetricsReport, start: Instant) -> MetricsReport {
    report.wall_time_s = Some(start.elapsed().as_secs_f64());
    report
}

/// Files of a checkpoint directory.
struct CheckpointDir {
    root: PathBuf,
}

impl CheckpointDir {
    fn resolve(path: &Path) -> Self {
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        CheckpointDir { root }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            input,
            out,
            rate,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut p = cfg.preprocess.clone();
            p.rate = rate;
            let tracks = load_input_tracks(&input)?;
            let lanes = LaneTable::estimate(&tracks);
            let ds = harness::windows_from_tracks(&tracks, &lanes, &p, &cfg.model.grid, cfg.training.split_seed)?;
            info!(
                "{} windows ({} short history, {} short future, {} not separable, {} subsampled)",
                ds.windows.len(),
                ds.stats.short_history,
                ds.stats.short_future,
                ds.not_separable,
                ds.subsampled
            );
            write_json(&out, &ds.windows)
        }
        Command::PretrainSsae { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cfg = ExperimentConfig {
                variant: Variant::VdDcsLstm,
                ..cfg
            };
            let ds = harness::build_dataset(&cfg)?;
            let bundle = harness::split_dataset(ds.windows, &cfg)?;
            let pipeline = harness::fit_pipeline(&cfg, &bundle.train)?;
            let ssae = pipeline.ssae.as_ref().expect("descriptor variant pretrains");
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            ssae.save(&out)?;
            pipeline.preprocess.save(&out.with_file_name("preprocess.json"))?;
            if let Some(log) = &pipeline.ssae_log {
                write_json(&out.with_file_name("ssae_log.json"), log)?;
            }
            Ok(())
        }
        Command::Train {
            config,
            out,
            seed,
            loss_mode,
        } => {
            let start = Instant::now();
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(m) = loss_mode {
                cfg.training.loss_mode = m.into();
            }
            let (exp, bundle) = harness::run_experiment(&cfg)?;
            create_dir(&out)?;
            let dir = CheckpointDir::resolve(&out);
            cfg.save(&dir.file("config.json"))?;
            exp.model.save(&dir.file("model.json"), &cfg.hash())?;
            exp.pipeline.preprocess.save(&dir.file("preprocess.json"))?;
            if let Some(ssae) = &exp.pipeline.ssae {
                ssae.save(&dir.file("ssae.json"))?;
            }
            write_json(&dir.file("log.json"), &(&exp.log, &exp.pipeline.ssae_log))?;
            write_json(&dir.file("test_windows.json"), &bundle.test)?;
            let report = timed(exp.report, start);
            report.save(&dir.file("report.json"))?;
            info!("test RMSE (m) at 1-5 s: {:?}", report.rmse_m);
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            report,
        } => {
            let start = Instant::now();
            let dir = CheckpointDir::resolve(&checkpoint);
            let cfg = ExperimentConfig::load(&dir.file("config.json"))?;
            let (model, hash) = Model::load(&dir.file("model.json"))?;
            if hash != cfg.hash() {
                return Err(Error::Config(format!(
                    "checkpoint was trained under config {hash}, directory holds {}",
                    cfg.hash()
                )));
            }
            let pre = PreprocessParams::load(&dir.file("preprocess.json"))?;
            if pre.dim() != model.config.input_dim {
                return Err(Error::Config("preprocessing does not match the model input".into()));
            }
            let windows: Vec<Window> = read_json(&data)?;
            let prepared = windows
                .iter()
                .map(|w| trajcast::predictor::PreparedWindow::new(w, &pre, &cfg.model.grid))
                .collect::<Result<Vec<_>>>()?;
            let (r, _) = harness::evaluate(&model, &prepared, &cfg)?;
            let r = timed(r, start);
            info!("RMSE (m) at 1-5 s: {:?}", r.rmse_m);
            r.save(&report)
        }
        Command::Ablate { config, variants, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?
            };
            create_dir(&out)?;
            let reports = harness::ablate(&cfg, &variants)?;
            for r in &reports {
                let name = r.variant.to_lowercase().replace('+', "_");
                r.save(&out.join(format!("{name}.json")))?;
            }
            let table = harness::comparison_csv(&reports);
            print!("{table}");
            let write = |name: &str, text: String| {
                let p = out.join(name);
                std::fs::write(&p, text).map_err(|source| Error::Io { path: p, source })
            };
            write("comparison.csv", table)?;
            write("rmse.svg", harness::rmse_svg(&reports))
        }
        Command::GenData { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let DatasetSource::Synthetic { params, seed: s } = cfg.dataset else {
                return Err(Error::Config("gen-data needs a synthetic dataset section".into()));
            };
            let tracks = data::gen_synthetic(&params, seed.unwrap_or(s))?;
            info!("{} vehicles", tracks.len());
            if out.extension().and_then(|e| e.to_str()) == Some("csv") {
                data::write_ngsim(&tracks, &out)
            } else {
                data::write_store(&tracks, &out)
            }
        }
        Command::BaselineCv { data, report, config } => {
            let start = Instant::now();
            let cfg = load_config(config.as_deref())?;
            let windows: Vec<Window> = read_json(&data)?;
            let (r, _) = harness::evaluate_baseline(&windows, &cfg)?;
            timed(r, start).save(&report)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
