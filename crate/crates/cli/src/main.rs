use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use scanet::commands::{self, ExperimentConfig, ExportKind, ExportOptions, TrainRequest};
use scanet::data::{AugmentSpec, PreparedDataset, DEFAULT_NORMALIZATION, DEFAULT_ON_THRESHOLD};
use scanet::metrics::{reports_to_csv, InferenceOptions, MetricsReport};
use scanet::ModelKind;

#[derive(Parser)]
#[command(name = "scanet", version, about = "Energy disaggregation with scale- and context-aware networks")]
struct Cli {
    /// Seed for simulation, initialization and sampling.
    #[arg(long, global = true, env = "SCANET_SEED")]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic household from a spec file.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align one appliance with the mains and write a prepared dataset.
    Prepare {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        appliance: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying `[data]` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        keep_prob: Option<f64>,
    },
    /// Train a model on a prepared dataset.
    Train {
        #[arg(long, value_parser = parse_kind)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Enable the adversarial loss.
        #[arg(long)]
        adv: bool,
        /// On-state augmentation range `e-:e+` in normalized units.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_augment)]
        augment: Option<AugmentSpec>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict appliance power over a mains channel file.
    Disaggregate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mains: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Window stride; defaults to the config's test stride.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_NORMALIZATION)]
        normalization: f64,
    },
    /// Score predictions against a ground-truth channel file.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        sae_periods: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_ON_THRESHOLD)]
        threshold: f64,
        /// Also append the report as a row of this CSV.
        #[arg(long)]
        append_csv: Option<PathBuf>,
    },
    /// Write diagnostic data files for one window or the whole dataset.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        window_index: usize,
        #[arg(long, value_parser = parse_export)]
        what: ExportKind,
        #[arg(long, default_value = "exports")]
        out: PathBuf,
        /// Comma-separated feature-map taps.
        #[arg(long, value_delimiter = ',')]
        taps: Vec<String>,
        #[arg(long)]
        center_crop: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and score SCANet with components switched on and off.
    Ablate {
        #[arg(long, default_value = "ms,sa,al,oa")]
        grid: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        data: PathBuf,
        /// Held-out prepared dataset; defaults to `--data`.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: scanet::Error| e.to_string())
}

fn parse_augment(s: &str) -> Result<AugmentSpec, String> {
    AugmentSpec::parse(s).map_err(|e| e.to_string())
}

fn parse_export(s: &str) -> Result<ExportKind, String> {
    s.parse().map_err(|e: scanet::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate { spec, out } => {
            let h = commands::simulate_household(&spec, &out, cli.seed)?;
            println!("wrote {} steps, {} appliances to {}", h.aggregate.len(), h.appliances.len(), out.display());
        }
        Command::Prepare { manifest, appliance, out, config, keep_prob } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = manifest.or(cfg.data.manifest).context("--manifest is required (or [data].manifest)")?;
            let appliance =
                appliance.or(cfg.data.appliance).context("--appliance is required (or [data].appliance)")?;
            let ds = commands::prepare_dataset(&manifest, &appliance, &out, keep_prob.or(cfg.data.keep_prob))?;
            let steps: usize = ds.sections.iter().map(|s| s.aggregate.len()).sum();
            println!("prepared {} sections, {steps} steps of `{appliance}` in {}", ds.sections.len(), out.display());
        }
        Command::Train { model, data, config, out, adv, augment, epochs } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            let req = TrainRequest {
                kind: model,
                data,
                config: cfg,
                out: out.clone(),
                adversarial: adv,
                augment,
                seed: cli.seed,
            };
            let summary = commands::train_model(&req)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(last) = summary.history.records.last() {
                println!(
                    "trained on {} samples for {} steps: l_output={:.6} l_on={:.6}",
                    summary.samples, last.step, last.l_output, last.l_on
                );
            }
            println!("checkpoint: {}", out.display());
        }
        Command::Disaggregate { ckpt, mains, out, config, stride, normalization } => {
            let cfg = load_config(config.as_deref())?;
            let opts = InferenceOptions {
                stride: stride.unwrap_or(cfg.data.test_stride),
                normalization,
                batch_size: cfg.data.inference_batch,
            };
            commands::disaggregate(&ckpt, &mains, &out, &opts)?;
            println!("predictions: {}", out.display());
        }
        Command::Evaluate { pred, truth, report, sae_periods, threshold, append_csv } => {
            let r = commands::evaluate_predictions(&pred, &truth, &report, sae_periods, threshold)?;
            print!("{}", r.to_text());
            if let Some(csv) = append_csv {
                append_report(&csv, &r)?;
            }
        }
        Command::Export { ckpt, data, window_index, what, out, taps, center_crop, config } => {
            let cfg = load_config(config.as_deref())?;
            let opts = ExportOptions { center_crop, taps, pca_stride: cfg.data.train_stride };
            for p in commands::export(&ckpt, &data, window_index, what, &out, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { grid, seeds, data, test_data, config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.training.seed = seed;
            }
            let grid = commands::parse_grid(&grid)?;
            let train_ds = PreparedDataset::load(&data)?;
            let test_ds = match &test_data {
                Some(p) => PreparedDataset::load(p)?,
                None => train_ds.clone(),
            };
            let rows = commands::ablate(&grid, seeds, &train_ds, &test_ds, &cfg, |row, seed, mae| {
                let name: Vec<&str> = row.iter().map(|c| c.key()).collect();
                eprintln!("[{}] seed {seed}: MAE {mae:.3}", if name.is_empty() { "-".into() } else { name.join("+") });
            })?;
            let csv = commands::ablation_csv(&grid, &rows);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn append_report(path: &Path, r: &MetricsReport) -> Result<()> {
    let csv = reports_to_csv(std::slice::from_ref(r));
    let text = if path.exists() {
        let mut existing = std::fs::read_to_string(path)?;
        existing.push_str(csv.lines().nth(1).unwrap_or_default());
        existing.push('\n');
        existing
    } else {
        csv
    };
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
