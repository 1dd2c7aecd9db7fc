//! The pipeline stages behind each CLI subcommand, usable from code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, ExportIndex, LabeledMatrix};
use crate::checkpoint;
use crate::data::{
    derive_on_off, load_channel, make_windows_with_stride, normalize, AugmentSpec, Manifest, PreparedDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{infer_full, Inference, InferenceOptions, MetricsReport};
use crate::model::{Features, Model, ModelConfig, ModelKind};
use crate::pipeline::samples_from_dataset;
use crate::sim::{simulate, Household, HouseholdSpec};
use crate::train::{train, LossHistory, TrainObserver, TrainingConfig};

/// SAE period count used when none is given, capped at the sequence length.
pub const DEFAULT_SAE_PERIODS: usize = 1200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub appliance: Option<String>,
    pub train_stride: usize,
    pub test_stride: usize,
    pub sae_periods: Option<usize>,
    /// Overrides the manifest's keep probability when preparing.
    pub keep_prob: Option<f64>,
    pub inference_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            appliance: None,
            train_stride: 16,
            test_stride: 2,
            sae_periods: None,
            keep_prob: None,
            inference_batch: 64,
        }
    }
}

/// Model, training and data settings of one experiment (TOML with
/// `[model]`, `[features]`, `[training]` and `[data]` sections).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub features: Features,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
        cfg.model.validate()?;
        cfg.training.validate()?;
        if cfg.data.train_stride == 0 || cfg.data.test_stride == 0 || cfg.data.inference_batch == 0 {
            return Err(Error::Config("data strides and inference_batch must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn inference(&self, normalization: f64) -> InferenceOptions {
        InferenceOptions { stride: self.data.test_stride, normalization, batch_size: self.data.inference_batch }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Simulates the household in `spec` and writes its channel files and
/// manifest to `out`.
pub fn simulate_household(spec: &Path, out: &Path, seed: Option<u64>) -> Result<Household> {
    let mut spec = HouseholdSpec::load(spec)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let household = simulate(&spec)?;
    household.write(out, &spec)?;
    Ok(household)
}

pub fn prepare_dataset(
    manifest: &Path,
    appliance: &str,
    out: &Path,
    keep_prob: Option<f64>,
) -> Result<PreparedDataset> {
    let mut ds = PreparedDataset::from_manifest(&Manifest::load(manifest)?, appliance)?;
    if let Some(p) = keep_prob {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("keep probability must be in (0, 1], got {p}")));
        }
        ds.meta.keep_prob = p;
    }
    ds.save(out)?;
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct TrainRequest {
    pub kind: ModelKind,
    pub data: PathBuf,
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub adversarial: bool,
    pub augment: Option<AugmentSpec>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub warnings: Vec<String>,
    pub samples: usize,
    pub history: LossHistory,
    pub model: Model,
}

/// `model.ckpt` → `model.history.csv`.
pub fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.csv")
}

/// `model.ckpt` → `model.epoch3.ckpt` for 1-based epoch 3.
pub fn epoch_checkpoint_path(ckpt: &Path, epoch: usize) -> PathBuf {
    ckpt.with_extension(format!("epoch{epoch}.ckpt"))
}

struct EpochCheckpoints<'a> {
    out: &'a Path,
}

impl TrainObserver for EpochCheckpoints<'_> {
    fn on_epoch_end(&mut self, epoch: usize, model: &Model) -> Result<()> {
        checkpoint::save(model, &epoch_checkpoint_path(self.out, epoch + 1))
    }
}

/// Trains on a prepared dataset and writes the final checkpoint, one
/// checkpoint per epoch and the loss history next to `out`.
pub fn train_model(req: &TrainRequest) -> Result<TrainSummary> {
    let mut cfg = req.config.clone();
    let mut warnings = Vec::new();
    if let Some(seed) = req.seed {
        cfg.training.seed = seed;
    }
    if req.augment.is_some() {
        cfg.training.augment = req.augment;
    }
    if req.adversarial {
        cfg.training.adversarial = true;
    }
    if cfg.training.adversarial && cfg.training.lambda_adv == 0.0 {
        warnings.push("adversarial loss requested but lambda_adv = 0; training is purely supervised".into());
    }
    let ds = PreparedDataset::load(&req.data)?;
    let seed = cfg.training.seed;
    let samples = samples_from_dataset(&ds, cfg.model.s, cfg.model.w, cfg.data.train_stride, seed)?;
    let mut model = Model::new(req.kind, cfg.features, &cfg.model, seed)?;
    ensure_parent(&req.out)?;
    let outcome = train(&mut model, &samples, &cfg.training, &mut EpochCheckpoints { out: &req.out })?;
    checkpoint::save(&model, &req.out)?;
    outcome.history.write_csv(history_path(&req.out))?;
    Ok(TrainSummary { warnings, samples: samples.len(), history: outcome.history, model })
}

/// Predictions CSV: `timestamp,power,on_prob`; missing outputs are empty.
pub fn format_predictions(timestamps: &[i64], inf: &Inference) -> String {
    let mut out = String::from("timestamp,power,on_prob\n");
    for (i, t) in timestamps.iter().enumerate() {
        let p = inf.power.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
        let o = inf.on_prob.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
        writeln!(out, "{t},{p},{o}").expect("String write");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub timestamps: Vec<i64>,
    pub power: Option<Vec<f64>>,
    pub on_prob: Option<Vec<f64>>,
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Predictions> {
    let mut timestamps = Vec::new();
    let mut power = Vec::new();
    let mut on = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let err = |message: String| Error::Parse { path: source.into(), line: i + 1, message };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            return Err(err(format!("expected 3 columns, got {}", cells.len())));
        }
        timestamps.push(cells[0].parse::<i64>().map_err(|_| err(format!("invalid timestamp `{}`", cells[0])))?);
        let opt = |c: &str| -> Result<Option<f64>> {
            if c.is_empty() {
                Ok(None)
            } else {
                c.parse().map(Some).map_err(|_| err(format!("invalid number `{c}`")))
            }
        };
        power.push(opt(cells[1])?);
        on.push(opt(cells[2])?);
    }
    let column = |v: Vec<Option<f64>>, name: &str| -> Result<Option<Vec<f64>>> {
        if v.iter().all(Option::is_none) {
            Ok(None)
        } else {
            v.into_iter()
                .collect::<Option<Vec<f64>>>()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("{source}: column `{name}` is partially empty")))
        }
    };
    Ok(Predictions { power: column(power, "power")?, on_prob: column(on, "on_prob")?, timestamps })
}

/// Runs a checkpoint over a mains channel file and writes predictions.
pub fn disaggregate(ckpt: &Path, mains: &Path, out: &Path, opts: &InferenceOptions) -> Result<Inference> {
    let model = checkpoint::load(ckpt)?;
    let series = load_channel(mains)?;
    let inf = infer_full(&model, &series.values, opts)?;
    write_file(out, &format_predictions(&series.timestamps, &inf))?;
    Ok(inf)
}

/// Scores a predictions CSV against a ground-truth channel file with
/// matching timestamps and writes the key=value report.
pub fn evaluate_predictions(
    pred: &Path,
    truth: &Path,
    report: &Path,
    sae_periods: Option<usize>,
    on_threshold: f64,
) -> Result<MetricsReport> {
    let text = fs::read_to_string(pred).map_err(|e| Error::io(pred, e))?;
    let p = parse_predictions(&text, &pred.display().to_string())?;
    let t = load_channel(truth)?;
    let lookup: std::collections::HashMap<i64, f64> =
        t.timestamps.iter().copied().zip(t.values.iter().copied()).collect();
    let truth_values = p
        .timestamps
        .iter()
        .map(|ts| lookup.get(ts).copied().ok_or_else(|| Error::Length(format!("timestamp {ts} missing from truth"))))
        .collect::<Result<Vec<f64>>>()?;
    let n = truth_values.len();
    let power = p.power.clone().unwrap_or_else(|| vec![0.0; n]);
    let periods = sae_periods.unwrap_or(DEFAULT_SAE_PERIODS.min(n.max(1)));
    let name = truth.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let r = MetricsReport::compute(&name, &power, &truth_values, p.on_prob.as_deref(), on_threshold, periods)?;
    write_file(report, &r.to_text())?;
    Ok(r)
}

/// Predictions over every section of a dataset, concatenated.
pub fn predict_dataset(model: &Model, ds: &PreparedDataset, opts: &InferenceOptions) -> Result<(Inference, Vec<f64>)> {
    let mut power = Vec::new();
    let mut on = Vec::new();
    let mut truth = Vec::new();
    for sec in &ds.sections {
        if sec.aggregate.len() < model.output_span().1 {
            continue;
        }
        let inf = infer_full(model, &sec.aggregate, opts)?;
        power.extend(inf.power.unwrap_or_else(|| vec![0.0; sec.aggregate.len()]));
        if let Some(o) = inf.on_prob {
            on.extend(o);
        }
        truth.extend_from_slice(&sec.appliance);
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let on_prob = if on.len() == truth.len() { Some(on) } else { None };
    let power = if model.predicts_power() { Some(power) } else { None };
    Ok((Inference { power, on_prob }, truth))
}

pub fn evaluate_dataset(model: &Model, ds: &PreparedDataset, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let (inf, truth) = predict_dataset(model, ds, &cfg.inference(ds.meta.normalization))?;
    let zeros = vec![0.0; truth.len()];
    let power = inf.power.as_deref().unwrap_or(&zeros);
    let periods = cfg.data.sae_periods.unwrap_or(DEFAULT_SAE_PERIODS.min(truth.len()));
    MetricsReport::compute(&ds.meta.appliance, power, &truth, inf.on_prob.as_deref(), ds.meta.on_threshold, periods)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Attention,
    Features,
    Pca,
    Bypass,
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "features" => Ok(Self::Features),
            "pca" => Ok(Self::Pca),
            "bypass" => Ok(Self::Bypass),
            other => Err(Error::Config(format!("unknown export `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExportOptions {
    /// Keep only the middle columns of time-indexed exports.
    pub center_crop: Option<usize>,
    /// Feature-map taps; all available ones when empty.
    pub taps: Vec<String>,
    /// Window stride used to collect complete-on sequences for PCA.
    pub pca_stride: usize,
}

/// Normalized input of window `k`: the k-th non-overlapping output span
/// across the dataset's sections, in order.
pub fn dataset_window(model: &Model, ds: &PreparedDataset, k: usize) -> Result<(String, usize, Vec<f64>)> {
    let (s, w) = (model.config().s, model.config().w);
    let mut remaining = k;
    for sec in &ds.sections {
        let n = if sec.aggregate.len() >= s { (sec.aggregate.len() - s) / s + 1 } else { 0 };
        if remaining < n {
            let x = normalize(&sec.aggregate, ds.meta.normalization)?;
            let t0 = remaining * s;
            return Ok((sec.name.clone(), t0, crate::data::input_window(&x, t0, s, w)));
        }
        remaining -= n;
    }
    Err(Error::Config(format!("window index {k} is out of range")))
}

/// Writes the requested export into `out` and updates `out/index.json`.
pub fn export(
    ckpt: &Path,
    data: &Path,
    window_index: usize,
    what: ExportKind,
    out: &Path,
    opts: &ExportOptions,
) -> Result<Vec<PathBuf>> {
    let model = checkpoint::load(ckpt)?;
    let ds = PreparedDataset::load(data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let crop = |m: LabeledMatrix| match opts.center_crop {
        Some(width) => m.center_crop(width),
        None => m,
    };
    let mut index = ExportIndex { window_index: Some(window_index), exports: Vec::new() };
    let mut written = Vec::new();
    let mut emit = |file: String, m: LabeledMatrix, what: &str, rows: &str, cols: &str| -> Result<()> {
        let path = out.join(&file);
        m.write(&path)?;
        index.push(&file, what, rows, cols);
        written.push(path);
        Ok(())
    };
    match what {
        ExportKind::Attention => {
            let (_, _, x) = dataset_window(&model, &ds, window_index)?;
            for a in analysis::export_attention(&model, &x)? {
                let m = LabeledMatrix::from_rows("i", "i", "j", a.transposed);
                emit(format!("attention_{}.csv", a.stream), m, "attention", "step i attended to", "query step j")?;
            }
        }
        ExportKind::Features => {
            let (_, _, x) = dataset_window(&model, &ds, window_index)?;
            let taps: Vec<String> =
                if opts.taps.is_empty() { analysis::feature_tap_names(&model) } else { opts.taps.clone() };
            let refs: Vec<&str> = taps.iter().map(String::as_str).collect();
            for (name, m) in analysis::export_feature_maps(&model, &x, &refs)? {
                emit(format!("{name}.csv"), crop(m), "feature_map", "channel", "input step")?;
            }
        }
        ExportKind::Bypass => {
            let (_, _, x) = dataset_window(&model, &ds, window_index)?;
            let (with, without) = analysis::attention_bypass_compare(&model, &x)?;
            let m = LabeledMatrix {
                corner: "t".into(),
                columns: vec!["on_with".into(), "on_without".into()],
                rows: (0..with.len()).map(|t| t.to_string()).collect(),
                values: with.iter().zip(&without).map(|(a, b)| vec![*a, *b]).collect(),
            };
            emit("bypass.csv".into(), m, "bypass", "output step", "on-probability with / without attention")?;
        }
        ExportKind::Pca => {
            let (generated, real, starts) = complete_on_sequences(&model, &ds, opts.pca_stride.max(1))?;
            let pca = analysis::pca_modes(&generated, 2)?;
            let real_coords = pca.project(&real);
            let mut rows = Vec::new();
            let mut values = Vec::new();
            for (k, (c, t0)) in pca.coords.iter().zip(&starts).enumerate() {
                rows.push(format!("gen{k}"));
                values.push(vec![c[0], c.get(1).copied().unwrap_or(0.0), *t0 as f64]);
            }
            for (k, (c, t0)) in real_coords.iter().zip(&starts).enumerate() {
                rows.push(format!("real{k}"));
                values.push(vec![c[0], c.get(1).copied().unwrap_or(0.0), *t0 as f64]);
            }
            let m = LabeledMatrix {
                corner: "sequence".into(),
                columns: vec!["pc1".into(), "pc2".into(), "t0".into()],
                rows,
                values,
            };
            emit("pca.csv".into(), m, "pca", "gen<k>: model output, real<k>: ground truth", "pc1, pc2, window start")?;
            let ratios = pca.explained_ratio();
            let eig = LabeledMatrix {
                corner: "component".into(),
                columns: vec!["eigenvalue".into(), "explained_ratio".into()],
                rows: (1..=pca.eigenvalues.len()).map(|k| format!("pc{k}")).collect(),
                values: pca.eigenvalues.iter().zip(&ratios).map(|(a, b)| vec![*a, *b]).collect(),
            };
            emit("pca_eigen.csv".into(), eig, "pca_eigen", "component", "eigenvalue, explained variance ratio")?;
        }
    }
    index.write(out)?;
    Ok(written)
}

/// Model outputs and ground truth (watts) for every window whose on-state
/// is complete, with the window starts (offset by section).
pub fn complete_on_sequences(
    model: &Model,
    ds: &PreparedDataset,
    stride: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    let (s, w) = (model.config().s, model.config().w);
    let scale = ds.meta.normalization;
    let mut generated = Vec::new();
    let mut real = Vec::new();
    let mut starts = Vec::new();
    let mut offset = 0;
    for sec in &ds.sections {
        let x = normalize(&sec.aggregate, scale)?;
        let y = normalize(&sec.appliance, scale)?;
        let on = derive_on_off(&sec.appliance, ds.meta.on_threshold);
        if sec.aggregate.len() >= s {
            let full: Vec<_> =
                make_windows_with_stride(&x, &y, &on, s, w, stride)?.into_iter().filter(|w| w.all_on()).collect();
            for chunk in full.chunks(64) {
                let xs: Vec<f64> = chunk.iter().flat_map(|c| c.x.iter().copied()).collect();
                let out = model.forward_batch(&Tensor::new(vec![chunk.len(), model.input_len()], xs)?)?.output;
                for (i, c) in chunk.iter().enumerate() {
                    generated.push(out.row(i).iter().map(|v| v * scale).collect());
                    real.push(c.y.iter().map(|v| v * scale).collect());
                    starts.push(offset + c.t0);
                }
            }
        }
        offset += sec.aggregate.len();
    }
    if generated.len() < 2 {
        return Err(Error::Config(format!("{} complete on-state windows; PCA needs at least 2", generated.len())));
    }
    Ok((generated, real, starts))
}

/// Components toggled in an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    MultiScale,
    SelfAttention,
    AdversarialLoss,
    OnStateAugmentation,
}

impl Component {
    pub fn key(self) -> &'static str {
        match self {
            Component::MultiScale => "ms",
            Component::SelfAttention => "sa",
            Component::AdversarialLoss => "al",
            Component::OnStateAugmentation => "oa",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ms" => Ok(Self::MultiScale),
            "sa" => Ok(Self::SelfAttention),
            "al" => Ok(Self::AdversarialLoss),
            "oa" => Ok(Self::OnStateAugmentation),
            other => Err(Error::Config(format!("unknown ablation component `{other}` (expected ms, sa, al, oa)"))),
        }
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<Component>> {
    let mut grid: Vec<Component> = text.split(',').map(str::parse).collect::<Result<_>>()?;
    grid.sort();
    grid.dedup();
    Ok(grid)
}

/// Rows in the standard ablation order (none; each architectural
/// component; both; each training component alone; both architectural
/// components plus each training component), keeping rows whose
/// components are all in `grid`.
pub fn ablation_rows(grid: &[Component]) -> Vec<Vec<Component>> {
    use Component::*;
    let all = [
        vec![],
        vec![MultiScale],
        vec![SelfAttention],
        vec![MultiScale, SelfAttention],
        vec![AdversarialLoss],
        vec![OnStateAugmentation],
        vec![MultiScale, SelfAttention, AdversarialLoss],
        vec![MultiScale, SelfAttention, OnStateAugmentation],
    ];
    all.into_iter().filter(|row| row.iter().all(|c| grid.contains(c))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub components: Vec<Component>,
    pub maes: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.maes.iter().sum::<f64>() / self.maes.len() as f64
    }
}

/// Default augmentation range when a row enables it and the config has none.
pub const DEFAULT_ABLATION_AUGMENT: (f64, f64) = (-0.1, 0.1);
/// Adversarial weight used when a row enables it and the config has 0.
pub const DEFAULT_ABLATION_LAMBDA: f64 = 0.5;

/// Trains SCANet once per row and seed and reports test MAE. Branch gates
/// stay on in every row.
pub fn ablate(
    grid: &[Component],
    seeds: usize,
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&[Component], u64, f64),
) -> Result<Vec<AblationRow>> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    for components in ablation_rows(grid) {
        let has = |c: Component| components.contains(&c);
        let features = Features {
            multi_scale: has(Component::MultiScale),
            self_attention: has(Component::SelfAttention),
            branch_gates: true,
        };
        let mut tc = cfg.training.clone();
        tc.adversarial = has(Component::AdversarialLoss);
        if tc.adversarial && tc.lambda_adv == 0.0 {
            tc.lambda_adv = DEFAULT_ABLATION_LAMBDA;
        }
        tc.augment = if has(Component::OnStateAugmentation) {
            Some(
                cfg.training
                    .augment
                    .unwrap_or(AugmentSpec::new(DEFAULT_ABLATION_AUGMENT.0, DEFAULT_ABLATION_AUGMENT.1)?),
            )
        } else {
            None
        };
        let mut maes = Vec::new();
        for k in 0..seeds as u64 {
            let seed = cfg.training.seed.wrapping_add(k);
            tc.seed = seed;
            let samples = samples_from_dataset(train_ds, cfg.model.s, cfg.model.w, cfg.data.train_stride, seed)?;
            let mut model = Model::new(ModelKind::Scanet, features, &cfg.model, seed)?;
            train(&mut model, &samples, &tc, &mut ())?;
            let mae = evaluate_dataset(&model, test_ds, cfg)?.mae;
            progress(&components, seed, mae);
            maes.push(mae);
        }
        rows.push(AblationRow { components, maes });
    }
    Ok(rows)
}

/// One row per configuration: component flags, per-seed MAE, mean.
pub fn ablation_csv(grid: &[Component], rows: &[AblationRow]) -> String {
    let seeds = rows.first().map_or(0, |r| r.maes.len());
    let mut out = String::new();
    for c in grid {
        write!(out, "{},", c.key()).expect("String write");
    }
    for k in 0..seeds {
        write!(out, "mae_seed{k},").expect("String write");
    }
    out.push_str("mae_mean\n");
    for r in rows {
        for c in grid {
            write!(out, "{},", u8::from(r.components.contains(c))).expect("String write");
        }
        for m in &r.maes {
            write!(out, "{m},").expect("String write");
        }
        writeln!(out, "{}", r.mean()).expect("String write");
    }
    out
}
