//! Channel ingestion, alignment and window generation.
//!
//! Channel files hold one `epoch_seconds watts` pair per line. Appliance
//! and mains channels are aligned on a shared grid, normalized, cut into
//! sliding windows and optionally thinned (off-state subsampling) and
//! augmented (on-state offsets).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Divisor applied to all watt values before training.
pub const DEFAULT_NORMALIZATION: f64 = 612.0;
pub const DEFAULT_ON_THRESHOLD: f64 = 15.0;
/// Gaps longer than this many sampling periods split a series into sections.
pub const GAP_LIMIT_PERIODS: i64 = 10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeSeries {
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Length(format!("{} timestamps, {} values", timestamps.len(), values.len())));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::NonMonotonic { line: i + 2, prev: w[0], next: w[1] });
            }
        }
        Ok(Self { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parses channel text; `source` names the input in error messages.
pub fn parse_channel(text: &str, source: &str) -> Result<TimeSeries> {
    let mut ts = TimeSeries::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: source.to_string(), line: line_no, message };
        let mut fields = trimmed.split_whitespace();
        let (Some(t), Some(v), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err(format!("expected `epoch_seconds watts`, got `{trimmed}`")));
        };
        let t: i64 = t.parse().map_err(|_| err(format!("invalid timestamp `{t}`")))?;
        let v: f64 = v.parse().map_err(|_| err(format!("invalid power value `{v}`")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(err(format!("power must be finite and non-negative, got {v}")));
        }
        if let Some(&prev) = ts.timestamps.last() {
            if t <= prev {
                return Err(Error::NonMonotonic { line: line_no, prev, next: t });
            }
        }
        ts.timestamps.push(t);
        ts.values.push(v);
    }
    Ok(ts)
}

pub fn load_channel(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_channel(&text, &path.display().to_string())
}

pub fn format_channel(ts: &TimeSeries) -> String {
    let mut out = String::with_capacity(ts.len() * 16);
    for (t, v) in ts.timestamps.iter().zip(&ts.values) {
        writeln!(out, "{t} {v}").expect("writing to a String");
    }
    out
}

pub fn write_channel(path: impl AsRef<Path>, ts: &TimeSeries) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_channel(ts)).map_err(|e| Error::io(path, e))
}

/// A contiguous run of grid points where both channels are available.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSection {
    pub start: i64,
    pub period: i64,
    pub mains: Vec<f64>,
    pub appliance: Vec<f64>,
}

impl AlignedSection {
    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.mains.len() as i64).map(|k| self.start + k * self.period).collect()
    }
}

/// Forward-fill cursor over a series.
struct Filler<'a> {
    ts: &'a TimeSeries,
    next: usize,
}

impl Filler<'_> {
    /// Latest observation at or before `t`, if not older than `limit`.
    fn at(&mut self, t: i64, limit: i64) -> Option<f64> {
        while self.next < self.ts.len() && self.ts.timestamps[self.next] <= t {
            self.next += 1;
        }
        let i = self.next.checked_sub(1)?;
        (t - self.ts.timestamps[i] <= limit).then(|| self.ts.values[i])
    }
}

/// Samples both series every `period` seconds over their common time span
/// by forward-filling. Grid points where either series has not reported
/// for more than [`GAP_LIMIT_PERIODS`] periods are dropped, splitting the
/// result into sections.
pub fn align_and_resample(mains: &TimeSeries, appliance: &TimeSeries, period: i64) -> Result<Vec<AlignedSection>> {
    if period <= 0 {
        return Err(Error::Config(format!("resampling period must be positive, got {period}")));
    }
    if mains.is_empty() || appliance.is_empty() {
        return Err(Error::NoOverlap);
    }
    let start = mains.timestamps[0].max(appliance.timestamps[0]);
    let end = *mains.timestamps.last().unwrap().min(appliance.timestamps.last().unwrap());
    if start > end {
        return Err(Error::NoOverlap);
    }
    let limit = GAP_LIMIT_PERIODS * period;
    let mut fm = Filler { ts: mains, next: 0 };
    let mut fa = Filler { ts: appliance, next: 0 };
    let mut sections = Vec::new();
    let mut current: Option<AlignedSection> = None;
    let mut t = start;
    while t <= end {
        match (fm.at(t, limit), fa.at(t, limit)) {
            (Some(m), Some(a)) => {
                let sec = current.get_or_insert_with(|| AlignedSection {
                    start: t,
                    period,
                    mains: Vec::new(),
                    appliance: Vec::new(),
                });
                sec.mains.push(m);
                sec.appliance.push(a);
            }
            _ => sections.extend(current.take()),
        }
        t += period;
    }
    sections.extend(current);
    Ok(sections)
}

pub fn normalize(values: &[f64], scale: f64) -> Result<Vec<f64>> {
    check_scale(scale)?;
    Ok(values.iter().map(|v| v / scale).collect())
}

pub fn denormalize(values: &[f64], scale: f64) -> Result<Vec<f64>> {
    check_scale(scale)?;
    Ok(values.iter().map(|v| v * scale).collect())
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("normalization scale must be positive, got {scale}")))
    }
}

/// `1.0` where `watts > threshold`, else `0.0`.
pub fn derive_on_off(watts: &[f64], threshold: f64) -> Vec<f64> {
    watts.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub s: usize,
    pub w: usize,
    pub train_step: usize,
    pub test_step: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.train_step == 0 || self.test_step == 0 {
            return Err(Error::Config("window s and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.s + 2 * self.w
    }
}

/// One training window. `x` covers `[t0 − w, t0 + s + w)` of the aggregate,
/// `y` and `o` cover `[t0, t0 + s)`; all values normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub o: Vec<f64>,
    pub t0: usize,
}

impl Sample {
    pub fn all_off(&self) -> bool {
        self.o.iter().all(|&v| v == 0.0)
    }

    pub fn all_on(&self) -> bool {
        self.o.iter().all(|&v| v == 1.0)
    }
}

/// Output start positions `0, stride, 2·stride, …` up to `len − s`.
pub fn window_starts(len: usize, s: usize, stride: usize) -> Vec<usize> {
    if len < s {
        return Vec::new();
    }
    (0..=len - s).step_by(stride).collect()
}

/// The input window around output start `t0`, zero outside the series.
pub fn input_window(aggregate: &[f64], t0: usize, s: usize, w: usize) -> Vec<f64> {
    let mut x = vec![0.0; s + 2 * w];
    let lo = t0 as isize - w as isize;
    for (i, v) in x.iter_mut().enumerate() {
        let j = lo + i as isize;
        if j >= 0 && (j as usize) < aggregate.len() {
            *v = aggregate[j as usize];
        }
    }
    x
}

/// Sliding windows with stride `spec.train_step`.
pub fn make_windows(aggregate: &[f64], appliance: &[f64], on: &[f64], spec: &WindowSpec) -> Result<Vec<Sample>> {
    make_windows_with_stride(aggregate, appliance, on, spec.s, spec.w, spec.train_step)
}

pub fn make_windows_with_stride(
    aggregate: &[f64],
    appliance: &[f64],
    on: &[f64],
    s: usize,
    w: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if aggregate.len() != appliance.len() || aggregate.len() != on.len() {
        return Err(Error::Length(format!(
            "aggregate {}, appliance {}, on/off {} steps",
            aggregate.len(),
            appliance.len(),
            on.len()
        )));
    }
    if aggregate.len() < s {
        return Err(Error::Length(format!("series of {} steps is shorter than s = {s}", aggregate.len())));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    Ok(window_starts(aggregate.len(), s, stride)
        .into_iter()
        .map(|t0| Sample {
            x: input_window(aggregate, t0, s, w),
            y: appliance[t0..t0 + s].to_vec(),
            o: on[t0..t0 + s].to_vec(),
            t0,
        })
        .collect())
}

/// Keeps each all-off sample with probability `keep_prob`; samples with
/// any on step are always kept. The decision for a sample depends only on
/// `seed` and its `t0`.
pub fn subsample_off_state(samples: Vec<Sample>, keep_prob: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!("keep probability must be in (0, 1], got {keep_prob}")));
    }
    if keep_prob == 1.0 {
        return Ok(samples);
    }
    let key = rng::label_key("subsample");
    Ok(samples
        .into_iter()
        .filter(|s| !s.all_off() || rng::stream(seed, &[key, s.t0 as u64]).gen::<f64>() < keep_prob)
        .collect())
}

/// Offset bounds `[lo, hi]` in normalized units, `lo ≤ 0 ≤ hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub lo: f64,
    pub hi: f64,
}

impl AugmentSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= 0.0 && hi >= 0.0 && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config(format!("augmentation bounds must satisfy lo <= 0 <= hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Parses `lo:hi`.
    pub fn parse(text: &str) -> Result<Self> {
        let (lo, hi) = text
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("augmentation `{text}` is not of the form lo:hi")))?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("invalid number `{v}`")));
        Self::new(num(lo)?, num(hi)?)
    }
}

/// Adds `e·o` to `y` and to the central `s` steps of `x`; `x` is clamped at 0.
pub fn augment_with_offset(sample: &Sample, e: f64) -> Sample {
    let mut out = sample.clone();
    let w = (sample.x.len() - sample.y.len()) / 2;
    for (t, &o) in sample.o.iter().enumerate() {
        if o != 0.0 {
            out.y[t] += e * o;
            out.x[w + t] = (out.x[w + t] + e * o).max(0.0);
        }
    }
    out
}

/// Draws `e ~ U(lo, hi)` once and applies [`augment_with_offset`].
pub fn on_state_augment(sample: &Sample, aug: &AugmentSpec, rng: &mut impl Rng) -> Sample {
    let e = if aug.lo == aug.hi { aug.lo } else { rng.gen_range(aug.lo..=aug.hi) };
    augment_with_offset(sample, e)
}

/// Default off-state keep probabilities for the public datasets.
pub fn default_keep_prob(dataset: &str, appliance: &str) -> f64 {
    match (dataset, appliance) {
        ("redd", "dishwasher") => 0.2,
        ("ukdale", "dishwasher") => 0.02,
        ("ukdale", "microwave") => 0.05,
        ("ukdale", "kettle") => 0.1,
        _ => 1.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceSettings {
    #[serde(default = "default_threshold")]
    pub on_threshold: f64,
    #[serde(default = "default_keep")]
    pub keep_prob: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_ON_THRESHOLD
}

fn default_keep() -> f64 {
    1.0
}

impl Default for ApplianceSettings {
    fn default() -> Self {
        Self { on_threshold: DEFAULT_ON_THRESHOLD, keep_prob: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseEntry {
    pub name: String,
    pub mains: PathBuf,
    #[serde(default)]
    pub channels: BTreeMap<String, PathBuf>,
}

/// Dataset manifest (TOML). Relative paths resolve against the manifest's
/// directory.
///
/// ```toml
/// period = 6
/// normalization = 612.0
///
/// [appliances.fridge]
/// on_threshold = 15.0
/// keep_prob = 1.0
///
/// [[houses]]
/// name = "house_1"
/// mains = "mains.dat"
/// channels = { fridge = "fridge.dat" }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub period: i64,
    #[serde(default = "default_normalization")]
    pub normalization: f64,
    #[serde(default)]
    pub appliances: BTreeMap<String, ApplianceSettings>,
    pub houses: Vec<HouseEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_normalization() -> f64 {
    DEFAULT_NORMALIZATION
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn settings(&self, appliance: &str) -> ApplianceSettings {
        self.appliances.get(appliance).cloned().unwrap_or_default()
    }
}

/// Aligned watt-valued data for one appliance, ready for windowing.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSection {
    pub name: String,
    pub timestamps: Vec<i64>,
    pub aggregate: Vec<f64>,
    pub appliance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedMeta {
    pub appliance: String,
    pub period: i64,
    pub normalization: f64,
    pub on_threshold: f64,
    pub keep_prob: f64,
    pub sections: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub meta: PreparedMeta,
    pub sections: Vec<PreparedSection>,
}

impl PreparedDataset {
    /// Aligns every house that records `appliance`.
    pub fn from_manifest(manifest: &Manifest, appliance: &str) -> Result<Self> {
        let settings = manifest.settings(appliance);
        let mut sections = Vec::new();
        for house in &manifest.houses {
            let Some(channel) = house.channels.get(appliance) else { continue };
            let mains = load_channel(manifest.resolve(&house.mains))?;
            let app = load_channel(manifest.resolve(channel))?;
            for (k, sec) in align_and_resample(&mains, &app, manifest.period)?.into_iter().enumerate() {
                sections.push(PreparedSection {
                    name: format!("{}_{k}", house.name),
                    timestamps: sec.timestamps(),
                    aggregate: sec.mains,
                    appliance: sec.appliance,
                });
            }
        }
        if sections.is_empty() {
            return Err(Error::Config(format!("no house in the manifest records `{appliance}`")));
        }
        Ok(Self {
            meta: PreparedMeta {
                appliance: appliance.to_string(),
                period: manifest.period,
                normalization: manifest.normalization,
                on_threshold: settings.on_threshold,
                keep_prob: settings.keep_prob,
                sections: sections.iter().map(|s| s.name.clone()).collect(),
            },
            sections,
        })
    }

    /// Writes `prepared.toml` plus one `<section>.csv` per section.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let mpath = dir.join("prepared.toml");
        fs::write(&mpath, meta).map_err(|e| Error::io(&mpath, e))?;
        for sec in &self.sections {
            let mut text = String::from("timestamp,aggregate,appliance\n");
            for ((t, a), y) in sec.timestamps.iter().zip(&sec.aggregate).zip(&sec.appliance) {
                writeln!(text, "{t},{a},{y}").expect("writing to a String");
            }
            let p = dir.join(format!("{}.csv", sec.name));
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("prepared.toml");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: PreparedMeta =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
        let mut sections = Vec::new();
        for name in &meta.sections {
            let p = dir.join(format!("{name}.csv"));
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let mut sec = PreparedSection {
                name: name.clone(),
                timestamps: Vec::new(),
                aggregate: Vec::new(),
                appliance: Vec::new(),
            };
            for (i, line) in text.lines().enumerate().skip(1) {
                let err = |m: &str| Error::Parse { path: p.display().to_string(), line: i + 1, message: m.into() };
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 {
                    return Err(err("expected 3 columns"));
                }
                sec.timestamps.push(f[0].parse().map_err(|_| err("invalid timestamp"))?);
                sec.aggregate.push(f[1].parse().map_err(|_| err("invalid aggregate"))?);
                sec.appliance.push(f[2].parse().map_err(|_| err("invalid appliance value"))?);
            }
            sections.push(sec);
        }
        Ok(Self { meta, sections })
    }
}
