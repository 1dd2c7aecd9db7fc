//! Synthetic households: `x_t = Σ_i y^i_t + u + ε_t`, clamped at zero.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_channel, ApplianceSettings, HouseEntry, Manifest, TimeSeries};
use crate::error::{Error, Result};
use crate::rng;

/// Inclusive range of step counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub min: usize,
    pub max: usize,
}

impl StepRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, r: &mut impl Rng) -> usize {
        r.gen_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    /// Watts drawn while on.
    pub power: f64,
    /// Length of each on segment.
    pub duration: StepRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Pattern {
    /// One on segment per event.
    SinglePulse,
    /// On/off alternation starting at a random phase.
    Cyclic,
    /// Several on segments per event separated by zero-power pauses.
    MultiStage { stages: usize, pause: StepRange },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceSpec {
    pub name: String,
    pub modes: Vec<Mode>,
    pub pattern: Pattern,
    /// Off time between events.
    pub gap: StepRange,
}

impl ApplianceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("appliance `{}`: {m}", self.name)));
        if self.modes.is_empty() {
            return bad("at least one mode is required");
        }
        for m in &self.modes {
            if !(m.power > 0.0 && m.power.is_finite()) {
                return bad("mode powers must be positive");
            }
            if m.duration.min == 0 || m.duration.min > m.duration.max {
                return bad("mode durations must satisfy 1 <= min <= max");
            }
        }
        if self.gap.min > self.gap.max {
            return bad("gap range is inverted");
        }
        if let Pattern::MultiStage { stages, pause } = &self.pattern {
            if *stages == 0 || pause.min > pause.max {
                return bad("multi-stage pattern needs stages >= 1 and an ordered pause range");
            }
        }
        Ok(())
    }

    /// Copy with every mode power multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for m in &mut out.modes {
            m.power *= factor;
        }
        out
    }

    pub fn min_power(&self) -> f64 {
        self.modes.iter().map(|m| m.power).fold(f64::INFINITY, f64::min)
    }

    /// Power trace and on-state of length `len`, plus the mode index of
    /// each event in order.
    fn generate(&self, len: usize, r: &mut impl Rng) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut power = vec![0.0; len];
        let mut on = vec![0.0; len];
        let mut events = Vec::new();
        let mut fill = |from: usize, n: usize, p: f64| {
            for t in from..(from + n).min(len) {
                power[t] = p;
                on[t] = 1.0;
            }
        };
        let mut t = match self.pattern {
            // random phase within one full cycle
            Pattern::Cyclic => {
                let d = self.modes[0].duration.max + self.gap.max;
                r.gen_range(0..=d) as isize - self.modes[0].duration.max as isize
            }
            _ => r.gen_range(0..=self.gap.max) as isize,
        };
        while t < len as isize {
            let k = r.gen_range(0..self.modes.len());
            let mode = &self.modes[k];
            events.push(k);
            let stages = match &self.pattern {
                Pattern::MultiStage { stages, .. } => *stages,
                _ => 1,
            };
            for stage in 0..stages {
                let d = mode.duration.sample(r) as isize;
                let start = t.max(0);
                let end = t + d;
                if end > 0 {
                    fill(start as usize, (end - start) as usize, mode.power);
                }
                t = end;
                if let (Pattern::MultiStage { pause, .. }, true) = (&self.pattern, stage + 1 < stages) {
                    t += pause.sample(r) as isize;
                }
            }
            t += self.gap.sample(r) as isize;
        }
        (power, on, events)
    }
}

pub fn preset_fridge() -> ApplianceSpec {
    ApplianceSpec {
        name: "fridge".into(),
        modes: vec![Mode { power: 120.0, duration: StepRange::new(150, 250) }],
        pattern: Pattern::Cyclic,
        gap: StepRange::new(250, 450),
    }
}

pub fn preset_microwave() -> ApplianceSpec {
    ApplianceSpec {
        name: "microwave".into(),
        modes: vec![Mode { power: 1250.0, duration: StepRange::new(10, 40) }],
        pattern: Pattern::SinglePulse,
        gap: StepRange::new(1200, 3000),
    }
}

/// Four programmes at distinct power levels, three heating stages each.
pub fn preset_dishwasher_multimode() -> ApplianceSpec {
    let mode = |power| Mode { power, duration: StepRange::new(60, 140) };
    ApplianceSpec {
        name: "dishwasher".into(),
        modes: vec![mode(400.0), mode(900.0), mode(1500.0), mode(2200.0)],
        pattern: Pattern::MultiStage { stages: 3, pause: StepRange::new(20, 60) },
        gap: StepRange::new(1200, 2600),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdSpec {
    pub appliances: Vec<ApplianceSpec>,
    /// Constant unmetered load `u` in watts.
    pub unmetered_base: f64,
    pub noise_std: f64,
    /// Number of steps `T`.
    pub length: usize,
    pub seed: u64,
    /// Seconds per step, used when writing channel files.
    #[serde(default = "default_period")]
    pub period: i64,
    #[serde(default = "default_start")]
    pub start_epoch: i64,
}

fn default_period() -> i64 {
    6
}

fn default_start() -> i64 {
    1_300_000_000
}

impl HouseholdSpec {
    /// Fridge, microwave and four-mode dishwasher.
    pub fn three_appliance(length: usize, seed: u64) -> Self {
        Self {
            appliances: vec![preset_fridge(), preset_microwave(), preset_dishwasher_multimode()],
            unmetered_base: 60.0,
            noise_std: 10.0,
            length,
            seed,
            period: default_period(),
            start_epoch: default_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("household length must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.unmetered_base.is_finite() {
            return Err(Error::Config("noise_std must be >= 0 and unmetered_base finite".into()));
        }
        if self.period <= 0 {
            return Err(Error::Config("period must be positive".into()));
        }
        for (i, a) in self.appliances.iter().enumerate() {
            a.validate()?;
            if self.appliances[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("appliance `{}` listed twice", a.name)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApplianceTrace {
    pub name: String,
    pub power: Vec<f64>,
    pub on: Vec<f64>,
    /// Mode index of each generated event.
    pub events: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Household {
    pub timestamps: Vec<i64>,
    pub aggregate: Vec<f64>,
    pub appliances: Vec<ApplianceTrace>,
}

impl Household {
    pub fn appliance(&self, name: &str) -> Option<&ApplianceTrace> {
        self.appliances.iter().find(|a| a.name == name)
    }

    /// Writes `mains.dat`, one `<name>.dat` per appliance and a
    /// `manifest.toml` that lists them as a single house.
    pub fn write(&self, dir: impl AsRef<Path>, spec: &HouseholdSpec) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mains = TimeSeries { timestamps: self.timestamps.clone(), values: self.aggregate.clone() };
        write_channel(dir.join("mains.dat"), &mains)?;
        let mut house = HouseEntry { name: "house_1".into(), mains: "mains.dat".into(), channels: Default::default() };
        let mut manifest = Manifest {
            period: spec.period,
            normalization: crate::data::DEFAULT_NORMALIZATION,
            appliances: Default::default(),
            houses: Vec::new(),
            root: dir.to_path_buf(),
        };
        for (trace, aspec) in self.appliances.iter().zip(&spec.appliances) {
            let file = format!("{}.dat", trace.name);
            let ts = TimeSeries { timestamps: self.timestamps.clone(), values: trace.power.clone() };
            write_channel(dir.join(&file), &ts)?;
            house.channels.insert(trace.name.clone(), file.into());
            let threshold = crate::data::DEFAULT_ON_THRESHOLD.min(aspec.min_power() / 2.0);
            manifest
                .appliances
                .insert(trace.name.clone(), ApplianceSettings { on_threshold: threshold, keep_prob: 1.0 });
        }
        manifest.houses.push(house);
        manifest.save(dir.join("manifest.toml"))
    }
}

/// Generates a household. Each appliance and the noise draw from their own
/// counter-based streams, so adding an appliance does not change the others.
pub fn simulate(spec: &HouseholdSpec) -> Result<Household> {
    spec.validate()?;
    let n = spec.length;
    let mut aggregate = vec![spec.unmetered_base; n];
    let mut appliances = Vec::new();
    for a in &spec.appliances {
        let mut r = rng::stream(spec.seed, &[rng::label_key("appliance"), rng::label_key(&a.name)]);
        let (power, on, events) = a.generate(n, &mut r);
        for (x, p) in aggregate.iter_mut().zip(&power) {
            *x += p;
        }
        appliances.push(ApplianceTrace { name: a.name.clone(), power, on, events });
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
        let mut r = rng::stream(spec.seed, &[rng::label_key("noise")]);
        for x in aggregate.iter_mut() {
            *x += normal.sample(&mut r);
        }
    }
    for x in aggregate.iter_mut() {
        *x = x.max(0.0);
    }
    let timestamps = (0..n as i64).map(|k| spec.start_epoch + k * spec.period).collect();
    Ok(Household { timestamps, aggregate, appliances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::derive_on_off;

    fn spec(apps: Vec<ApplianceSpec>, u: f64, noise: f64, len: usize) -> HouseholdSpec {
        HouseholdSpec {
            appliances: apps,
            unmetered_base: u,
            noise_std: noise,
            length: len,
            seed: 4,
            period: 6,
            start_epoch: 0,
        }
    }

    #[test]
    fn single_appliance_is_the_aggregate() {
        let h = simulate(&spec(vec![preset_fridge()], 0.0, 0.0, 5000)).unwrap();
        assert_eq!(h.aggregate, h.appliances[0].power);
    }

    #[test]
    fn composition_identity() {
        let h = simulate(&spec(
            vec![preset_fridge(), preset_microwave(), preset_dishwasher_multimode()],
            50.0,
            0.0,
            20_000,
        ))
        .unwrap();
        for t in 0..h.aggregate.len() {
            let sum: f64 = h.appliances.iter().map(|a| a.power[t]).sum();
            assert_eq!(h.aggregate[t] - sum, 50.0);
        }
    }

    #[test]
    fn noise_is_centred() {
        let n = 50_000;
        let h = simulate(&spec(vec![preset_fridge()], 200.0, 10.0, n)).unwrap();
        let resid: f64 = (0..n).map(|t| h.aggregate[t] - h.appliances[0].power[t] - 200.0).sum::<f64>() / n as f64;
        assert!(resid.abs() < 3.0 * 10.0 / (n as f64).sqrt(), "{resid}");
    }

    #[test]
    fn deterministic() {
        let s = HouseholdSpec::three_appliance(3000, 9);
        assert_eq!(simulate(&s).unwrap(), simulate(&s).unwrap());
        let other = HouseholdSpec { seed: 10, ..s.clone() };
        assert_ne!(simulate(&s).unwrap().aggregate, simulate(&other).unwrap().aggregate);
    }

    #[test]
    fn dishwasher_has_four_levels() {
        let d = preset_dishwasher_multimode();
        let mut r = rng::stream(1, &[]);
        let mut levels: Vec<f64> = Vec::new();
        let mut events = 0;
        while events < 1000 {
            let (power, _, ev) = d.generate(200_000, &mut r);
            events += ev.len();
            for p in power.into_iter().filter(|&p| p > 0.0) {
                if !levels.contains(&p) {
                    levels.push(p);
                }
            }
        }
        assert_eq!(levels.len(), 4);
    }

    #[test]
    fn fridge_keeps_cycling() {
        let h = simulate(&spec(vec![preset_fridge()], 0.0, 0.0, 100_000)).unwrap();
        let on = &h.appliances[0].on;
        let switches = on.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(switches > 200);
        // every 1000-step stretch contains both states
        for chunk in on.chunks(1000) {
            assert!(chunk.contains(&1.0) && chunk.contains(&0.0));
        }
    }

    #[test]
    fn microwave_is_sparse() {
        let h = simulate(&spec(vec![preset_microwave()], 0.0, 0.0, 200_000)).unwrap();
        let frac = h.appliances[0].on.iter().sum::<f64>() / 200_000.0;
        assert!(frac > 0.0 && frac < 0.05, "{frac}");
    }

    #[test]
    fn labels_agree_with_state_machine() {
        let h = simulate(&HouseholdSpec::three_appliance(30_000, 2)).unwrap();
        for a in &h.appliances {
            assert_eq!(derive_on_off(&a.power, 15.0), a.on, "{}", a.name);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut a = preset_fridge();
        a.modes[0].power = 0.0;
        assert!(simulate(&spec(vec![a], 0.0, 0.0, 10)).is_err());
        assert!(simulate(&spec(vec![], 0.0, 0.0, 0)).is_err());
        assert!(simulate(&spec(vec![], 0.0, -1.0, 10)).is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let s = HouseholdSpec::three_appliance(1000, 1);
        let text = toml::to_string(&s).unwrap();
        assert_eq!(toml::from_str::<HouseholdSpec>(&text).unwrap(), s);
    }
}
