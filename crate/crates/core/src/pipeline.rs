//! Glue between data preparation, training and evaluation, shared by the
//! CLI and the end-to-end tests.

use crate::data::{derive_on_off, make_windows_with_stride, normalize, subsample_off_state, PreparedDataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{infer_full, Inference, InferenceOptions, MetricsReport, WindowPredictor};
use crate::rng;

/// How raw watt series become training samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub s: usize,
    pub w: usize,
    pub stride: usize,
    pub normalization: f64,
    pub on_threshold: f64,
    pub keep_prob: f64,
    pub seed: u64,
}

/// Normalizes, labels, windows and off-state-subsamples one aligned pair.
pub fn samples_from_series(aggregate: &[f64], appliance: &[f64], opts: &SampleOptions) -> Result<Vec<Sample>> {
    let on = derive_on_off(appliance, opts.on_threshold);
    let x = normalize(aggregate, opts.normalization)?;
    let y = normalize(appliance, opts.normalization)?;
    let windows = make_windows_with_stride(&x, &y, &on, opts.s, opts.w, opts.stride)?;
    subsample_off_state(windows, opts.keep_prob, opts.seed)
}

/// Samples from every section of a prepared dataset, each section
/// subsampled with its own stream.
pub fn samples_from_dataset(ds: &PreparedDataset, s: usize, w: usize, stride: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, sec) in ds.sections.iter().enumerate() {
        if sec.aggregate.len() < s {
            continue;
        }
        let opts = SampleOptions {
            s,
            w,
            stride,
            normalization: ds.meta.normalization,
            on_threshold: ds.meta.on_threshold,
            keep_prob: ds.meta.keep_prob,
            seed: rng::derive_key(seed, &[rng::label_key("section"), i as u64]),
        };
        out.extend(samples_from_series(&sec.aggregate, &sec.appliance, &opts)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Runs full-sequence inference and scores it against `truth` (watts).
pub fn evaluate_series(
    model: &dyn WindowPredictor,
    appliance: &str,
    aggregate: &[f64],
    truth: &[f64],
    on_threshold: f64,
    opts: &InferenceOptions,
    n_periods: usize,
) -> Result<(Inference, MetricsReport)> {
    let inf = infer_full(model, aggregate, opts)?;
    let zeros;
    let power = match &inf.power {
        Some(p) => p.as_slice(),
        None => {
            zeros = vec![0.0; aggregate.len()];
            &zeros
        }
    };
    let report = MetricsReport::compute(appliance, power, truth, inf.on_prob.as_deref(), on_threshold, n_periods)?;
    Ok((inf, report))
}

/// MAE of predicting zero everywhere.
pub fn always_off_mae(truth: &[f64]) -> f64 {
    truth.iter().map(|v| v.abs()).sum::<f64>() / truth.len().max(1) as f64
}
