//! Full-sequence inference and error metrics.

use std::fmt::Write as _;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::input_window;
use crate::error::{Error, Result};
use crate::model::Model;

/// Anything that maps aggregate windows to per-step outputs.
pub trait WindowPredictor {
    fn input_len(&self) -> usize;
    /// Output span `(offset, len)` inside the input window.
    fn output_span(&self) -> (usize, usize);
    /// Whether the primary output is a (normalized) power estimate.
    fn predicts_power(&self) -> bool;
    /// `x: [B, input_len]` -> primary output `[B, len]` and, if the
    /// model has one, on-probabilities `[B, len]`.
    fn predict(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)>;
}

impl WindowPredictor for Model {
    fn input_len(&self) -> usize {
        Model::input_len(self)
    }

    fn output_span(&self) -> (usize, usize) {
        Model::output_span(self)
    }

    fn predicts_power(&self) -> bool {
        Model::predicts_power(self)
    }

    fn predict(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.forward_batch(x)?;
        Ok((out.output, out.on_prob))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub stride: usize,
    pub normalization: f64,
    pub batch_size: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { stride: 2, normalization: crate::data::DEFAULT_NORMALIZATION, batch_size: 64 }
    }
}

/// Per-step predictions over a whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Watts, clamped at 0. Absent for classifier-only models.
    pub power: Option<Vec<f64>>,
    pub on_prob: Option<Vec<f64>>,
}

/// Output start positions covering `0..total` with windows of `len`.
fn output_starts(total: usize, len: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=total - len).step_by(stride).collect();
    if *starts.last().expect("total >= len") != total - len {
        starts.push(total - len);
    }
    starts
}

/// Slides the model over `aggregate` (watts) and averages overlapping
/// window outputs per step.
pub fn infer_full(model: &dyn WindowPredictor, aggregate: &[f64], opts: &InferenceOptions) -> Result<Inference> {
    let (_, len) = model.output_span();
    if aggregate.len() < len {
        return Err(Error::Length(format!(
            "sequence of {} steps is shorter than the output span {len}",
            aggregate.len()
        )));
    }
    let n = output_starts(aggregate.len(), len, opts.stride.max(1)).len();
    infer_in_order(model, aggregate, opts, &(0..n).collect::<Vec<_>>())
}

/// Evaluates windows in `order` and reduces them in window order, so the
/// result does not depend on `order`.
fn infer_in_order(
    model: &dyn WindowPredictor,
    aggregate: &[f64],
    opts: &InferenceOptions,
    order: &[usize],
) -> Result<Inference> {
    let (offset, len) = model.output_span();
    if opts.stride == 0 || opts.stride > len {
        return Err(Error::Config(format!("inference stride {} must be in 1..={len}", opts.stride)));
    }
    let scale = opts.normalization;
    if !(scale > 0.0) {
        return Err(Error::Config("normalization must be positive".into()));
    }
    let total = aggregate.len();
    let starts = output_starts(total, len, opts.stride);
    let norm: Vec<f64> = aggregate.iter().map(|v| v / scale).collect();
    let in_len = model.input_len();
    // input window starts at t - offset; pad `offset` on the left via a
    // virtual output-start shift
    let pad_right = in_len - offset - len;
    let mut primary: Vec<Option<Vec<f64>>> = vec![None; starts.len()];
    let mut probs: Vec<Option<Vec<f64>>> = vec![None; starts.len()];
    for chunk in order.chunks(opts.batch_size.max(1)) {
        let mut x = Vec::with_capacity(chunk.len() * in_len);
        for &k in chunk {
            let t = starts[k];
            let win = if offset == pad_right {
                input_window(&norm, t, len, offset)
            } else {
                shifted_window(&norm, t as isize - offset as isize, in_len)
            };
            x.extend(win);
        }
        let (out, on) = model.predict(&Tensor::new(vec![chunk.len(), in_len], x)?)?;
        for (row, &k) in chunk.iter().enumerate() {
            primary[k] = Some(out.row(row).to_vec());
            if let Some(on) = &on {
                probs[k] = Some(on.row(row).to_vec());
            }
        }
    }
    let average = |parts: &[Option<Vec<f64>>]| -> Vec<f64> {
        let mut sum = vec![0.0; total];
        let mut count = vec![0usize; total];
        for (k, p) in parts.iter().enumerate() {
            let p = p.as_ref().expect("every window evaluated");
            for (i, v) in p.iter().enumerate() {
                sum[starts[k] + i] += v;
                count[starts[k] + i] += 1;
            }
        }
        sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
    };
    let main = average(&primary);
    let on_prob = if probs.iter().all(Option::is_some) && !probs.is_empty() { Some(average(&probs)) } else { None };
    if model.predicts_power() {
        Ok(Inference { power: Some(main.iter().map(|v| (v * scale).max(0.0)).collect()), on_prob })
    } else {
        Ok(Inference { power: None, on_prob: Some(main) })
    }
}

fn shifted_window(series: &[f64], start: isize, len: usize) -> Vec<f64> {
    (0..len as isize)
        .map(|i| {
            let j = start + i;
            if j >= 0 && (j as usize) < series.len() {
                series[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Length(format!("{} predictions vs {} ground-truth steps", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Length("empty sequences".into()));
    }
    Ok(())
}

/// Mean absolute error per step.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean over `n_periods` periods of `M = T / N` steps of
/// `|Σ truth − Σ pred| / M`; a trailing partial period is dropped.
pub fn sae(pred: &[f64], truth: &[f64], n_periods: usize) -> Result<f64> {
    check_lengths(pred, truth)?;
    if n_periods == 0 || n_periods > pred.len() {
        return Err(Error::Config(format!("{n_periods} periods for {} steps", pred.len())));
    }
    let m = pred.len() / n_periods;
    let total: f64 = pred
        .chunks_exact(m)
        .zip(truth.chunks_exact(m))
        .take(n_periods)
        .map(|(p, t)| (t.iter().sum::<f64>() - p.iter().sum::<f64>()).abs() / m as f64)
        .sum();
    Ok(total / n_periods as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Scores {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Scores {
    pub fn from_confusion(c: Confusion) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { confusion: c, precision, recall, f1 }
    }
}

/// Precision, recall and F1 of on-states; `prob >= threshold` counts as on.
pub fn f1_from_states(pred_prob: &[f64], truth: &[f64], threshold: f64) -> Result<F1Scores> {
    check_lengths(pred_prob, truth)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (i, (&p, &t)) in pred_prob.iter().zip(truth).enumerate() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidTarget { index: i, value: t });
        }
        match (p >= threshold, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(F1Scores::from_confusion(c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub appliance: String,
    pub mae: f64,
    pub sae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_periods: usize,
    pub period_len: usize,
}

impl MetricsReport {
    /// `pred_prob` defaults to thresholding the predicted power.
    pub fn compute(
        appliance: &str,
        pred_watts: &[f64],
        truth_watts: &[f64],
        pred_prob: Option<&[f64]>,
        on_threshold: f64,
        n_periods: usize,
    ) -> Result<Self> {
        let truth_on = crate::data::derive_on_off(truth_watts, on_threshold);
        let derived;
        let prob = match pred_prob {
            Some(p) => p,
            None => {
                derived = crate::data::derive_on_off(pred_watts, on_threshold);
                &derived
            }
        };
        let f = f1_from_states(prob, &truth_on, 0.5)?;
        Ok(Self {
            appliance: appliance.to_string(),
            mae: mae(pred_watts, truth_watts)?,
            sae: sae(pred_watts, truth_watts, n_periods)?,
            precision: f.precision,
            recall: f.recall,
            f1: f.f1,
            n_periods,
            period_len: pred_watts.len() / n_periods,
        })
    }

    /// `key=value` per line.
    pub fn to_text(&self) -> String {
        format!(
            "appliance={}\nmae={}\nsae={}\nprecision={}\nrecall={}\nf1={}\nn_periods={}\nperiod_len={}\n",
            self.appliance, self.mae, self.sae, self.precision, self.recall, self.f1, self.n_periods, self.period_len
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "report".into(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::Config(format!("report is missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("invalid `{k}`"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Config(format!("invalid `{k}`"))) };
        Ok(Self {
            appliance: get("appliance")?,
            mae: num("mae")?,
            sae: num("sae")?,
            precision: num("precision")?,
            recall: num("recall")?,
            f1: num("f1")?,
            n_periods: int("n_periods")?,
            period_len: int("period_len")?,
        })
    }
}

/// One CSV row per report under a shared header.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("appliance,mae,sae,precision,recall,f1,n_periods,period_len\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.appliance, r.mae, r.sae, r.precision, r.recall, r.f1, r.n_periods, r.period_len
        )
        .expect("String write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Emits `values[k]` over the whole span for the k-th window start,
    /// where the start is read back from a marker in the input.
    struct Marker {
        len: usize,
        values: Vec<f64>,
    }

    impl WindowPredictor for Marker {
        fn input_len(&self) -> usize {
            self.len
        }
        fn output_span(&self) -> (usize, usize) {
            (0, self.len)
        }
        fn predicts_power(&self) -> bool {
            true
        }
        fn predict(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
            let b = x.shape()[0];
            let mut out = Vec::new();
            for r in 0..b {
                // first element encodes the window start (aggregate[t] = t + 1)
                let t = (x.row(r)[0] * 612.0).round() as usize - 1;
                out.extend(std::iter::repeat_n(self.values[t], self.len));
            }
            Ok((Tensor::new(vec![b, self.len], out)?, None))
        }
    }

    fn ramp(n: usize) -> Vec<f64> {
        (1..=n).map(|v| v as f64).collect()
    }

    fn opts(stride: usize) -> InferenceOptions {
        InferenceOptions { stride, normalization: 612.0, batch_size: 3 }
    }

    #[test]
    fn no_overlap_concatenates() {
        let m = Marker { len: 2, values: vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0] };
        let out = infer_full(&m, &ramp(6), &opts(2)).unwrap();
        let w = 612.0;
        assert_eq!(out.power.unwrap(), [w, w, 2.0 * w, 2.0 * w, 3.0 * w, 3.0 * w]);
    }

    #[test]
    fn overlap_is_averaged() {
        // windows start at 0 and 2 with length 3: step 2 is shared
        let m = Marker { len: 3, values: vec![3.0 / 612.0, 0.0, 5.0 / 612.0] };
        let out = infer_full(&m, &ramp(5), &opts(2)).unwrap().power.unwrap();
        assert!((out[2] - 4.0).abs() < 1e-12);
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[4] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constant_model_is_stride_independent() {
        let m = Marker { len: 4, values: vec![0.25; 40] };
        for stride in 1..=4 {
            let out = infer_full(&m, &ramp(37), &opts(stride)).unwrap().power.unwrap();
            assert!(out.iter().all(|&v| (v - 153.0).abs() < 1e-9), "stride {stride}");
        }
        assert!(infer_full(&m, &ramp(3), &opts(1)).is_err());
        assert!(infer_full(&m, &ramp(10), &opts(5)).is_err());
    }

    #[test]
    fn window_order_does_not_matter() {
        let values: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 * 0.013).collect();
        let m = Marker { len: 4, values };
        let agg = ramp(30);
        let n = output_starts(30, 4, 1).len();
        let fwd: Vec<usize> = (0..n).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let mut shuffled = fwd.clone();
        shuffled.sort_by_key(|&k| (k * 13) % n);
        let a = infer_in_order(&m, &agg, &opts(1), &fwd).unwrap();
        assert_eq!(a, infer_in_order(&m, &agg, &opts(1), &rev).unwrap());
        assert_eq!(a, infer_in_order(&m, &agg, &opts(1), &shuffled).unwrap());
    }

    #[test]
    fn negative_outputs_are_clamped() {
        let m = Marker { len: 2, values: vec![-1.0; 4] };
        assert!(infer_full(&m, &ramp(4), &opts(1)).unwrap().power.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[10.0, 30.0]).unwrap(), 20.0);
        assert_eq!(mae(&[5.0, 5.0], &[15.0, 35.0]).unwrap(), mae(&[0.0, 0.0], &[10.0, 30.0]).unwrap());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sae_examples() {
        assert_eq!(sae(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 3).unwrap(), 0.0);
        assert_eq!(sae(&[0.0, 0.0], &[1.0, 3.0], 1).unwrap(), 2.0);
        let t = [1.0, 5.0, 2.0, 7.0, 0.0, 4.0];
        let p = [3.0, 3.0, 1.0, 1.0, 2.0, 9.0];
        let p_perm = [3.0, 3.0, 1.0, 1.0, 9.0, 2.0];
        assert_eq!(sae(&p, &t, 3).unwrap(), sae(&p_perm, &t, 3).unwrap());
        assert!(sae(&p, &t, 7).is_err());
        // trailing partial period dropped: 7 steps, 3 periods of 2
        let v = sae(&[0.0; 7], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0], 3).unwrap();
        assert_eq!(v, 1.0);
    }

    fn states(tp: usize, fp: usize, fn_: usize, tn: usize) -> (Vec<f64>, Vec<f64>) {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for (n, pv, tv) in [(tp, 0.9, 1.0), (fp, 0.5, 0.0), (fn_, 0.49, 1.0), (tn, 0.1, 0.0)] {
            p.extend(std::iter::repeat_n(pv, n));
            t.extend(std::iter::repeat_n(tv, n));
        }
        (p, t)
    }

    #[test]
    fn f1_examples() {
        let (p, t) = states(63, 2, 14, 100);
        let f = f1_from_states(&p, &t, 0.5).unwrap();
        assert_eq!(f.confusion, Confusion { tp: 63, fp: 2, fn_: 14, tn: 100 });
        assert_eq!(f.precision, 63.0 / 65.0);
        assert_eq!(f.recall, 63.0 / 77.0);
        let perfect = f1_from_states(&[1.0, 0.0, 0.7], &[1.0, 0.0, 1.0], 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let off = f1_from_states(&[0.0, 0.2], &[1.0, 0.0], 0.5).unwrap();
        assert_eq!((off.recall, off.f1), (0.0, 0.0));
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricsReport::compute("fridge", &[0.0, 100.0, 120.0, 0.0], &[0.0, 120.0, 120.0, 10.0], None, 15.0, 2)
            .unwrap();
        assert_eq!(r.mae, 7.5);
        assert_eq!(MetricsReport::parse(&r.to_text()).unwrap(), r);
        assert!(reports_to_csv(&[r.clone(), r]).lines().count() == 3);
    }
}
