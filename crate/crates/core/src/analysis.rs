//! Diagnostic exports: attention matrices, feature maps, the
//! attention-bypass comparison and PCA of generated on-state sequences.
//!
//! Every export is a CSV whose first row names the columns and whose
//! first column labels the rows. Plotting contract:
//!
//! - `attention_<stream>.csv`: `Aᵀ`; row `i`, column `j` holds
//!   `A[j][i]`, the weight query step `j` puts on step `i`.
//! - `<tap>.csv`: one row per channel, one column per time step.
//! - `bypass.csv`: columns `t`, `on_with`, `on_without`.
//! - `pca.csv`: one row per sequence with `pc1`, `pc2`, `t0`;
//!   `pca_eigen.csv` lists eigenvalues and explained-variance ratios.
//!
//! `index.json` lists the files written together with these semantics.

use std::fmt::Write as _;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};

/// Row-labelled numeric table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl LabeledMatrix {
    /// Rows `r0..`, columns `c0..`.
    pub fn from_rows(corner: &str, row_prefix: &str, col_prefix: &str, values: Vec<Vec<f64>>) -> Self {
        let width = values.first().map_or(0, Vec::len);
        Self {
            corner: corner.to_string(),
            columns: (0..width).map(|j| format!("{col_prefix}{j}")).collect(),
            rows: (0..values.len()).map(|i| format!("{row_prefix}{i}")).collect(),
            values,
        }
    }

    /// Values use 17 significant digits, so parsing restores them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.corner);
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.rows.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                write!(out, ",{v:.16e}").expect("String write");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::Parse {
            path: source.into(),
            line: 1,
            message: "missing header".into(),
        })?;
        let mut head = head.split(',').map(str::to_string);
        let corner = head.next().unwrap_or_default();
        let columns: Vec<String> = head.collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines {
            let err = |message: String| Error::Parse { path: source.into(), line: i + 1, message };
            let mut cells = line.split(',');
            rows.push(cells.next().unwrap_or_default().to_string());
            let row = cells
                .map(|c| c.trim().parse::<f64>().map_err(|_| err(format!("invalid number `{c}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(err(format!("{} values for {} columns", row.len(), columns.len())));
            }
            values.push(row);
        }
        Ok(Self { corner, columns, rows, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    /// Keeps the middle `width` columns.
    pub fn center_crop(&self, width: usize) -> Self {
        if width >= self.columns.len() {
            return self.clone();
        }
        let start = (self.columns.len() - width) / 2;
        Self {
            corner: self.corner.clone(),
            columns: self.columns[start..start + width].to_vec(),
            rows: self.rows.clone(),
            values: self.values.iter().map(|r| r[start..start + width].to_vec()).collect(),
        }
    }
}

fn single_window(model: &Model, x: &[f64]) -> Result<Tensor> {
    if x.len() != model.input_len() {
        return Err(Error::Length(format!("window has {} steps, model expects {}", x.len(), model.input_len())));
    }
    Ok(Tensor::new(vec![1, x.len()], x.to_vec())?)
}

/// Transposed attention matrix of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub stream: &'static str,
    /// `transposed[i][j] = A[j][i]`.
    pub transposed: Vec<Vec<f64>>,
}

/// `Aᵀ` for each stream with an attention block, after checking that
/// every row of `A` sums to 1 within 1e-9.
pub fn export_attention(model: &Model, x: &[f64]) -> Result<Vec<AttentionExport>> {
    let mut names = Vec::new();
    if model.features().self_attention {
        if model.kind().has_power() {
            names.push(("power", "attention_p"));
        }
        if model.kind().has_on() {
            names.push(("on", "attention_s"));
        }
    }
    if names.is_empty() {
        return Err(Error::TapUnavailable(format!("{} has no attention block", model.kind().name())));
    }
    let taps: Vec<&str> = names.iter().map(|(_, t)| *t).collect();
    let out = model.forward_with(&single_window(model, x)?, &ForwardOptions::default(), &taps)?;
    let mut exports = Vec::new();
    for (stream, tap) in names {
        let a = &out.taps[tap];
        let l = a.shape()[1];
        let d = a.data();
        for j in 0..l {
            let sum: f64 = d[j * l..(j + 1) * l].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Export(format!("attention row {j} of `{stream}` sums to {sum}")));
            }
        }
        let transposed = (0..l).map(|i| (0..l).map(|j| d[j * l + i]).collect()).collect();
        exports.push(AttentionExport { stream, transposed });
    }
    Ok(exports)
}

/// Feature-map taps that [`export_feature_maps`] accepts for a model.
pub fn feature_tap_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for j in 0..model.num_branches() {
        if model.kind().has_power() {
            names.push(format!("p1_{j}"));
        }
        if model.kind().has_on() {
            names.push(format!("s_tilde_{j}"));
        }
    }
    if model.kind().has_power() {
        names.extend(["p3".to_string(), "p4".to_string()]);
    }
    if model.kind().has_on() {
        names.extend(["s3".to_string(), "s4".to_string()]);
    }
    names
}

/// Channel × time matrices for the requested taps of one window.
pub fn export_feature_maps(model: &Model, x: &[f64], which: &[&str]) -> Result<Vec<(String, LabeledMatrix)>> {
    let allowed = feature_tap_names(model);
    if let Some(bad) = which.iter().find(|w| !allowed.iter().any(|a| a == *w)) {
        return Err(Error::TapUnavailable((*bad).to_string()));
    }
    let out = model.forward_with(&single_window(model, x)?, &ForwardOptions::default(), which)?;
    Ok(which
        .iter()
        .map(|&name| {
            let t = &out.taps[name];
            let (c, l) = (t.shape()[1], t.shape()[2]);
            let rows = (0..c).map(|ch| t.data()[ch * l..(ch + 1) * l].to_vec()).collect();
            (name.to_string(), LabeledMatrix::from_rows("channel", "ch", "t", rows))
        })
        .collect())
}

/// On-probabilities with and without the attention residual.
pub fn attention_bypass_compare(model: &Model, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if !model.kind().has_on() {
        return Err(Error::TapUnavailable(format!("{} has no on-state output", model.kind().name())));
    }
    let xt = single_window(model, x)?;
    let with = model.forward_with(&xt, &ForwardOptions::default(), &[])?;
    let without = model.forward_with(&xt, &ForwardOptions { bypass_attention: true, ..Default::default() }, &[])?;
    let take = |o: crate::model::ForwardOutput| o.on_prob.expect("on stream").into_data();
    Ok((take(with), take(without)))
}

/// Principal components of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Projection of each centered point onto the components.
    pub coords: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Trace of the covariance.
    pub total_variance: f64,
}

impl Pca {
    /// Coordinates of other points in the fitted basis.
    pub fn project(&self, points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|p| {
                let c: Vec<f64> = p.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
                self.components
                    .iter()
                    .zip(&self.eigenvalues)
                    .map(|(v, &l)| if l > 0.0 { dot(&c, v) } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|&v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }
}

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Top eigenpairs of the sample covariance by power iteration with
/// deflation, starting each component from a fixed vector.
pub fn pca_modes(points: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    if points.len() < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 sequences, got {}", points.len())));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Length("PCA inputs must share a nonzero length".into()));
    }
    let n = points.len();
    let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centered {
        for a in 0..d {
            for b in a..d {
                cov[a][b] += p[a] * p[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= (n - 1) as f64;
            cov[b][a] = cov[a][b];
        }
    }
    let total_variance: f64 = (0..d).map(|k| cov[k][k]).sum();
    let scale = total_variance.max(f64::MIN_POSITIVE);

    let k = n_components.min(d);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        // irregular fixed start so it is unlikely to be orthogonal to the target
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + c) as f64 * 0.618_033_988_75).fract()).collect();
        orthonormalize(&mut v, &components);
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = mat_vec(&cov, &v);
            orthonormalize_raw(&mut w, &components);
            let norm = dot(&w, &w).sqrt();
            if norm <= PCA_TOLERANCE * scale {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let next = dot(&w, &mat_vec(&cov, &w));
            let moved = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            let settled = (next - lambda).abs() <= PCA_TOLERANCE * scale;
            lambda = next;
            if settled && moved <= PCA_TOLERANCE.sqrt() {
                break;
            }
        }
        // deterministic sign: largest-magnitude entry positive
        let pivot = v.iter().cloned().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvalues.push(lambda.max(0.0));
        components.push(v);
    }
    let coords = centered
        .iter()
        .map(|p| components.iter().zip(&eigenvalues).map(|(c, &l)| if l > 0.0 { dot(p, c) } else { 0.0 }).collect())
        .collect();
    Ok(Pca { coords, eigenvalues, components, mean, total_variance })
}

fn orthonormalize_raw(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    orthonormalize_raw(v, basis);
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Greedy fixed-radius grouping: each point joins the first earlier
/// leader within `radius`, otherwise starts a group. Returns the number
/// of groups with at least `min_size` members.
pub fn count_clusters(points: &[Vec<f64>], radius: f64, min_size: usize) -> usize {
    let mut leaders: Vec<(&[f64], usize)> = Vec::new();
    for p in points {
        let near = leaders
            .iter_mut()
            .find(|(l, _)| l.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= radius);
        match near {
            Some((_, count)) => *count += 1,
            None => leaders.push((p, 1)),
        }
    }
    leaders.iter().filter(|(_, c)| *c >= min_size).count()
}

/// One entry of `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub file: String,
    pub what: String,
    pub rows: String,
    pub columns: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub window_index: Option<usize>,
    pub exports: Vec<ExportEntry>,
}

impl ExportIndex {
    pub fn push(&mut self, file: &str, what: &str, rows: &str, columns: &str) {
        self.exports.push(ExportEntry {
            file: file.into(),
            what: what.into(),
            rows: rows.into(),
            columns: columns.into(),
        });
    }

    /// Merges with an existing index in `dir` and rewrites it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("index.json");
        let mut merged = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str::<ExportIndex>(&text).map_err(|e| Error::Export(e.to_string()))?
        } else {
            ExportIndex::default()
        };
        merged.window_index = self.window_index.or(merged.window_index);
        for e in &self.exports {
            merged.exports.retain(|old| old.file != e.file);
            merged.exports.push(e.clone());
        }
        let text = serde_json::to_string_pretty(&merged).map_err(|e| Error::Export(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
