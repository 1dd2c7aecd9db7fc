//! Two-stream disaggregation networks and their baselines.
//!
//! A two-stream model has a regression stream `f_power` and an on/off
//! stream `f_on`; the prediction is `ŷ = ô ⊙ f_power(x)`. Each stream is a
//! conv prefix, one or more dilated branches, an optional 1×1 merge, an
//! optional self-attention block and a two-layer dense head.

use std::collections::BTreeMap;

use autodiff::{Bindings, Graph, NodeId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttentionNodes, Conv1DLayer, DenseLayer, SelfAttentionBlock};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output steps per window.
    pub s: usize,
    /// Context steps on each side of the output span.
    pub w: usize,
    pub conv_filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub branch_dilations: Vec<usize>,
    /// 1-based index of the first branched conv layer.
    pub branch_split_layer: usize,
    pub merge_filters: usize,
    pub attention_reduced: usize,
    pub fc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn redd() -> Self {
        Self {
            s: 64,
            w: 400,
            conv_filters: vec![30, 30, 40, 50, 50, 50],
            kernel_sizes: vec![10, 8, 6, 5, 5, 5],
            branch_dilations: vec![1, 2, 3],
            branch_split_layer: 4,
            merge_filters: 64,
            attention_reduced: 32,
            fc_hidden: 1024,
        }
    }

    pub fn ukdale() -> Self {
        Self { s: 32, w: 200, kernel_sizes: vec![5, 4, 3, 3, 3, 3], ..Self::redd() }
    }

    /// Reduced configuration for single-core runs: UK-DALE kernels, half
    /// the filters, a narrower dense head.
    pub fn desk() -> Self {
        Self {
            s: 32,
            w: 100,
            conv_filters: vec![15, 15, 20, 25, 25, 25],
            kernel_sizes: vec![5, 4, 3, 3, 3, 3],
            branch_dilations: vec![1, 2, 3],
            branch_split_layer: 4,
            merge_filters: 32,
            attention_reduced: 16,
            fc_hidden: 128,
        }
    }

    pub fn input_len(&self) -> usize {
        self.s + 2 * self.w
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.s == 0 {
            problems.push("s must be positive".to_string());
        }
        if self.conv_filters.is_empty() {
            problems.push("conv_filters is empty".into());
        }
        if self.conv_filters.len() != self.kernel_sizes.len() {
            problems.push(format!(
                "conv_filters has {} entries but kernel_sizes has {}",
                self.conv_filters.len(),
                self.kernel_sizes.len()
            ));
        }
        if self.branch_split_layer == 0 || self.branch_split_layer > self.conv_filters.len() {
            problems.push(format!(
                "branch_split_layer {} outside 1..={}",
                self.branch_split_layer,
                self.conv_filters.len()
            ));
        }
        if self.branch_dilations.is_empty() {
            problems.push("branch_dilations is empty".into());
        }
        let positive = [
            ("conv_filters", self.conv_filters.iter().all(|&v| v > 0)),
            ("kernel_sizes", self.kernel_sizes.iter().all(|&v| v > 0)),
            ("branch_dilations", self.branch_dilations.iter().all(|&v| v > 0)),
            ("merge_filters", self.merge_filters > 0),
            ("attention_reduced", self.attention_reduced > 0),
            ("fc_hidden", self.fc_hidden > 0),
        ];
        for (name, ok) in positive {
            if !ok {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Scanet,
    Sgn,
    Seq2point,
    ClassifierOnly,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Scanet => "scanet",
            ModelKind::Sgn => "sgn",
            ModelKind::Seq2point => "seq2point",
            ModelKind::ClassifierOnly => "classifier-only",
        }
    }

    pub fn has_power(self) -> bool {
        !matches!(self, ModelKind::ClassifierOnly)
    }

    pub fn has_on(self) -> bool {
        !matches!(self, ModelKind::Seq2point)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scanet" => Ok(ModelKind::Scanet),
            "sgn" => Ok(ModelKind::Sgn),
            "seq2point" => Ok(ModelKind::Seq2point),
            "classifier-only" => Ok(ModelKind::ClassifierOnly),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Architectural switches of the two-stream family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Features {
    pub multi_scale: bool,
    pub self_attention: bool,
    pub branch_gates: bool,
}

impl Features {
    pub const ALL: Features = Features { multi_scale: true, self_attention: true, branch_gates: true };
    pub const NONE: Features = Features { multi_scale: false, self_attention: false, branch_gates: false };
}

impl Default for Features {
    fn default() -> Self {
        Self::ALL
    }
}

/// Test and analysis hooks for graph construction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace `ô` by this constant before gating the output.
    pub force_on: Option<f64>,
    /// Replace every branch gate `s̃_j` by this constant.
    pub force_gates: Option<f64>,
    /// Feed the merged features straight to the dense head.
    pub bypass_attention: bool,
}

#[derive(Clone, Debug)]
struct Stream {
    prefix: Vec<Conv1DLayer>,
    branches: Vec<Vec<Conv1DLayer>>,
    merge: Option<Conv1DLayer>,
    attention: Option<SelfAttentionBlock>,
    fc1: DenseLayer,
    fc2: DenseLayer,
}

impl Stream {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        dilations: &[usize],
        features: Features,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let split = cfg.branch_split_layer - 1;
        let mut prefix = Vec::new();
        let mut channels = 1;
        for (i, (&f, &k)) in cfg.conv_filters.iter().zip(&cfg.kernel_sizes).enumerate().take(split) {
            prefix.push(Conv1DLayer::new(store, &format!("{name}.conv{}", i + 1), channels, f, k, 1, seed)?);
            channels = f;
        }
        let branch_in = channels;
        let mut branches = Vec::new();
        for (b, &r) in dilations.iter().enumerate() {
            let mut layers = Vec::new();
            let mut c = branch_in;
            for (i, (&f, &k)) in cfg.conv_filters.iter().zip(&cfg.kernel_sizes).enumerate().skip(split) {
                layers.push(Conv1DLayer::new(store, &format!("{name}.branch{b}.conv{}", i + 1), c, f, k, r, seed)?);
                c = f;
            }
            branches.push(layers);
        }
        let last = *cfg.conv_filters.last().expect("validated");
        let (merge, channels) = if dilations.len() > 1 {
            let m = Conv1DLayer::new(
                store,
                &format!("{name}.merge"),
                last * dilations.len(),
                cfg.merge_filters,
                1,
                1,
                seed,
            )?;
            (Some(m), cfg.merge_filters)
        } else {
            (None, last)
        };
        let attention = if features.self_attention {
            Some(SelfAttentionBlock::new(store, &format!("{name}.attention"), channels, cfg.attention_reduced, seed)?)
        } else {
            None
        };
        let fc1 = DenseLayer::new(store, &format!("{name}.fc1"), channels * cfg.input_len(), cfg.fc_hidden, seed)?;
        let fc2 = DenseLayer::new(store, &format!("{name}.fc2"), cfg.fc_hidden, out_dim, seed)?;
        Ok(Self { prefix, branches, merge, attention, fc1, fc2 })
    }

    /// Pre-activations at the end of each branch.
    fn trunk(&self, g: &mut Graph, x: NodeId) -> Result<Vec<NodeId>> {
        let mut h = x;
        for layer in &self.prefix {
            let z = layer.apply(g, h)?;
            h = g.relu(z)?;
        }
        let mut outs = Vec::new();
        for branch in &self.branches {
            let mut b = h;
            for (i, layer) in branch.iter().enumerate() {
                b = layer.apply(g, b)?;
                if i + 1 < branch.len() {
                    b = g.relu(b)?;
                }
            }
            outs.push(b);
        }
        Ok(outs)
    }

    fn merge(&self, g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
        match &self.merge {
            Some(m) => {
                let cat = g.concat(parts, 1)?;
                let z = m.apply(g, cat)?;
                Ok(g.relu(z)?)
            }
            None => Ok(parts[0]),
        }
    }

    /// Attention (unless bypassed), flatten, dense head. Returns the
    /// attention nodes (if any), the head input and the final logits.
    fn head(&self, g: &mut Graph, merged: NodeId, bypass: bool) -> Result<(Option<AttentionNodes>, NodeId, NodeId)> {
        let (att, features) = match (&self.attention, bypass) {
            (Some(block), false) => {
                let nodes = block.apply(g, merged)?;
                (Some(nodes), nodes.output)
            }
            _ => (None, merged),
        };
        let shape = g.shape(features).to_vec();
        let flat = g.reshape(features, &[shape[0], shape[1] * shape[2]])?;
        let h = self.fc1.apply(g, flat)?;
        let h = g.relu(h)?;
        Ok((att, features, self.fc2.apply(g, h)?))
    }

    /// Steps of context each branch output sees to the (left, right).
    fn receptive_extent(&self, branch: usize) -> (usize, usize) {
        self.prefix.iter().chain(&self.branches[branch]).fold((0, 0), |(l, r), layer| {
            let span = (layer.kernel_size - 1) * layer.dilation;
            (l + span / 2, r + span - span / 2)
        })
    }
}

/// Nodes of a model graph built by [`Model::build_graph`].
#[derive(Clone, Debug)]
pub struct ModelGraph {
    /// Input node `x`, `[B, s + 2w]`.
    pub x: NodeId,
    /// Primary output: `ŷ` for regression models, `ô` for classifier-only.
    pub output: NodeId,
    pub power: Option<NodeId>,
    pub on_prob: Option<NodeId>,
    pub taps: BTreeMap<String, NodeId>,
}

/// Result of an eager forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub power: Option<Tensor>,
    pub on_prob: Option<Tensor>,
    pub taps: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    kind: ModelKind,
    features: Features,
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    power: Option<Stream>,
    on: Option<Stream>,
}

pub fn build_scanet(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(ModelKind::Scanet, Features::ALL, config, seed)
}

pub fn build_sgn(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(ModelKind::Sgn, Features::NONE, config, seed)
}

pub fn build_seq2point(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(ModelKind::Seq2point, Features::NONE, config, seed)
}

pub fn build_classifier_only(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(ModelKind::ClassifierOnly, Features::ALL, config, seed)
}

/// `p⁽²⁾_j = p⁽¹⁾_j ⊙ s̃⁽¹⁾_j` for each branch.
pub fn branch_gate(p: &[Tensor], s_tilde: &[Tensor]) -> Result<Vec<Tensor>> {
    if p.len() != s_tilde.len() {
        return Err(Error::Length(format!("{} feature branches but {} gates", p.len(), s_tilde.len())));
    }
    p.iter()
        .zip(s_tilde)
        .map(|(p, s)| {
            if p.shape() != s.shape() {
                return Err(Error::Length(format!("gate shape {:?} vs features {:?}", s.shape(), p.shape())));
            }
            let data = p.data().iter().zip(s.data()).map(|(a, b)| a * b).collect();
            Ok(Tensor::from_raw(p.shape().to_vec(), data))
        })
        .collect()
}

impl Model {
    /// Builds a model. SGN and Seq2point ignore `features`.
    pub fn new(kind: ModelKind, features: Features, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let features = match kind {
            ModelKind::Sgn | ModelKind::Seq2point => Features::NONE,
            _ => features,
        };
        let dilations: Vec<usize> = if features.multi_scale { config.branch_dilations.clone() } else { vec![1] };
        let mut params = ParamStore::new();
        let stream_seed = |name: &str| rng::derive_key(seed, &[rng::label_key(name)]);
        let power = if kind.has_power() {
            let out = if kind == ModelKind::Seq2point { 1 } else { config.s };
            Some(Stream::new(&mut params, "power", config, &dilations, features, out, stream_seed("power"))?)
        } else {
            None
        };
        let on = if kind.has_on() {
            Some(Stream::new(&mut params, "on", config, &dilations, features, config.s, stream_seed("on"))?)
        } else {
            None
        };
        Ok(Self { kind, features, config: config.clone(), seed, params, power, on })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn features(&self) -> Features {
        self.features
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.config.input_len()
    }

    /// Output span relative to the window start: `(offset, length)`.
    pub fn output_span(&self) -> (usize, usize) {
        match self.kind {
            ModelKind::Seq2point => (self.config.w + self.config.s / 2, 1),
            _ => (self.config.w, self.config.s),
        }
    }

    /// True when the primary output is a watt-valued regression.
    pub fn predicts_power(&self) -> bool {
        self.kind.has_power()
    }

    /// `(left, right)` context seen by branch `j` of either stream.
    pub fn receptive_extent(&self, branch: usize) -> (usize, usize) {
        self.power.as_ref().or(self.on.as_ref()).expect("at least one stream").receptive_extent(branch)
    }

    pub fn num_branches(&self) -> usize {
        self.power.as_ref().or(self.on.as_ref()).map_or(0, |s| s.branches.len())
    }

    /// Appends the forward computation for a batch of `batch` windows.
    ///
    /// Taps: `p1_j`, `s_tilde_j`, `s1_j` (branch ends), `p3`, `s3` (merged),
    /// `p4`, `s4` (head inputs), `attention_p`, `attention_s`, `r_p`,
    /// `r_s`, plus `power` and `on_prob`. Only those that exist for the
    /// architecture are present.
    pub fn build_graph(&self, g: &mut Graph, batch: usize, opts: &ForwardOptions) -> Result<ModelGraph> {
        let len = self.input_len();
        let x = g.input("x", &[batch, len])?;
        let x3 = g.reshape(x, &[batch, 1, len])?;
        let mut taps = BTreeMap::new();

        let on_pre = match &self.on {
            Some(s) => s.trunk(g, x3)?,
            None => Vec::new(),
        };
        let mut gates = Vec::new();
        let mut on_feats = Vec::new();
        for (j, &pre) in on_pre.iter().enumerate() {
            let gate = g.sigmoid(pre)?;
            let feat = g.relu(pre)?;
            taps.insert(format!("s_tilde_{j}"), gate);
            taps.insert(format!("s1_{j}"), feat);
            gates.push(gate);
            on_feats.push(feat);
        }

        let mut power = None;
        if let Some(stream) = &self.power {
            let pre = stream.trunk(g, x3)?;
            let mut parts = Vec::new();
            for (j, &p) in pre.iter().enumerate() {
                let p1 = g.relu(p)?;
                taps.insert(format!("p1_{j}"), p1);
                let gated = if self.features.branch_gates && !gates.is_empty() {
                    let gate = match opts.force_gates {
                        Some(v) => {
                            let shape = g.shape(p1).to_vec();
                            g.constant(Tensor::full(&shape, v))
                        }
                        None => gates[j],
                    };
                    g.mul(p1, gate)?
                } else {
                    p1
                };
                parts.push(gated);
            }
            let p3 = stream.merge(g, &parts)?;
            taps.insert("p3".into(), p3);
            let (att, p4, out) = stream.head(g, p3, opts.bypass_attention)?;
            taps.insert("p4".into(), p4);
            if let Some(a) = att {
                taps.insert("attention_p".into(), a.attention);
                taps.insert("r_p".into(), a.r);
            }
            g.set_label(out, "power");
            taps.insert("power".into(), out);
            power = Some(out);
        }

        let mut on_prob = None;
        if let Some(stream) = &self.on {
            let s3 = stream.merge(g, &on_feats)?;
            taps.insert("s3".into(), s3);
            let (att, s4, logits) = stream.head(g, s3, opts.bypass_attention)?;
            taps.insert("s4".into(), s4);
            if let Some(a) = att {
                taps.insert("attention_s".into(), a.attention);
                taps.insert("r_s".into(), a.r);
            }
            let p = g.sigmoid(logits)?;
            g.set_label(p, "on_prob");
            taps.insert("on_prob".into(), p);
            on_prob = Some(p);
        }

        let output = match (power, on_prob) {
            (Some(p), Some(o)) => {
                let gate = match opts.force_on {
                    Some(v) => {
                        let shape = g.shape(o).to_vec();
                        g.constant(Tensor::full(&shape, v))
                    }
                    None => o,
                };
                g.mul(gate, p)?
            }
            (Some(p), None) => p,
            (None, Some(o)) => o,
            (None, None) => unreachable!("model without streams"),
        };
        g.set_label(output, "output");
        Ok(ModelGraph { x, output, power, on_prob, taps })
    }

    /// Eager forward pass over `x: [B, s + 2w]`, also evaluating the named taps.
    pub fn forward_with(&self, x: &Tensor, opts: &ForwardOptions, taps: &[&str]) -> Result<ForwardOutput> {
        if x.rank() != 2 || x.shape()[1] != self.input_len() {
            return Err(Error::Length(format!("expected input [B, {}], got {:?}", self.input_len(), x.shape())));
        }
        let mut g = Graph::new();
        let mg = self.build_graph(&mut g, x.shape()[0], opts)?;
        let mut targets = vec![mg.output];
        targets.extend(mg.power);
        targets.extend(mg.on_prob);
        for &name in taps {
            targets.push(*mg.taps.get(name).ok_or_else(|| Error::TapUnavailable(name.to_string()))?);
        }
        let mut values = g.evaluate(&self.params, &Bindings::new().bind_ref("x", x), &targets, true)?.into_iter();
        let output = values.next().expect("output");
        let power = mg.power.map(|_| values.next().expect("power"));
        let on_prob = mg.on_prob.map(|_| values.next().expect("on_prob"));
        let taps = taps.iter().map(|n| (n.to_string(), values.next().expect("tap"))).collect();
        Ok(ForwardOutput { output, power, on_prob, taps })
    }

    pub fn forward_batch(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(x, &ForwardOptions::default(), &[])
    }

    /// Single window of length `s + 2w`; rejects negative inputs.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        if x.len() != self.input_len() {
            return Err(Error::Length(format!("window has {} steps, model expects {}", x.len(), self.input_len())));
        }
        if let Some(i) = x.iter().position(|&v| v < 0.0) {
            return Err(Error::Length(format!("negative aggregate value {} at step {i}", x[i])));
        }
        self.forward_batch(&Tensor::new(vec![1, x.len()], x.to_vec())?)
    }

    /// Replaces all parameters from `(name, tensor)` pairs; names and
    /// shapes must match the architecture exactly.
    pub(crate) fn load_params(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, architecture has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = self.params.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            self.params.set(id, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    /// Ids of the dense head's last layer in each stream (power, on).
    pub fn final_layers(&self) -> Vec<(autodiff::ParamId, autodiff::ParamId)> {
        self.power.iter().chain(&self.on).map(|s| (s.fc2.weight, s.fc2.bias)).collect()
    }

    /// Bias ids of the merge conv in the power stream, if present.
    pub fn power_merge_bias(&self) -> Option<autodiff::ParamId> {
        self.power.as_ref()?.merge.as_ref()?.bias
    }

    /// Ids of the attention blocks' `(γ, W_d)` in (power, on) order.
    pub fn attention_params(&self) -> Vec<(autodiff::ParamId, autodiff::ParamId)> {
        self.power.iter().chain(&self.on).filter_map(|s| s.attention.as_ref().map(|a| (a.gamma, a.wd.weight))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            s: 4,
            w: 6,
            conv_filters: vec![3, 3, 4, 4],
            kernel_sizes: vec![3, 2, 3, 3],
            branch_dilations: vec![1, 2, 3],
            branch_split_layer: 3,
            merge_filters: 5,
            attention_reduced: 2,
            fc_hidden: 8,
        }
    }

    fn window(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        crate::layers::he_normal_init(&[cfg.input_len()], 1, seed).data().iter().map(|v| v.abs()).collect()
    }

    #[test]
    fn preset_input_lengths() {
        assert_eq!(ModelConfig::redd().input_len(), 864);
        assert_eq!(ModelConfig::ukdale().input_len(), 432);
        assert_eq!(ModelConfig::desk().input_len(), 232);
    }

    #[test]
    fn invalid_config_lists_problems() {
        let cfg = ModelConfig { kernel_sizes: vec![3], branch_split_layer: 9, ..tiny() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("kernel_sizes") && msg.contains("branch_split_layer"), "{msg}");
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let a = build_scanet(&tiny(), 5).unwrap();
        let b = build_scanet(&tiny(), 5).unwrap();
        let c = build_scanet(&tiny(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for (g, _) in a.attention_params() {
            assert_eq!(a.params().get(g).item(), 0.0);
        }
    }

    #[test]
    fn branch_gate_examples() {
        let p = vec![Tensor::vector(&[2.0, 3.0])];
        assert_eq!(branch_gate(&p, &[Tensor::vector(&[0.5, 1.0])]).unwrap()[0].data(), &[1.0, 3.0]);
        assert_eq!(branch_gate(&p, &[Tensor::vector(&[0.0, 0.0])]).unwrap()[0].data(), &[0.0, 0.0]);
        assert_eq!(branch_gate(&p, &[Tensor::vector(&[1.0, 1.0])]).unwrap()[0], p[0]);
        assert!(branch_gate(&p, &[Tensor::vector(&[1.0])]).is_err());
    }

    #[test]
    fn output_gating_and_forcing() {
        let cfg = tiny();
        let m = build_scanet(&cfg, 1).unwrap();
        let x = Tensor::new(vec![1, cfg.input_len()], window(&cfg, 2)).unwrap();
        let out = m.forward_batch(&x).unwrap();
        let (power, on) = (out.power.unwrap(), out.on_prob.unwrap());
        for t in 0..cfg.s {
            assert_eq!(out.output.data()[t], on.data()[t] * power.data()[t]);
        }
        let zero = m.forward_with(&x, &ForwardOptions { force_on: Some(0.0), ..Default::default() }, &[]).unwrap();
        assert!(zero.output.data().iter().all(|&v| v == 0.0));
        let one = m.forward_with(&x, &ForwardOptions { force_on: Some(1.0), ..Default::default() }, &[]).unwrap();
        assert_eq!(one.output, power);
        assert_eq!(m.forward_batch(&x).unwrap().output, out.output);
    }

    #[test]
    fn baselines_shapes() {
        let cfg = tiny();
        let x = Tensor::new(vec![2, cfg.input_len()], [window(&cfg, 3), window(&cfg, 4)].concat()).unwrap();
        let sgn = build_sgn(&cfg, 1).unwrap();
        assert_eq!(sgn.num_branches(), 1);
        assert_eq!(sgn.forward_batch(&x).unwrap().output.shape(), &[2, 4]);
        let s2p = build_seq2point(&cfg, 1).unwrap();
        assert_eq!(s2p.forward_batch(&x).unwrap().output.shape(), &[2, 1]);
        assert_eq!(s2p.output_span(), (8, 1));
        let clf = build_classifier_only(&cfg, 1).unwrap();
        let o = clf.forward_batch(&x).unwrap().output;
        assert!(o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn classifier_zero_final_layer_gives_half() {
        let cfg = tiny();
        let mut clf = build_classifier_only(&cfg, 1).unwrap();
        let (w, b) = clf.final_layers()[0];
        let zw = Tensor::zeros(clf.params().get(w).shape());
        let zb = Tensor::zeros(clf.params().get(b).shape());
        clf.params_mut().set(w, zw).unwrap();
        clf.params_mut().set(b, zb).unwrap();
        let o = clf.forward(&window(&cfg, 9)).unwrap().output;
        assert!(o.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_wrong_length_and_negative_input() {
        let cfg = tiny();
        let m = build_sgn(&cfg, 0).unwrap();
        assert!(m.forward(&[0.0; 3]).is_err());
        let mut x = window(&cfg, 1);
        x[2] = -1.0;
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn missing_tap_is_reported() {
        let cfg = tiny();
        let m = build_sgn(&cfg, 0).unwrap();
        let x = Tensor::new(vec![1, cfg.input_len()], window(&cfg, 1)).unwrap();
        let err = m.forward_with(&x, &ForwardOptions::default(), &["attention_p"]).unwrap_err();
        assert!(matches!(err, Error::TapUnavailable(_)));
    }
}
