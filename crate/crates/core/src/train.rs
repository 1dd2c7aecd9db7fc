//! Losses, the WGAN-GP critic, Adam and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use autodiff::{Bindings, GradientMap, Graph, NodeId, ParamId, ParamSource, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{on_state_augment, AugmentSpec, Sample};
use crate::error::{Error, Result};
use crate::layers::{Conv1DLayer, DenseLayer};
use crate::model::{Model, ModelKind};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batch size used when the adversarial loss is active.
    pub adv_batch_size: usize,
    /// Request the adversarial loss; it is only active when `lambda_adv > 0`.
    pub adversarial: bool,
    pub lambda_adv: f64,
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Feed the central `s` steps of `x` to the critic as a second channel.
    pub critic_conditioning: bool,
    pub augment: Option<AugmentSpec>,
    /// Scan every intermediate tensor for NaN/Inf.
    pub checked: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 16,
            adv_batch_size: 32,
            adversarial: false,
            lambda_adv: 0.5,
            lambda_gp: 10.0,
            n_critic: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            critic_conditioning: false,
            augment: None,
            checked: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate > 0.0),
            ("epochs", self.epochs > 0),
            ("batch_size", self.batch_size > 0),
            ("adv_batch_size", self.adv_batch_size > 0),
            ("n_critic", self.n_critic > 0),
            ("epsilon", self.epsilon > 0.0),
            ("lambda_adv", self.lambda_adv >= 0.0),
            ("lambda_gp", self.lambda_gp >= 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
        ];
        let bad: Vec<&str> = positive.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {}", bad.join(", "))))
        }
    }

    /// Whether the adversarial term contributes to training.
    pub fn adversarial_active(&self) -> bool {
        self.adversarial && self.lambda_adv > 0.0
    }

    pub fn effective_batch_size(&self) -> usize {
        if self.adversarial_active() {
            self.adv_batch_size
        } else {
            self.batch_size
        }
    }
}

/// Mean squared error node.
pub fn mse_loss(g: &mut Graph, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    let d = g.sub(prediction, target)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

pub fn mse(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::Length(format!("{} predictions vs {} targets", prediction.len(), target.len())));
    }
    Ok(prediction.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / prediction.len() as f64)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(prob: &[f64], target: &[f64]) -> Result<f64> {
    if prob.len() != target.len() || prob.is_empty() {
        return Err(Error::Length(format!("{} probabilities vs {} targets", prob.len(), target.len())));
    }
    if let Some((index, &value)) = target.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidTarget { index, value });
    }
    let p = Tensor::vector(prob);
    let t = Tensor::vector(target);
    Ok(autodiff::kernels::bce(&p, &t))
}

/// Id offset of critic parameters, keeping them disjoint from model ids.
pub const CRITIC_PARAM_BASE: usize = 1 << 32;

/// WGAN critic over length-`s` sequences: four 32-filter convolutions
/// (kernel 3, ReLU), a 256-unit dense layer and a scalar output.
#[derive(Clone, Debug)]
pub struct Critic {
    params: ParamStore,
    convs: Vec<Conv1DLayer>,
    dense: Vec<DenseLayer>,
    len: usize,
    conditioned: bool,
}

impl Critic {
    pub fn new(len: usize, conditioned: bool, seed: u64) -> Result<Self> {
        let mut params = ParamStore::with_base(CRITIC_PARAM_BASE);
        let mut convs = Vec::new();
        let mut c = if conditioned { 2 } else { 1 };
        for i in 0..4 {
            convs.push(Conv1DLayer::new(&mut params, &format!("critic.conv{}", i + 1), c, 32, 3, 1, seed)?);
            c = 32;
        }
        let dense = vec![
            DenseLayer::new(&mut params, "critic.fc1", 32 * len, 256, seed)?,
            DenseLayer::new(&mut params, "critic.fc2", 256, 1, seed)?,
        ];
        Ok(Self { params, convs, dense, len, conditioned })
    }

    /// `D(a) = w·a + b`, He-initialised. Useful as an analytic reference.
    pub fn linear(len: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::with_base(CRITIC_PARAM_BASE);
        let dense = vec![DenseLayer::new(&mut params, "critic.linear", len, 1, seed)?];
        Ok(Self { params, convs: Vec::new(), dense, len, conditioned: false })
    }

    /// Sets the weights of a [`Critic::linear`] critic.
    pub fn set_linear(&mut self, w: &[f64], b: f64) -> Result<()> {
        if !self.convs.is_empty() || self.dense.len() != 1 {
            return Err(Error::Config("set_linear needs a linear critic".into()));
        }
        let layer = self.dense[0].clone();
        self.params.set(layer.weight, Tensor::new(vec![1, self.len], w.to_vec())?)?;
        self.params.set(layer.bias, Tensor::vector(&[b]))?;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn conditioned(&self) -> bool {
        self.conditioned
    }

    /// `a: [B, s]` (and `cond: [B, s]` when conditioned) -> `[B, 1]`.
    pub fn apply(&self, g: &mut Graph, a: NodeId, cond: Option<NodeId>) -> Result<NodeId> {
        let b = g.shape(a)[0];
        let input = match (self.conditioned, cond) {
            (true, Some(c)) => g.concat(&[a, c], 1)?,
            (false, None) => a,
            _ => return Err(Error::Config("critic conditioning input mismatch".into())),
        };
        if self.convs.is_empty() {
            return self.dense[0].apply(g, input);
        }
        let channels = if self.conditioned { 2 } else { 1 };
        // [a | c] rows reshape into channels a, c
        let mut h = g.reshape(input, &[b, channels, self.len])?;
        for conv in &self.convs {
            let z = conv.apply(g, h)?;
            h = g.relu(z)?;
        }
        let flat = g.reshape(h, &[b, 32 * self.len])?;
        let z = self.dense[0].apply(g, flat)?;
        let z = g.relu(z)?;
        self.dense[1].apply(g, z)
    }

    /// Eager scores for `a: [B, s]`.
    pub fn score(&self, a: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let b = a.shape()[0];
        let mut g = Graph::new();
        let an = g.input("a", &[b, self.len])?;
        let cn = match cond {
            Some(_) => Some(g.input("cond", &[b, self.len])?),
            None => None,
        };
        let d = self.apply(&mut g, an, cn)?;
        let mut bind = Bindings::new().bind_ref("a", a);
        if let Some(c) = cond {
            bind = bind.bind_ref("cond", c);
        }
        Ok(g.evaluate(&self.params, &bind, &[d], true)?.remove(0))
    }
}

/// `mean_b (‖∇_â D(â_b)‖₂ − 1)²` for an input node `interp: [B, s]`.
pub fn gradient_penalty_node(g: &mut Graph, critic: &Critic, interp: NodeId, cond: Option<NodeId>) -> Result<NodeId> {
    let d = critic.apply(g, interp, cond)?;
    let total = g.sum(d)?;
    let grad = autodiff::input_gradient(g, total, interp)?;
    let sq = g.square(grad)?;
    let per_sample = g.reduce_to_axis(sq, 0)?;
    let norm = g.sqrt(per_sample)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let pen = g.square(dev)?;
    Ok(g.mean(pen)?)
}

/// `â = u·real + (1 − u)·fake` with one `u ~ U(0, 1)` per row.
pub fn interpolate(real: &Tensor, fake: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.rank() != 2 {
        return Err(Error::Length(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let s = real.shape()[1];
    let mut out = Vec::with_capacity(real.len());
    for (r, f) in real.data().chunks(s).zip(fake.data().chunks(s)) {
        let u: f64 = rng.gen();
        out.extend(r.iter().zip(f).map(|(a, b)| u * a + (1.0 - u) * b));
    }
    Ok(Tensor::new(real.shape().to_vec(), out)?)
}

/// Gradient penalty on random interpolates of `real` and `fake`.
pub fn gradient_penalty(critic: &Critic, real: &Tensor, fake: &Tensor, rng: &mut impl Rng) -> Result<f64> {
    let interp = interpolate(real, fake, rng)?;
    let mut g = Graph::new();
    let x = g.input("interp", interp.shape())?;
    let gp = gradient_penalty_node(&mut g, critic, x, None)?;
    Ok(g.evaluate(&critic.params, &Bindings::new().bind("interp", interp), &[gp], true)?[0].item())
}

/// Critic objective `E[D(fake)] − E[D(real)] + λ_gp · GP`.
pub fn critic_loss(critic: &Critic, real: &Tensor, fake: &Tensor, lambda_gp: f64, rng: &mut impl Rng) -> Result<f64> {
    let gap = critic.score(fake, None)?.sum() / fake.shape()[0] as f64
        - critic.score(real, None)?.sum() / real.shape()[0] as f64;
    let gp = if lambda_gp == 0.0 { 0.0 } else { gradient_penalty(critic, real, fake, rng)? };
    Ok(gap + lambda_gp * gp)
}

/// Generator's adversarial loss `−E[D(fake)]`.
pub fn generator_adv_loss(critic: &Critic, fake: &Tensor) -> Result<f64> {
    Ok(-critic.score(fake, None)?.sum() / fake.shape()[0] as f64)
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn from_config(c: &TrainingConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.epsilon)
    }
}

/// One bias-corrected Adam update of every parameter present in `grads`.
pub fn adam_step(params: &mut ParamStore, grads: &GradientMap, state: &mut AdamState, lr: f64) -> Result<()> {
    for (&id, g) in grads {
        if params.get(id).shape() != g.shape() {
            return Err(Error::Length(format!(
                "gradient {:?} for parameter `{}` of shape {:?}",
                g.shape(),
                params.name(id),
                params.get(id).shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (&id, g) in grads {
        let m = state.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(id);
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Losses recorded after one generator update. Unused terms are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_output: f64,
    pub l_on: f64,
    pub l_adv: f64,
    pub critic_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<StepRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l_output,l_on,l_adv,critic_loss\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.step, r.l_output, r.l_on, r.l_adv, r.critic_loss).expect("String write");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Hooks invoked by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_epoch_end(&mut self, _epoch: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: LossHistory,
    pub critic: Option<Critic>,
}

struct GeneratorGraph {
    graph: Graph,
    l_output: Option<NodeId>,
    l_on: Option<NodeId>,
    l_adv: Option<NodeId>,
    grads: Vec<(ParamId, NodeId)>,
}

struct CriticGraph {
    graph: Graph,
    loss: NodeId,
    grads: Vec<(ParamId, NodeId)>,
}

struct Batch {
    x: Tensor,
    y: Tensor,
    o: Tensor,
    /// Central `s` steps of `x`, for a conditioned critic.
    center: Tensor,
}

fn assemble(model: &Model, samples: &[&Sample]) -> Result<Batch> {
    let b = samples.len();
    let cfg = model.config();
    let (s, w) = (cfg.s, cfg.w);
    let mut x = Vec::with_capacity(b * model.input_len());
    let mut y = Vec::new();
    let mut o = Vec::new();
    let mut center = Vec::with_capacity(b * s);
    for smp in samples {
        if smp.x.len() != model.input_len() || smp.y.len() != s || smp.o.len() != s {
            return Err(Error::Length(format!(
                "sample lengths x={}, y={}, o={} do not match the model (x={}, s={s})",
                smp.x.len(),
                smp.y.len(),
                smp.o.len(),
                model.input_len()
            )));
        }
        x.extend_from_slice(&smp.x);
        center.extend_from_slice(&smp.x[w..w + s]);
        if model.kind() == ModelKind::Seq2point {
            y.push(smp.y[s / 2]);
            o.push(smp.o[s / 2]);
        } else {
            y.extend_from_slice(&smp.y);
            o.extend_from_slice(&smp.o);
        }
    }
    let out = y.len() / b;
    Ok(Batch {
        x: Tensor::new(vec![b, model.input_len()], x)?,
        y: Tensor::new(vec![b, out], y)?,
        o: Tensor::new(vec![b, out], o)?,
        center: Tensor::new(vec![b, s], center)?,
    })
}

fn build_generator_graph(
    model: &Model,
    critic: Option<&Critic>,
    lambda_adv: f64,
    batch: usize,
) -> Result<GeneratorGraph> {
    let mut g = Graph::new();
    let mg = model.build_graph(&mut g, batch, &Default::default())?;
    let out_len = g.shape(mg.output)[1];
    let mut terms = Vec::new();
    let mut l_output = None;
    let mut l_on = None;
    if model.predicts_power() {
        let y = g.input("y", &[batch, out_len])?;
        let l = mse_loss(&mut g, mg.output, y)?;
        terms.push(l);
        l_output = Some(l);
    }
    if let Some(p) = mg.on_prob {
        let o = g.input("o", &[batch, out_len])?;
        let l = g.bce(p, o)?;
        terms.push(l);
        l_on = Some(l);
    }
    let mut l_adv = None;
    if let Some(c) = critic {
        let cond = if c.conditioned() { Some(g.input("center", &[batch, c.len()])?) } else { None };
        let d = c.apply(&mut g, mg.output, cond)?;
        let m = g.mean(d)?;
        let l = g.scale(m, -1.0)?;
        let weighted = g.scale(l, lambda_adv)?;
        terms.push(weighted);
        l_adv = Some(l);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let leaves: Vec<(ParamId, NodeId)> =
        g.param_nodes().into_iter().filter(|(id, _)| model.params().contains(*id)).collect();
    let wrt: Vec<NodeId> = leaves.iter().map(|(_, n)| *n).collect();
    let grads =
        g.gradients(total, &wrt)?.into_iter().zip(&leaves).filter_map(|(gr, (id, _))| gr.map(|gr| (*id, gr))).collect();
    Ok(GeneratorGraph { graph: g, l_output, l_on, l_adv, grads })
}

fn build_critic_graph(critic: &Critic, lambda_gp: f64, batch: usize) -> Result<CriticGraph> {
    let mut g = Graph::new();
    let s = critic.len();
    let real = g.input("real", &[batch, s])?;
    let fake = g.input("fake", &[batch, s])?;
    let interp = g.input("interp", &[batch, s])?;
    let cond = if critic.conditioned() { Some(g.input("center", &[batch, s])?) } else { None };
    let dr = critic.apply(&mut g, real, cond)?;
    let df = critic.apply(&mut g, fake, cond)?;
    let mr = g.mean(dr)?;
    let mf = g.mean(df)?;
    let mut loss = g.sub(mf, mr)?;
    if lambda_gp > 0.0 {
        let gp = gradient_penalty_node(&mut g, critic, interp, cond)?;
        let w = g.scale(gp, lambda_gp)?;
        loss = g.add(loss, w)?;
    }
    let leaves = g.param_nodes();
    let wrt: Vec<NodeId> = leaves.iter().map(|(_, n)| *n).collect();
    let grads =
        g.gradients(loss, &wrt)?.into_iter().zip(&leaves).filter_map(|(gr, (id, _))| gr.map(|gr| (*id, gr))).collect();
    Ok(CriticGraph { graph: g, loss, grads })
}

fn non_finite(step: usize) -> impl Fn(autodiff::Error) -> Error {
    move |e| match e {
        autodiff::Error::NonFinite { context } => Error::NonFiniteLoss { step, detail: context },
        other => Error::Graph(other),
    }
}

/// Evaluates losses and gradients; returns (loss values, gradients).
fn run(
    graph: &Graph,
    params: &dyn ParamSource,
    bindings: &Bindings<'_>,
    losses: &[NodeId],
    grads: &[(ParamId, NodeId)],
    checked: bool,
    step: usize,
) -> Result<(Vec<f64>, GradientMap)> {
    let mut targets = losses.to_vec();
    targets.extend(grads.iter().map(|(_, n)| *n));
    let mut values = graph.evaluate(params, bindings, &targets, checked).map_err(non_finite(step))?.into_iter();
    let loss_values: Vec<f64> = values.by_ref().take(losses.len()).map(|t| t.item()).collect();
    if let Some(bad) = loss_values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { step, detail: format!("loss value {bad}") });
    }
    let map = grads.iter().map(|(id, _)| *id).zip(values).collect();
    Ok((loss_values, map))
}

/// Trains `model` in place.
pub fn train(
    model: &mut Model,
    dataset: &[Sample],
    config: &TrainingConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let critic = if config.adversarial_active() {
        if !model.predicts_power() || model.kind() == ModelKind::Seq2point {
            return Err(Error::Config(format!(
                "the adversarial loss needs a sequence regression model, not {}",
                model.kind().name()
            )));
        }
        let seed = rng::derive_key(config.seed, &[rng::label_key("critic")]);
        Some(Critic::new(model.config().s, config.critic_conditioning, seed)?)
    } else {
        None
    };
    train_with_critic(model, critic, dataset, config, observer)
}

/// Like [`train`] with an explicit critic. The critic is only updated when
/// the adversarial loss is active.
pub fn train_with_critic(
    model: &mut Model,
    mut critic: Option<Critic>,
    dataset: &[Sample],
    config: &TrainingConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adversarial = config.adversarial_active() && critic.is_some();
    let batch_size = config.effective_batch_size().min(dataset.len());
    let mut gen_adam = AdamState::from_config(config);
    let mut critic_adam = AdamState::from_config(config);
    let mut gen_graphs: HashMap<usize, GeneratorGraph> = HashMap::new();
    let mut critic_graphs: HashMap<usize, CriticGraph> = HashMap::new();
    let mut history = LossHistory::default();
    let mut step = 0;

    let (k_shuffle, k_aug, k_interp) = (rng::label_key("shuffle"), rng::label_key("augment"), rng::label_key("interp"));
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[k_shuffle, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            step += 1;
            let augmented: Vec<Sample>;
            let samples: Vec<&Sample> = match &config.augment {
                Some(aug) => {
                    augmented = chunk
                        .iter()
                        .map(|&i| {
                            let mut r = rng::stream(config.seed, &[k_aug, epoch as u64, i as u64]);
                            on_state_augment(&dataset[i], aug, &mut r)
                        })
                        .collect();
                    augmented.iter().collect()
                }
                None => chunk.iter().map(|&i| &dataset[i]).collect(),
            };
            let batch = assemble(model, &samples).map_err(|e| match e {
                Error::Graph(g) => non_finite(step)(g),
                other => other,
            })?;
            let b = samples.len();

            let mut critic_value = 0.0;
            if adversarial {
                let c = critic.as_mut().expect("adversarial implies critic");
                let fake = model.forward_batch(&batch.x)?.output;
                let cg = match critic_graphs.entry(b) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(build_critic_graph(c, config.lambda_gp, b)?)
                    }
                };
                for it in 0..config.n_critic {
                    let mut r = rng::stream(config.seed, &[k_interp, step as u64, it as u64]);
                    let interp = interpolate(&batch.y, &fake, &mut r)?;
                    let mut bind =
                        Bindings::new().bind_ref("real", &batch.y).bind_ref("fake", &fake).bind("interp", interp);
                    if c.conditioned() {
                        bind = bind.bind_ref("center", &batch.center);
                    }
                    let (l, grads) = run(&cg.graph, &c.params, &bind, &[cg.loss], &cg.grads, config.checked, step)?;
                    critic_value = l[0];
                    adam_step(&mut c.params, &grads, &mut critic_adam, config.learning_rate)?;
                }
            }

            let gg = match gen_graphs.entry(b) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => e.insert(build_generator_graph(
                    model,
                    critic.as_ref().filter(|_| adversarial),
                    config.lambda_adv,
                    b,
                )?),
            };
            let mut bind = Bindings::new().bind_ref("x", &batch.x).bind_ref("y", &batch.y).bind_ref("o", &batch.o);
            if adversarial && critic.as_ref().is_some_and(Critic::conditioned) {
                bind = bind.bind_ref("center", &batch.center);
            }
            let losses: Vec<NodeId> = [gg.l_output, gg.l_on, gg.l_adv].into_iter().flatten().collect();
            let (values, grads) = {
                let empty = ParamStore::with_base(usize::MAX / 2);
                let cp = critic.as_ref().map_or(&empty, |c| &c.params);
                let src = (model.params(), cp);
                run(&gg.graph, &src, &bind, &losses, &gg.grads, config.checked, step)?
            };
            adam_step(model.params_mut(), &grads, &mut gen_adam, config.learning_rate)?;

            let mut it = values.into_iter();
            let record = StepRecord {
                step,
                l_output: gg.l_output.map_or(0.0, |_| it.next().expect("l_output")),
                l_on: gg.l_on.map_or(0.0, |_| it.next().expect("l_on")),
                l_adv: gg.l_adv.map_or(0.0, |_| it.next().expect("l_adv")),
                critic_loss: critic_value,
            };
            observer.on_step(&record);
            history.records.push(record);
        }
        observer.on_epoch_end(epoch, model)?;
    }
    Ok(TrainOutcome { history, critic })
}
