//! End-to-end acceptance criteria, run in order by one test so trained
//! models can be shared between criteria. Each criterion prints a single
//! `PASS`/`FAIL` line on stdout (bypassing the test harness capture) and
//! the test fails if any criterion does.
//!
//! The training criteria take roughly half an hour on one core.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use autodiff::{finite_difference_check, Bindings, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scanet::analysis::{count_clusters, pca_modes};
use scanet::commands::{self, ExperimentConfig, TrainRequest};
use scanet::data::{derive_on_off, make_windows_with_stride, normalize, AugmentSpec, Sample};
use scanet::metrics::{f1_from_states, mae, sae, Confusion, F1Scores, InferenceOptions};
use scanet::model::{Features, ForwardOptions, Model, ModelConfig, ModelKind};
use scanet::pipeline::{always_off_mae, evaluate_series, samples_from_series, SampleOptions};
use scanet::sim::{simulate, Household, HouseholdSpec};
use scanet::train::{gradient_penalty_node, mse_loss, train, Critic, TrainingConfig};

const FD_STEP: f64 = 1e-5;
/// Smaller step for the full network, whose many ReLUs make kink
/// crossings likely at 1e-5.
const NETWORK_FD_STEP: f64 = 1e-6;
const FIRST_ORDER_TOL: f64 = 1e-4;
const SECOND_ORDER_TOL: f64 = 1e-3;
const INSTANCES: u64 = 20;
const ROW_SUM_TOL: f64 = 1e-9;

const NORMALIZATION: f64 = 612.0;
const ON_THRESHOLD: f64 = 15.0;
const TRAIN_LEN: usize = 50_000;
const TRAIN_SEED: u64 = 11;
const TEST_LEN: usize = 20_000;
const TEST_SEED: u64 = 22;
const TRAIN_STRIDE: usize = 16;
const EVAL_STRIDE: usize = 16;
const SAE_PERIODS: usize = 100;
const SEEDS: [u64; 3] = [1, 2, 3];
const APPLIANCES: [&str; 3] = ["fridge", "microwave", "dishwasher"];

const BASELINE_RATIO: f64 = 0.7;
const ABLATION_SLACK: f64 = 0.05;
const MIN_MODES: usize = 4;
const SHIFT_FACTOR: f64 = 1.25;
/// ±30 W in normalized units.
const FRIDGE_AUGMENT: f64 = 30.0 / NORMALIZATION;
const TRANSFER_AUGMENT: f64 = 0.15;

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

// ---------------------------------------------------------------- shared

fn keep_prob(appliance: &str) -> f64 {
    if appliance == "fridge" {
        0.5
    } else {
        0.2
    }
}

fn training(seed: u64) -> TrainingConfig {
    TrainingConfig { learning_rate: 1e-3, epochs: 5, seed, checked: false, ..Default::default() }
}

fn inference() -> InferenceOptions {
    InferenceOptions { stride: EVAL_STRIDE, normalization: NORMALIZATION, batch_size: 64 }
}

struct Households {
    train: Household,
    test: Household,
}

impl Households {
    fn new() -> Self {
        Self {
            train: simulate(&HouseholdSpec::three_appliance(TRAIN_LEN, TRAIN_SEED)).unwrap(),
            test: simulate(&HouseholdSpec::three_appliance(TEST_LEN, TEST_SEED)).unwrap(),
        }
    }

    fn samples(&self, appliance: &str, seed: u64) -> Vec<Sample> {
        let cfg = ModelConfig::desk();
        let opts = SampleOptions {
            s: cfg.s,
            w: cfg.w,
            stride: TRAIN_STRIDE,
            normalization: NORMALIZATION,
            on_threshold: ON_THRESHOLD,
            keep_prob: keep_prob(appliance),
            seed,
        };
        samples_from_series(&self.train.aggregate, &self.train.appliance(appliance).unwrap().power, &opts).unwrap()
    }
}

/// Test household with the given appliances' power scaled.
fn shifted_household(scaled: &[&str]) -> Household {
    let mut spec = HouseholdSpec::three_appliance(TEST_LEN, TEST_SEED);
    for a in &mut spec.appliances {
        if scaled.contains(&a.name.as_str()) {
            *a = a.scaled(SHIFT_FACTOR);
        }
    }
    simulate(&spec).unwrap()
}

fn fit(kind: ModelKind, features: Features, samples: &[Sample], tc: &TrainingConfig) -> Model {
    let mut model = Model::new(kind, features, &ModelConfig::desk(), tc.seed).unwrap();
    train(&mut model, samples, tc, &mut ()).unwrap();
    model
}

fn score(model: &Model, house: &Household, appliance: &str) -> scanet::metrics::MetricsReport {
    let truth = &house.appliance(appliance).unwrap().power;
    evaluate_series(model, appliance, &house.aggregate, truth, ON_THRESHOLD, &inference(), SAE_PERIODS).unwrap().1
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

// ------------------------------------------------------------ criterion 1

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar along a random direction.
fn project(g: &mut Graph, rng: &mut ChaCha8Rng, y: NodeId) -> NodeId {
    let dir = g.constant(rand_tensor(rng, g.shape(y)));
    let prod = g.mul(y, dir).unwrap();
    g.sum(prod).unwrap()
}

type OpCase = (&'static str, fn(&mut Graph) -> NodeId);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", |g| {
            let (a, b) = (g.input("a", &[3, 4]).unwrap(), g.input("b", &[3, 4]).unwrap());
            g.add(a, b).unwrap()
        }),
        ("sub", |g| {
            let (a, b) = (g.input("a", &[3, 4]).unwrap(), g.input("b", &[3, 4]).unwrap());
            g.sub(a, b).unwrap()
        }),
        ("mul", |g| {
            let (a, b) = (g.input("a", &[3, 4]).unwrap(), g.input("b", &[3, 4]).unwrap());
            g.mul(a, b).unwrap()
        }),
        ("scale", |g| {
            let a = g.input("a", &[5]).unwrap();
            let s = g.scale(a, -1.7).unwrap();
            g.add_scalar(s, 0.3).unwrap()
        }),
        ("mul_by_scalar", |g| {
            let (a, s) = (g.input("a", &[2, 3]).unwrap(), g.input("s", &[]).unwrap());
            g.mul_by_scalar(a, s).unwrap()
        }),
        ("matmul", |g| {
            let (a, b) = (g.input("a", &[3, 4]).unwrap(), g.input("b", &[4, 2]).unwrap());
            g.matmul(a, b).unwrap()
        }),
        ("batched_matmul", |g| {
            let (a, b) = (g.input("a", &[2, 3, 4]).unwrap(), g.input("b", &[2, 3, 5]).unwrap());
            g.matmul_t(a, b, true, false).unwrap()
        }),
        ("conv1d", |g| {
            let (x, w) = (g.input("x", &[2, 3, 9]).unwrap(), g.input("w", &[2, 3, 4]).unwrap());
            g.conv1d(x, w, 2).unwrap()
        }),
        ("bias_add", |g| {
            let (x, b) = (g.input("x", &[2, 3, 5]).unwrap(), g.input("b", &[3]).unwrap());
            g.bias_add(x, b).unwrap()
        }),
        ("relu", |g| {
            let x = g.input("x", &[12]).unwrap();
            g.relu(x).unwrap()
        }),
        ("sigmoid", |g| {
            let x = g.input("x", &[12]).unwrap();
            g.sigmoid(x).unwrap()
        }),
        ("softmax", |g| {
            let x = g.input("x", &[2, 4, 3]).unwrap();
            g.softmax(x, 1).unwrap()
        }),
        ("concat", |g| {
            let (a, b) = (g.input("a", &[2, 2, 3]).unwrap(), g.input("b", &[2, 1, 3]).unwrap());
            g.concat(&[a, b], 1).unwrap()
        }),
        ("mean", |g| {
            let x = g.input("x", &[3, 3]).unwrap();
            let m = g.mean(x).unwrap();
            g.reshape(m, &[1]).unwrap()
        }),
        ("square_sqrt", |g| {
            let x = g.input("x", &[6]).unwrap();
            let sq = g.square(x).unwrap();
            let pos = g.add_scalar(sq, 0.5).unwrap();
            g.sqrt(pos).unwrap()
        }),
        ("abs", |g| {
            let x = g.input("x", &[6]).unwrap();
            g.abs(x).unwrap()
        }),
        ("bce", |g| {
            let x = g.input("x", &[6]).unwrap();
            let p = g.sigmoid(x).unwrap();
            let t = g.constant(Tensor::vector(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]));
            let l = g.bce(p, t).unwrap();
            g.reshape(l, &[1]).unwrap()
        }),
        ("slice", |g| {
            let x = g.input("x", &[2, 7]).unwrap();
            g.slice(x, 1, 2, 3).unwrap()
        }),
        ("reshape_reduce", |g| {
            let x = g.input("x", &[2, 3, 2]).unwrap();
            let r = g.reshape(x, &[2, 6]).unwrap();
            g.reduce_to_axis(r, 0).unwrap()
        }),
    ]
}

fn check_ops() -> (f64, usize) {
    let store = ParamStore::new();
    let (mut worst, mut checks) = (0.0f64, 0);
    for (i, (_, build)) in op_cases().into_iter().enumerate() {
        for instance in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * i as u64 + instance);
            let mut g = Graph::new();
            let y = build(&mut g);
            let out = project(&mut g, &mut rng, y);
            let mut b = Bindings::new();
            let mut leaves = Vec::new();
            for name in ["a", "b", "s", "x", "w"] {
                if let Some(leaf) = g.input_node(name) {
                    let mut t = rand_tensor(&mut rng, g.shape(leaf));
                    // keep probes off the relu/abs kink
                    for v in t.data_mut() {
                        if v.abs() < 1e-3 {
                            *v = 0.5;
                        }
                    }
                    b.insert(name, t);
                    leaves.push(leaf);
                }
            }
            for leaf in leaves {
                worst = worst.max(finite_difference_check(&g, &store, &b, out, leaf, FD_STEP, usize::MAX).unwrap());
                checks += 1;
            }
        }
    }
    (worst, checks)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        s: 4,
        w: 4,
        conv_filters: vec![3, 3, 4],
        kernel_sizes: vec![3, 3, 3],
        branch_dilations: vec![1, 2],
        branch_split_layer: 2,
        merge_filters: 4,
        attention_reduced: 2,
        fc_hidden: 6,
    }
}

/// Full generator loss (output MSE + on-state BCE + adversarial term)
/// against every generator parameter tensor.
fn check_scanet_loss() -> f64 {
    let cfg = tiny_config();
    let batch = 3;
    let mut worst = 0.0f64;
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + instance);
        let mut model = Model::new(ModelKind::Scanet, Features::ALL, &cfg, instance).unwrap();
        // move off the initialization: zero biases put pre-activations exactly
        // on ReLU kinks, and γ = 0 leaves the attention weights without gradient
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let mut t = model.params().get(id).clone();
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
            model.params_mut().set(id, t).unwrap();
        }
        for (gamma, _) in model.attention_params() {
            model.params_mut().set(gamma, Tensor::scalar(rng.gen_range(0.2..0.8))).unwrap();
        }
        let critic = Critic::new(cfg.s, false, instance).unwrap();
        let mut g = Graph::new();
        let mg = model.build_graph(&mut g, batch, &ForwardOptions::default()).unwrap();
        let y = g.input("y", &[batch, cfg.s]).unwrap();
        let o = g.input("o", &[batch, cfg.s]).unwrap();
        let l_out = mse_loss(&mut g, mg.output, y).unwrap();
        let l_on = g.bce(mg.on_prob.unwrap(), o).unwrap();
        let d = critic.apply(&mut g, mg.output, None).unwrap();
        let dm = g.mean(d).unwrap();
        let l_adv = g.scale(dm, -0.5).unwrap();
        let sup = g.add(l_out, l_on).unwrap();
        let total = g.add(sup, l_adv).unwrap();
        let x: Vec<f64> = (0..batch * cfg.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let yv: Vec<f64> = (0..batch * cfg.s).map(|_| rng.gen_range(0.0..0.5)).collect();
        let ov: Vec<f64> = yv.iter().map(|&v| if v > 0.25 { 1.0 } else { 0.0 }).collect();
        let b = Bindings::new()
            .bind("x", Tensor::new(vec![batch, cfg.input_len()], x).unwrap())
            .bind("y", Tensor::new(vec![batch, cfg.s], yv).unwrap())
            .bind("o", Tensor::new(vec![batch, cfg.s], ov).unwrap());
        let params = (model.params(), critic.params());
        for (id, leaf) in g.param_nodes() {
            if model.params().contains(id) {
                worst = worst.max(finite_difference_check(&g, &params, &b, total, leaf, NETWORK_FD_STEP, 6).unwrap());
            }
        }
    }
    worst
}

/// Gradient of the penalty with respect to the critic's parameters, which
/// differentiates through the critic's input gradient.
fn check_penalty_second_order() -> f64 {
    let len = 6;
    let mut worst = 0.0f64;
    for instance in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + instance);
        let critic = Critic::new(len, false, instance).unwrap();
        let mut g = Graph::new();
        let interp = g.input("interp", &[2, len]).unwrap();
        let gp = gradient_penalty_node(&mut g, &critic, interp, None).unwrap();
        let b = Bindings::new().bind("interp", rand_tensor(&mut rng, &[2, len]));
        for (_, leaf) in g.param_nodes() {
            worst = worst.max(finite_difference_check(&g, critic.params(), &b, gp, leaf, FD_STEP, 6).unwrap());
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (ops, checks) = check_ops();
    let loss = check_scanet_loss();
    let gp = check_penalty_second_order();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        ops < FIRST_ORDER_TOL && loss < FIRST_ORDER_TOL && gp < SECOND_ORDER_TOL && secs < 120.0,
        format!(
            "ops worst rel err {ops:.2e} over {checks} checks, SCANet loss {loss:.2e}, penalty 2nd order {gp:.2e}, \
             {INSTANCES} instances each, {secs:.1}s"
        ),
    )
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        s: 6,
        w: 10,
        conv_filters: vec![3, 3, 4, 4],
        kernel_sizes: vec![3, 2, 3, 3],
        branch_dilations: vec![1, 2, 3],
        branch_split_layer: 3,
        merge_filters: 5,
        attention_reduced: 2,
        fc_hidden: 8,
    };
    let len = cfg.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let window = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..len).map(|_| rng.gen_range(0.0..2.0)).collect() };
    let x = Tensor::new(vec![2, len], [window(&mut rng), window(&mut rng)].concat()).unwrap();
    let mut model = Model::new(ModelKind::Scanet, Features::ALL, &cfg, 3).unwrap();
    let mut failures = Vec::new();
    let forced = |m: &Model, opts: ForwardOptions, taps: &[&str]| m.forward_with(&x, &opts, taps).unwrap();

    // output gating: ŷ = ô ⊙ f_power(x)
    let base = forced(&model, ForwardOptions::default(), &[]);
    let zero = forced(&model, ForwardOptions { force_on: Some(0.0), ..Default::default() }, &[]);
    let one = forced(&model, ForwardOptions { force_on: Some(1.0), ..Default::default() }, &[]);
    if !zero.output.data().iter().all(|&v| v == 0.0) || one.output != *base.power.as_ref().unwrap() {
        failures.push("output gate");
    }

    // γ = 0 at initialization: attention is an exact no-op
    let bypass = forced(&model, ForwardOptions { bypass_attention: true, ..Default::default() }, &[]);
    if bypass.output != base.output {
        failures.push("zero residual scale");
    }

    // branch gates: open gates are the identity, closed gates leave only the merge biases
    let taps = ["p1_0", "p1_1", "p1_2", "p3"];
    let open = forced(&model, ForwardOptions { force_gates: Some(1.0), ..Default::default() }, &taps);
    let ungated = Model::new(ModelKind::Scanet, Features { branch_gates: false, ..Features::ALL }, &cfg, 3).unwrap();
    if open.taps["p3"] != ungated.forward_with(&x, &ForwardOptions::default(), &["p3"]).unwrap().taps["p3"] {
        failures.push("open branch gate");
    }
    let closed = forced(&model, ForwardOptions { force_gates: Some(0.0), ..Default::default() }, &["p3"]);
    let bias = model.params().get(model.power_merge_bias().unwrap()).data().to_vec();
    let p3 = &closed.taps["p3"];
    let (c, l) = (p3.shape()[1], p3.shape()[2]);
    let bias_only = p3.data().iter().enumerate().all(|(i, &v)| v == bias[(i / l) % c].max(0.0));
    if !bias_only {
        failures.push("closed branch gate");
    }

    // attention rows sum to one, once γ is non-zero
    for (gamma, _) in model.attention_params() {
        model.params_mut().set(gamma, Tensor::scalar(0.7)).unwrap();
    }
    let att = forced(&model, ForwardOptions::default(), &["attention_p", "attention_s"]);
    let mut worst_row = 0.0f64;
    for a in att.taps.values() {
        let n = a.shape()[2];
        for row in a.data().chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst_row > ROW_SUM_TOL {
        failures.push("attention row sums");
    }
    if forced(&model, ForwardOptions { bypass_attention: true, ..Default::default() }, &[]).output
        == forced(&model, ForwardOptions::default(), &[]).output
    {
        failures.push("non-zero residual scale has no effect");
    }

    // receptive field of each branch, in isolation
    let t = len / 2;
    let mut local = true;
    for j in 0..model.num_branches() {
        let (left, right) = model.receptive_extent(j);
        let tap = format!("p1_{j}");
        let reference = forced(&model, ForwardOptions::default(), &[tap.as_str()]).taps[&tap].clone();
        for k in (0..len).filter(|&k| k + left < t || k > t + right) {
            let mut xv = x.data().to_vec();
            xv[k] += 5.0;
            let perturbed = Tensor::new(vec![2, len], xv).unwrap();
            let out = model.forward_with(&perturbed, &ForwardOptions::default(), &[tap.as_str()]).unwrap();
            let got = &out.taps[&tap];
            let channels = got.shape()[1];
            for ch in 0..channels {
                let idx = ch * len + t;
                if got.data()[idx] != reference.data()[idx] {
                    local = false;
                }
            }
        }
        // the edge of the field must matter, or the check is vacuous
        let mut xv = x.data().to_vec();
        xv[t + right] += 5.0;
        let edge =
            model.forward_with(&Tensor::new(vec![2, len], xv).unwrap(), &ForwardOptions::default(), &[tap.as_str()]);
        let edge = edge.unwrap().taps[&tap].clone();
        if (0..edge.shape()[1]).all(|ch| edge.data()[ch * len + t] == reference.data()[ch * len + t]) {
            local = false;
        }
    }
    if !local {
        failures.push("receptive field");
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = if failures.is_empty() {
        format!(
            "gating identities, zero residual scale, row sums (worst {worst_row:.1e}), receptive fields; {secs:.1}s"
        )
    } else {
        format!("failed: {}", failures.join(", "))
    };
    Outcome::new(failures.is_empty() && secs < 60.0, detail)
}

// ------------------------------------------------------------ criterion 7

fn criterion_7() -> Outcome {
    let mut ok = true;
    ok &= mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap() == 0.0;
    ok &= mae(&[0.0, 0.0], &[10.0, 30.0]).unwrap() == 20.0;
    ok &= mae(&[5.0, 7.0], &[15.0, 37.0]).unwrap() == 20.0;
    ok &= sae(&[0.0, 0.0], &[1.0, 3.0], 1).unwrap() == 2.0;
    ok &= sae(&[4.0, 1.0, 3.0], &[3.0, 1.0, 4.0], 3).unwrap() == 2.0 / 3.0;
    ok &= sae(&[1.0, 3.0, 2.0, 2.0], &[3.0, 1.0, 2.0, 2.0], 2).unwrap() == 0.0;

    let worked = F1Scores::from_confusion(Confusion { tp: 63, fp: 2, fn_: 14, tn: 100 });
    ok &= worked.precision == 63.0 / 65.0 && worked.recall == 63.0 / 77.0;
    // F1 = 2·63 / (2·63 + 2 + 14) = 63/71
    ok &= (worked.f1 - 63.0 / 71.0).abs() <= f64::EPSILON;

    // the same counts recovered from per-step states
    let mut prob = vec![0.9; 63];
    prob.extend([0.5, 0.7]);
    prob.extend(vec![0.49; 14]);
    prob.extend(vec![0.0; 100]);
    let mut truth = vec![1.0; 63];
    truth.extend([0.0, 0.0]);
    truth.extend(vec![1.0; 14]);
    truth.extend(vec![0.0; 100]);
    let states = f1_from_states(&prob, &truth, 0.5).unwrap();
    ok &= states.confusion == worked.confusion && states.f1 == worked.f1;

    let perfect = f1_from_states(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 0.5).unwrap();
    ok &= perfect.precision == 1.0 && perfect.recall == 1.0 && perfect.f1 == 1.0;
    let all_off = f1_from_states(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0], 0.5).unwrap();
    ok &= all_off.recall == 0.0 && all_off.f1 == 0.0;
    Outcome::new(ok, "MAE, SAE and F1 worked examples; P=63/65, R=63/77 bit-exact")
}

// ------------------------------------------------------------ criterion 9

fn pipeline_run(dir: &Path) -> BTreeMap<&'static str, Vec<u8>> {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let spec = dir.join("spec.toml");
    let text = std::fs::read_to_string(configs.join("tiny_household.toml")).unwrap();
    std::fs::write(&spec, text.replace("length = 20000", "length = 4000")).unwrap();
    let cfg = ExperimentConfig::parse(
        "[model]\ns = 8\nw = 8\nconv_filters = [4, 4, 4, 4, 4, 4]\nkernel_sizes = [3, 3, 3, 3, 3, 3]\n\
         merge_filters = 4\nattention_reduced = 2\nfc_hidden = 8\n\
         [training]\nlearning_rate = 1e-3\nepochs = 2\nlambda_adv = 0.5\nn_critic = 2\nseed = 4\n\
         [data]\nappliance = \"dishwasher\"\ntrain_stride = 32\ntest_stride = 4\nkeep_prob = 0.3\n",
        "determinism config",
    )
    .unwrap();
    let house = dir.join("house");
    commands::simulate_household(&spec, &house, Some(17)).unwrap();
    let data = dir.join("data");
    commands::prepare_dataset(&house.join("manifest.toml"), "dishwasher", &data, cfg.data.keep_prob).unwrap();
    let ckpt = dir.join("model.ckpt");
    let req = TrainRequest {
        kind: ModelKind::Scanet,
        data,
        config: cfg.clone(),
        out: ckpt.clone(),
        adversarial: true,
        augment: Some(AugmentSpec::new(-0.05, 0.05).unwrap()),
        seed: Some(5),
    };
    commands::train_model(&req).unwrap();
    let pred = dir.join("pred.csv");
    commands::disaggregate(&ckpt, &house.join("mains.dat"), &pred, &cfg.inference(NORMALIZATION)).unwrap();
    let report = dir.join("report.txt");
    commands::evaluate_predictions(&pred, &house.join("dishwasher.dat"), &report, Some(50), ON_THRESHOLD).unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    BTreeMap::from([
        ("checkpoint", read(&ckpt)),
        ("history", read(&commands::history_path(&ckpt))),
        ("predictions", read(&pred)),
        ("report", read(&report)),
    ])
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_run(a.path());
    let second = pipeline_run(b.path());
    let differing: Vec<&str> = first.keys().filter(|k| first[*k] != second[*k]).copied().collect();
    let sizes = first.iter().map(|(k, v)| format!("{k} {}B", v.len())).collect::<Vec<_>>().join(", ");
    if differing.is_empty() {
        Outcome::new(true, format!("two seeded runs byte-equal: {sizes}"))
    } else {
        Outcome::new(false, format!("differing outputs: {}", differing.join(", ")))
    }
}

// ------------------------------------------------------- training criteria

/// Trained models shared between criteria, keyed by seed.
#[derive(Default)]
struct Trained {
    scanet: BTreeMap<(&'static str, u64), Model>,
}

fn criterion_3(h: &Households, trained: &mut Trained) -> Outcome {
    let mut scanet_mae: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut sgn_mae: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut slowest = 0.0f64;
    for &seed in &SEEDS {
        for app in APPLIANCES {
            let samples = h.samples(app, seed);
            let start = Instant::now();
            let model = fit(ModelKind::Scanet, Features::ALL, &samples, &training(seed));
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let m = score(&model, &h.test, app).mae;
            say(&format!("    SCANet {app:<10} seed {seed}: MAE {m:.2} ({:.0}s)", start.elapsed().as_secs_f64()));
            scanet_mae.entry(app).or_default().push(m);
            trained.scanet.insert((app, seed), model);

            let start = Instant::now();
            let sgn = fit(ModelKind::Sgn, Features::NONE, &samples, &training(seed));
            let m = score(&sgn, &h.test, app).mae;
            say(&format!("    SGN    {app:<10} seed {seed}: MAE {m:.2} ({:.0}s)", start.elapsed().as_secs_f64()));
            sgn_mae.entry(app).or_default().push(m);
        }
    }
    let mut ok = slowest <= 900.0;
    let mut parts = Vec::new();
    for app in APPLIANCES {
        let off = always_off_mae(&h.test.appliance(app).unwrap().power);
        let m = mean(&scanet_mae[app]);
        ok &= m <= BASELINE_RATIO * off;
        parts.push(format!("{app} {m:.2} vs off {off:.2} (SGN {:.2})", mean(&sgn_mae[app])));
    }
    let all = |m: &BTreeMap<&str, Vec<f64>>| mean(&m.values().flatten().copied().collect::<Vec<_>>());
    let (s, g) = (all(&scanet_mae), all(&sgn_mae));
    ok &= s <= g;
    parts.push(format!("mean SCANet {s:.2} vs SGN {g:.2}, slowest fit {slowest:.0}s"));
    Outcome::new(ok, parts.join("; "))
}

fn criterion_4(h: &Households, trained: &Trained) -> Outcome {
    let app = "dishwasher";
    let rows = [
        ("none", Features { multi_scale: false, self_attention: false, branch_gates: true }),
        ("MS", Features { multi_scale: true, self_attention: false, branch_gates: true }),
        ("SA", Features { multi_scale: false, self_attention: true, branch_gates: true }),
    ];
    let mut means = BTreeMap::new();
    for (name, features) in rows {
        let mut maes = Vec::new();
        for &seed in &SEEDS {
            let model = fit(ModelKind::Scanet, features, &h.samples(app, seed), &training(seed));
            maes.push(score(&model, &h.test, app).mae);
        }
        say(&format!("    {name:<5} MAE {}", fmt(&maes)));
        means.insert(name, mean(&maes));
    }
    let full: Vec<f64> = SEEDS.iter().map(|&s| score(&trained.scanet[&(app, s)], &h.test, app).mae).collect();
    say(&format!("    MS+SA MAE {}", fmt(&full)));
    means.insert("MS+SA", mean(&full));
    let within = |a: f64, b: f64| a <= b * (1.0 + ABLATION_SLACK);
    let ok = within(means["MS"], means["none"])
        && within(means["SA"], means["none"])
        && within(means["MS+SA"], means["MS"].min(means["SA"]));
    let detail = means.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", ");
    Outcome::new(ok, format!("3-seed mean dishwasher MAE: {detail}"))
}

/// Complete-on dishwasher windows of the training household (watts).
fn complete_on_windows(h: &Household) -> (Tensor, Vec<Vec<f64>>) {
    let cfg = ModelConfig::desk();
    let power = &h.appliance("dishwasher").unwrap().power;
    let x = normalize(&h.aggregate, NORMALIZATION).unwrap();
    let y = normalize(power, NORMALIZATION).unwrap();
    let on = derive_on_off(power, ON_THRESHOLD);
    let full: Vec<Sample> =
        make_windows_with_stride(&x, &y, &on, cfg.s, cfg.w, 4).unwrap().into_iter().filter(|s| s.all_on()).collect();
    let xs: Vec<f64> = full.iter().flat_map(|s| s.x.iter().copied()).collect();
    let truth = full.iter().map(|s| s.y.iter().map(|v| v * NORMALIZATION).collect()).collect();
    (Tensor::new(vec![full.len(), cfg.input_len()], xs).unwrap(), truth)
}

/// Modes found by PCA plus fixed-radius grouping.
fn modes(points: &[Vec<f64>]) -> usize {
    let s = points[0].len() as f64;
    let coords = pca_modes(points, 2).unwrap().coords;
    count_clusters(&coords, 150.0 * s.sqrt(), (points.len() / 20).max(3))
}

fn generated(model: &Model, x: &Tensor) -> Vec<Vec<f64>> {
    let out = model.forward_batch(x).unwrap().output;
    (0..x.shape()[0]).map(|i| out.row(i).iter().map(|v| v * NORMALIZATION).collect()).collect()
}

fn criterion_5(h: &Households, trained: &Trained) -> Outcome {
    let (x, truth) = complete_on_windows(&h.train);
    let truth_modes = modes(&truth);
    let mut adv = Vec::new();
    let mut sup = Vec::new();
    for &seed in &SEEDS {
        let tc = TrainingConfig { adversarial: true, lambda_adv: 0.5, ..training(seed) };
        let start = Instant::now();
        let model = fit(ModelKind::Scanet, Features::ALL, &h.samples("dishwasher", seed), &tc);
        let m = score(&model, &h.test, "dishwasher").mae;
        adv.push(modes(&generated(&model, &x)));
        sup.push(modes(&generated(&trained.scanet[&("dishwasher", seed)], &x)));
        say(&format!(
            "    seed {seed}: adversarial {} clusters (test MAE {m:.2}, {:.0}s), supervised {} clusters",
            adv.last().unwrap(),
            start.elapsed().as_secs_f64(),
            sup.last().unwrap()
        ));
    }
    let hits = adv.iter().filter(|&&c| c >= MIN_MODES).count();
    Outcome::new(
        hits >= 2,
        format!(
            "{} complete-on windows, truth {truth_modes} clusters; adversarial {adv:?}, lambda 0 {sup:?}; \
             {hits}/3 seeds with >= {MIN_MODES}",
            truth.len()
        ),
    )
}

fn criterion_6(h: &Households, trained: &Trained) -> Outcome {
    let shifted = shifted_household(&["fridge"]);
    let mut wins = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let plain = score(&trained.scanet[&("fridge", seed)], &shifted, "fridge").mae;
        let tc = TrainingConfig {
            augment: Some(AugmentSpec::new(-FRIDGE_AUGMENT, FRIDGE_AUGMENT).unwrap()),
            ..training(seed)
        };
        let model = fit(ModelKind::Scanet, Features::ALL, &h.samples("fridge", seed), &tc);
        let aug = score(&model, &shifted, "fridge").mae;
        say(&format!("    seed {seed}: unaugmented {plain:.2}, augmented {aug:.2}"));
        wins += usize::from(aug < plain);
        parts.push(format!("{plain:.2}->{aug:.2}"));
    }
    Outcome::new(
        wins >= 2,
        format!("fridge MAE at 150 W, plain->augmented {}; {wins}/3 seeds improved", parts.join(", ")),
    )
}

fn criterion_8(h: &Households) -> Outcome {
    let app = "microwave";
    let shifted = shifted_household(&APPLIANCES);
    let mut wins = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let samples = h.samples(app, seed);
        let plain = fit(ModelKind::ClassifierOnly, Features::ALL, &samples, &training(seed));
        let tc = TrainingConfig {
            augment: Some(AugmentSpec::new(-TRANSFER_AUGMENT, TRANSFER_AUGMENT).unwrap()),
            ..training(seed)
        };
        let aug = fit(ModelKind::ClassifierOnly, Features::ALL, &samples, &tc);
        let (f_plain, f_aug) = (score(&plain, &shifted, app).f1, score(&aug, &shifted, app).f1);
        say(&format!("    seed {seed}: F1 unaugmented {f_plain:.3}, augmented {f_aug:.3}"));
        wins += usize::from(f_aug > f_plain);
        parts.push(format!("{f_plain:.3}->{f_aug:.3}"));
    }
    Outcome::new(
        wins >= 2,
        format!(
            "microwave F1 with all appliances x{SHIFT_FACTOR}, plain->augmented {}; {wins}/3 seeds improved",
            parts.join(", ")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, run: &mut dyn FnMut() -> Outcome| {
        say(&format!("criterion {n} ({name}) running"));
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        say(&format!("criterion {n} {verdict}: {name}: {} [{:.0}s]", o.detail, start.elapsed().as_secs_f64()));
        results.push((n, name, o));
    };
    record(1, "gradient correctness", &mut criterion_1);
    record(2, "architecture invariants", &mut criterion_2);
    record(7, "metrics exactness", &mut criterion_7);
    record(9, "determinism", &mut criterion_9);

    let h = Households::new();
    let mut trained = Trained::default();
    record(3, "synthetic disaggregation", &mut || criterion_3(&h, &mut trained));
    record(4, "ablation monotonicity", &mut || criterion_4(&h, &trained));
    record(5, "mode coverage", &mut || criterion_5(&h, &trained));
    record(6, "on-state augmentation", &mut || criterion_6(&h, &trained));
    record(8, "classification transfer", &mut || criterion_8(&h));

    results.sort_by_key(|r| r.0);
    say("acceptance summary:");
    for (n, name, o) in &results {
        say(&format!("  {n}. {:<4} {name}", if o.pass { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
