//! A small tanh MLP trained by SGD on least-squares regression against a
//! fixed random teacher, with every linear-layer GEMM operand optionally
//! fake-quantized. Training batches are drawn fresh from the teacher at
//! every step; the final loss is measured on a fixed held-out set.
//!
//! Parameters and arithmetic are f64. A quantized operand is rounded to f32,
//! passed through [`fake_quantize`] and widened back. Per linear layer the
//! operands are:
//!
//! | GEMM            | operands                    | channel axis |
//! |-----------------|-----------------------------|--------------|
//! | `Y = X W^T`     | `input.row`, `weight.row`   | rows         |
//! | `dX = dY W`     | `grad.row`, `weight.col`    | rows, cols   |
//! | `dW = dY^T X`   | `grad.col`, `input.col`     | cols         |
//!
//! Layer `i` is labelled as module `i % 4` of decoder layer `i / 4`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::replay::observe;
use super::HarnessError;
use crate::fakequant::fake_quantize;
use crate::gam::ScalingStrategy;
use crate::gemm::{precision_cost, PrecisionCost};
use crate::mor::{Recipe, RecipeName, RepType, DEFAULT_THRESHOLD};
use crate::stats::{
    Direction, FallbackReport, Heatmap, HeatmapOrdering, LinearModule, Pass, Role, StatsState, TensorKey,
    DEFAULT_RESET_PERIOD,
};
use crate::tensor::{Axis, BlockView, PartitionSpec, TensorF32};

fn default_eval_size() -> usize {
    4096
}

fn default_label_noise() -> f64 {
    0.05
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_reset_period() -> u64 {
    DEFAULT_RESET_PERIOD
}

fn yes() -> bool {
    true
}

/// Which operand roles pass through quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSwitches {
    #[serde(default = "yes")]
    pub input: bool,
    #[serde(default = "yes")]
    pub weight: bool,
    #[serde(default = "yes")]
    pub grad: bool,
}

impl Default for RoleSwitches {
    fn default() -> Self {
        Self {
            input: true,
            weight: true,
            grad: true,
        }
    }
}

impl RoleSwitches {
    fn enabled(&self, role: Role) -> bool {
        match role {
            Role::Input => self.input,
            Role::Weight => self.weight,
            Role::Grad => self.grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub recipe: RecipeName,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub strategy: ScalingStrategy,
    #[serde(default)]
    pub roles: RoleSwitches,
    #[serde(default = "default_reset_period")]
    pub reset_period: u64,
}

impl QuantConfig {
    pub fn new(recipe: RecipeName) -> Self {
        Self {
            recipe,
            threshold: DEFAULT_THRESHOLD,
            partition: PartitionSpec::DEFAULT,
            strategy: ScalingStrategy::Gam,
            roles: RoleSwitches::default(),
            reset_period: DEFAULT_RESET_PERIOD,
        }
    }
}

/// `"baseline"` or a quantization table.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Quantization {
    #[default]
    Baseline,
    Mor(QuantConfig),
}

impl Serialize for Quantization {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Quantization::Baseline => s.serialize_str("baseline"),
            Quantization::Mor(c) => c.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Quantization {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Config(QuantConfig),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) if s == "baseline" => Ok(Quantization::Baseline),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "expected \"baseline\" or a quantization table, got \"{s}\""
            ))),
            Raw::Config(c) => Ok(Quantization::Mor(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Size of the held-out set the final loss is measured on.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Standard deviation of the noise added to teacher outputs.
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    #[serde(default)]
    pub quantization: Quantization,
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad("layer_sizes needs at least input and output widths, all nonzero");
        }
        if self.batch_size == 0 || self.eval_size == 0 {
            return bad("batch_size and eval_size must be nonzero");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive and finite");
        }
        if !(self.label_noise.is_finite() && self.label_noise >= 0.0) {
            return bad("label_noise must be nonnegative");
        }
        if let Quantization::Mor(q) = &self.quantization {
            if !(q.threshold.is_finite() && q.threshold >= 0.0) {
                return bad("threshold must be nonnegative");
            }
            if q.reset_period == 0 {
                return bad("reset_period must be at least 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Minibatch loss at every completed step, before its update.
    pub losses: Vec<f64>,
    /// Held-out loss of the trained parameters, evaluated without
    /// quantization.
    pub final_loss: Option<f64>,
    /// Held-out loss through the run's own, possibly quantized, forward pass.
    pub final_loss_quantized_forward: Option<f64>,
    /// Step at which the loss or an operand became non-finite.
    pub diverged_at: Option<u64>,
    pub fallback: Option<FallbackReport>,
    /// Latest window per tensor.
    pub heatmap: Option<Heatmap>,
    /// Every window of every tensor, keyed by tensor label.
    pub snapshots: BTreeMap<String, Heatmap>,
    pub cost: PrecisionCost,
}

#[derive(Debug, Clone, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let d = Normal::new(0.0, sigma).expect("positive sigma");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| d.sample(rng)).collect(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `a * b^T` for `a: m x k`, `b: n x k`.
fn mul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = 0.0;
            for p in 0..a.cols {
                acc += a.at(i, p) * b.at(j, p);
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// `a * b` for `a: m x k`, `b: k x n`.
fn mul_nn(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for p in 0..a.cols {
                acc += a.at(i, p) * b.at(p, j);
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    out
}

/// `a^T * b` for `a: k x m`, `b: k x n`.
fn mul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for p in 0..a.rows {
                acc += a.at(p, i) * b.at(p, j);
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    w: Vec<Mat>,
    b: Vec<Vec<f64>>,
}

impl Mlp {
    fn init(sizes: &[usize], gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = sizes
            .windows(2)
            .map(|p| Mat::random(p[1], p[0], gain / (p[0] as f64).sqrt(), rng))
            .collect();
        let b = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Self { w, b }
    }

    fn n_layers(&self) -> usize {
        self.w.len()
    }

    /// Plain f64 forward pass.
    fn predict(&self, x: &Mat) -> Mat {
        let mut a = x.clone();
        for l in 0..self.n_layers() {
            a = mul_nt(&a, &self.w[l]);
            add_bias(&mut a, &self.b[l]);
            if l + 1 < self.n_layers() {
                a.data.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        a
    }
}

fn add_bias(a: &mut Mat, b: &[f64]) {
    for row in a.data.chunks_mut(a.cols) {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
}

/// `0.5 * mean over samples of the squared error summed over outputs`.
fn mse(pred: &Mat, y: &Mat) -> f64 {
    let s: f64 = pred.data.iter().zip(&y.data).map(|(p, t)| (p - t) * (p - t)).sum();
    0.5 * s / pred.rows as f64
}

struct Grads {
    w: Vec<Mat>,
    b: Vec<Vec<f64>>,
}

/// An operand became non-finite or left f32 range.
struct Diverged;

/// Blocks of an operand in its own layout with their tags.
type Tags = Vec<(BlockView, RepType)>;

fn whole(m: &Mat) -> Tags {
    vec![(
        BlockView {
            id: 0,
            rows: 0..m.rows,
            cols: 0..m.cols,
        },
        RepType::BF16,
    )]
}

fn transposed(tags: &Tags) -> Tags {
    tags.iter()
        .map(|(v, t)| {
            (
                BlockView {
                    id: v.id,
                    rows: v.cols.clone(),
                    cols: v.rows.clone(),
                },
                *t,
            )
        })
        .collect()
}

/// Quantization state threaded through a training run.
struct Quantizer {
    cfg: Option<(QuantConfig, Recipe)>,
    stats: Option<StatsState>,
    cost: PrecisionCost,
    step: u64,
}

impl Quantizer {
    fn off() -> Self {
        Self {
            cfg: None,
            stats: None,
            cost: PrecisionCost::default(),
            step: 0,
        }
    }

    fn new(q: &Quantization) -> Result<Self, HarnessError> {
        match q {
            Quantization::Baseline => Ok(Self::off()),
            Quantization::Mor(c) => {
                let recipe = c.recipe.build(c.threshold);
                recipe.validate()?;
                Ok(Self {
                    cfg: Some((c.clone(), recipe)),
                    stats: Some(StatsState::new(c.reset_period)?),
                    cost: PrecisionCost::default(),
                    step: 0,
                })
            }
        }
    }

    /// Same quantization, no statistics or cost.
    fn for_eval(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            stats: None,
            cost: PrecisionCost::default(),
            step: self.step,
        }
    }

    fn apply(&mut self, m: &Mat, layer: usize, role: Role, axis: Axis) -> Result<(Mat, Tags), Diverged> {
        let Some((cfg, recipe)) = &self.cfg else {
            return Ok((m.clone(), whole(m)));
        };
        if !cfg.roles.enabled(role) {
            return Ok((m.clone(), whole(m)));
        }
        let direction = match axis {
            Axis::Row => Direction::RowPartition,
            Axis::Column => Direction::ColPartition,
        };
        let pass = if role == Role::Grad { Pass::Backward } else { Pass::Forward };
        let key = TensorKey::new(layer / 4, LinearModule::ALL[layer % 4], role, direction, pass);

        let narrow: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        let t = TensorF32::new(m.rows, m.cols, narrow).map_err(|_| Diverged)?;
        let fq = fake_quantize(&t, recipe, &cfg.partition.with_axis(axis), cfg.strategy)
            .expect("recipe validated at construction");
        if let Some(stats) = &mut self.stats {
            observe(stats, key, self.step, &fq.quantized);
        }
        let tags = fq.quantized.blocks.iter().map(|b| (b.view.clone(), b.tag)).collect();
        let data = fq.output.values().iter().map(|&v| v as f64).collect();
        Ok((
            Mat {
                rows: m.rows,
                cols: m.cols,
                data,
            },
            tags,
        ))
    }

    fn charge(&mut self, a: &Tags, b: &Tags) {
        self.cost.add(&precision_cost(a, b));
    }
}

/// Layer inputs followed by the prediction, with quantized GEMM operands.
fn forward(mlp: &Mlp, x: &Mat, q: &mut Quantizer) -> Result<Vec<Mat>, Diverged> {
    let n = mlp.n_layers();
    let mut acts = vec![x.clone()];
    for l in 0..n {
        let (xq, xt) = q.apply(&acts[l], l, Role::Input, Axis::Row)?;
        let (wq, wt) = q.apply(&mlp.w[l], l, Role::Weight, Axis::Row)?;
        q.charge(&xt, &transposed(&wt));
        let mut a = mul_nt(&xq, &wq);
        add_bias(&mut a, &mlp.b[l]);
        if l + 1 < n {
            a.data.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(a);
    }
    Ok(acts)
}

/// Minibatch loss and gradients with quantized GEMM operands.
fn loss_and_grads(mlp: &Mlp, x: &Mat, y: &Mat, q: &mut Quantizer) -> Result<(f64, Grads), Diverged> {
    let n = mlp.n_layers();
    let acts = forward(mlp, x, q)?;
    let pred = &acts[n];
    let loss = mse(pred, y);
    if !loss.is_finite() {
        return Err(Diverged);
    }

    let batch = x.rows as f64;
    let mut g = Mat {
        rows: pred.rows,
        cols: pred.cols,
        data: pred.data.iter().zip(&y.data).map(|(p, t)| (p - t) / batch).collect(),
    };
    let mut gw = vec![Mat::zeros(0, 0); n];
    let mut gb = vec![Vec::new(); n];
    for l in (0..n).rev() {
        if l + 1 < n {
            for (gv, av) in g.data.iter_mut().zip(&acts[l + 1].data) {
                *gv *= 1.0 - av * av;
            }
        }
        let (gc, gct) = q.apply(&g, l, Role::Grad, Axis::Column)?;
        let (xc, xct) = q.apply(&acts[l], l, Role::Input, Axis::Column)?;
        q.charge(&transposed(&gct), &xct);
        gw[l] = mul_tn(&gc, &xc);
        gb[l] = (0..g.cols).map(|j| (0..g.rows).map(|i| g.at(i, j)).sum()).collect();
        if l > 0 {
            let (gr, grt) = q.apply(&g, l, Role::Grad, Axis::Row)?;
            let (wc, wct) = q.apply(&mlp.w[l], l, Role::Weight, Axis::Column)?;
            q.charge(&grt, &wct);
            g = mul_nn(&gr, &wc);
        }
    }
    Ok((loss, Grads { w: gw, b: gb }))
}

struct Teacher {
    net: Mlp,
    noise: Option<Normal<f64>>,
}

impl Teacher {
    /// `n` fresh inputs and their noisy teacher outputs.
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> (Mat, Mat) {
        let x = Mat::random(n, self.net.w[0].cols, 1.0, rng);
        let mut y = self.net.predict(&x);
        if let Some(d) = &self.noise {
            y.data.iter_mut().for_each(|v| *v += d.sample(rng));
        }
        (x, y)
    }
}

struct Task {
    teacher: Teacher,
    eval: (Mat, Mat),
    student: Mlp,
    /// Source of training batches.
    data_rng: ChaCha8Rng,
}

/// Teacher, held-out set, student initialization and batch stream; shared
/// by every run with the same seed and sizes regardless of quantization.
fn build_task(cfg: &ToyModelConfig) -> Task {
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let sizes = &cfg.layer_sizes;
    let student = Mlp::init(sizes, 1.0, &mut stream(1));
    let teacher = Teacher {
        net: Mlp::init(sizes, 1.5, &mut stream(3)),
        noise: (cfg.label_noise > 0.0).then(|| Normal::new(0.0, cfg.label_noise).expect("validated")),
    };
    let eval = teacher.sample(cfg.eval_size, &mut stream(4));
    Task {
        teacher,
        eval,
        student,
        data_rng: stream(2),
    }
}

/// Online regression: every step draws a fresh batch from the teacher.
pub fn train_toy(cfg: &ToyModelConfig) -> Result<TrainReport, HarnessError> {
    cfg.validate()?;
    let Task {
        teacher,
        eval: (x, y),
        student: mut mlp,
        mut data_rng,
    } = build_task(cfg);
    let mut q = Quantizer::new(&cfg.quantization)?;

    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut diverged_at = None;
    for step in 0..cfg.steps {
        let (xb, yb) = teacher.sample(cfg.batch_size, &mut data_rng);
        q.step = step;
        let Ok((loss, grads)) = loss_and_grads(&mlp, &xb, &yb, &mut q) else {
            diverged_at = Some(step);
            break;
        };
        losses.push(loss);
        for l in 0..mlp.n_layers() {
            for (w, g) in mlp.w[l].data.iter_mut().zip(&grads.w[l].data) {
                *w -= cfg.learning_rate * g;
            }
            for (b, g) in mlp.b[l].iter_mut().zip(&grads.b[l]) {
                *b -= cfg.learning_rate * g;
            }
        }
    }

    let (final_loss, final_loss_quantized_forward) = match diverged_at {
        Some(_) => (None, None),
        None => {
            let plain = mse(&mlp.predict(&x), &y);
            let mut eval = q.for_eval();
            let run = forward(&mlp, &x, &mut eval).map(|a| mse(&a[mlp.n_layers()], &y));
            match run {
                Ok(l) if l.is_finite() && plain.is_finite() => (Some(plain), Some(l)),
                _ => {
                    diverged_at = Some(cfg.steps);
                    (None, None)
                }
            }
        }
    };
    let (fallback, heatmap, snapshots) = match &q.stats {
        Some(s) => (
            Some(s.fallback_report()),
            Some(s.export_heatmap(&HeatmapOrdering::ByTensor)),
            s.keys()
                .map(|k| (k.to_string(), s.export_heatmap(&HeatmapOrdering::ByStep(*k))))
                .collect(),
        ),
        None => (None, None, BTreeMap::new()),
    };
    Ok(TrainReport {
        losses,
        final_loss,
        final_loss_quantized_forward,
        diverged_at,
        fallback,
        heatmap,
        snapshots,
        cost: q.cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub parameters: usize,
}

/// Compare analytic gradients on the first training batch against central
/// differences, quantization off. The relative error of each parameter is
/// `|a - n| / max(|a|, |n|, floor)`, with an absolute floor that keeps
/// vanishing gradients from dividing roundoff by zero.
pub fn gradient_check(cfg: &ToyModelConfig, eps: f64, floor: f64) -> Result<GradCheck, HarnessError> {
    cfg.validate()?;
    let Task {
        teacher,
        student,
        mut data_rng,
        ..
    } = build_task(cfg);
    let (xb, yb) = teacher.sample(cfg.batch_size, &mut data_rng);
    let Ok((_, grads)) = loss_and_grads(&student, &xb, &yb, &mut Quantizer::off()) else {
        return Err(HarnessError::InvalidConfig("initial loss is not finite".into()));
    };

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut compare = |analytic: f64, perturb: &mut dyn FnMut(f64) -> f64| {
        let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / denom);
        count += 1;
    };
    for l in 0..student.n_layers() {
        for i in 0..student.w[l].data.len() {
            compare(grads.w[l].data[i], &mut |d| {
                let mut m = student.clone();
                m.w[l].data[i] += d;
                mse(&m.predict(&xb), &yb)
            });
        }
        for i in 0..student.b[l].len() {
            compare(grads.b[l][i], &mut |d| {
                let mut m = student.clone();
                m.b[l][i] += d;
                mse(&m.predict(&xb), &yb)
            });
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        parameters: count,
    })
}
