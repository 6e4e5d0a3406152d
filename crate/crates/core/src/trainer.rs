//! Mixed-resolution training: the resolution distribution, synthetic
//! scale-consistent datasets, AdamW, and the base/adapter training loops.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{is_norm_delta, Adapted, ResAdapterBundle, StyleLoRABundle};
use crate::diffusion::{simple_loss, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::unet::{check_resolution, forward, ModelBinder, UNetModel};

/// Bucket sides used by the 512-native latent model (the native side is
/// deliberately absent; it would get probability zero).
pub const SD_BUCKET_SIDES: [usize; 5] = [128, 256, 384, 768, 1024];
pub const SD_STANDARD_SIDE: usize = 512;
/// Bucket sides for the 1024-native model; kept for reference only.
pub const SDXL_BUCKET_SIDES: [usize; 6] = [256, 512, 768, 1280, 1408, 1536];
pub const SDXL_STANDARD_SIDE: usize = 1024;

/// `p_i = |x_i - s|^2 / sum_j |x_j - s|^2`.
pub fn resolution_probs(xs: &[usize], s: usize) -> Result<Vec<f64>> {
    let d2: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let d = x.abs_diff(s) as f64;
            d * d
        })
        .collect();
    let total: f64 = d2.iter().sum();
    if xs.is_empty() || total == 0.0 {
        return Err(Error::DegenerateDistribution(xs.len()));
    }
    Ok(d2.into_iter().map(|d| d / total).collect())
}

/// Inverse-CDF draw: the smallest `i` whose cumulative probability exceeds `u`.
pub fn sample_resolution(probs: &[f64], u: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Config(format!("uniform draw must lie in [0, 1), got {u}")));
    }
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Config("resolution probabilities must be non-negative".into()));
    }
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if cum > u {
            return Ok(i);
        }
    }
    // rounding left the total just below u: fall back to the last bucket with mass
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Checkers,
    Discs,
    Gradients,
}

/// Procedural images defined in continuous scene coordinates, so the same
/// scene can be rendered at any size.
///
/// The scene occupies the unit square scaled to the longer image side; a
/// non-square canvas shows the top-left part of it. Pixels are box-filtered
/// with `supersample`² samples, which makes a 2x render followed by 2x2
/// average pooling match the 1x render up to edge pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataset {
    pub generator: Generator,
    pub num_classes: usize,
    pub channels: usize,
    /// Fraction of labels replaced by the null class.
    pub p_uncond: f64,
    pub supersample: usize,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        SyntheticDataset {
            generator: Generator::Checkers,
            num_classes: 3,
            channels: 1,
            p_uncond: 0.1,
            supersample: 4,
        }
    }
}

/// One randomly drawn scene.
#[derive(Clone, Debug)]
pub struct Scene {
    generator: Generator,
    class: usize,
    contrast: f64,
    offset: (f64, f64),
    discs: Vec<(f64, f64, f64)>,
}

impl Scene {
    fn value(&self, u: f64, v: f64) -> f64 {
        use std::f64::consts::PI;
        let (ou, ov) = self.offset;
        let raw = match self.generator {
            Generator::Checkers => {
                let cells = [4.0, 3.0, 2.0][self.class % 3];
                let a = ((u + ou) * cells).floor() as i64;
                let b = ((v + ov) * cells).floor() as i64;
                if (a + b).rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Generator::Discs => {
                let inside = self
                    .discs
                    .iter()
                    .any(|&(cu, cv, r)| (u - cu).powi(2) + (v - cv).powi(2) <= r * r);
                if inside {
                    1.0
                } else {
                    -1.0
                }
            }
            Generator::Gradients => {
                let theta = [0.0, 0.25 * PI, 0.5 * PI][self.class % 3];
                (2.0 * PI * (1.5 * (u * theta.cos() + v * theta.sin()) + ou)).cos()
            }
        };
        self.contrast * raw
    }

    /// Renders the scene at `h x w` into `[channels, h, w]` values in [-1, 1].
    pub fn render(&self, h: usize, w: usize, channels: usize, supersample: usize) -> Vec<f64> {
        let side = h.max(w) as f64;
        let ss = supersample.max(1);
        let inv = 1.0 / (ss * ss) as f64;
        let mut plane = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let v = (y as f64 + (sy as f64 + 0.5) / ss as f64) / side;
                        let u = (x as f64 + (sx as f64 + 0.5) / ss as f64) / side;
                        acc += self.value(u, v);
                    }
                }
                plane.push((acc * inv).clamp(-1.0, 1.0));
            }
        }
        let mut out = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            out.extend_from_slice(&plane);
        }
        out
    }
}

impl SyntheticDataset {
    pub fn new(generator: Generator, num_classes: usize) -> Self {
        SyntheticDataset {
            generator,
            num_classes,
            ..SyntheticDataset::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.channels == 0 || self.supersample == 0 {
            return Err(Error::Config("dataset needs classes, channels and supersampling".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        Ok(())
    }

    pub fn draw_scene<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Scene {
        let contrast = rng.random_range(0.6..=1.0);
        let offset = (rng.random::<f64>(), rng.random::<f64>());
        let discs = if self.generator == Generator::Discs {
            (0..=class % 3)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.12..0.25),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Scene {
            generator: self.generator,
            class,
            contrast,
            offset,
            discs,
        }
    }

    /// Batch of fresh scenes rendered at `bucket`, with labels. Each label is
    /// replaced by `null_class` (when given) with probability `p_uncond`.
    pub fn make_batch<R: Rng + ?Sized>(
        &self,
        bucket: (usize, usize),
        batch_size: usize,
        null_class: Option<usize>,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        let (h, w) = bucket;
        if h == 0 || w == 0 || batch_size == 0 {
            return Err(Error::Config(format!("illegal bucket {h}x{w} or batch size {batch_size}")));
        }
        let mut data = Vec::with_capacity(batch_size * self.channels * h * w);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let class = rng.random_range(0..self.num_classes);
            let scene = self.draw_scene(class, rng);
            data.extend(scene.render(h, w, self.channels, self.supersample));
            let drop = rng.random::<f64>() < self.p_uncond;
            labels.push(match (drop, null_class) {
                (true, Some(n)) => n,
                _ => class,
            });
        }
        Ok((Tensor::new([batch_size, self.channels, h, w], data)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Adapter,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Adapter => "adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    /// `(H, W)` buckets.
    pub resolutions: Vec<(usize, usize)>,
    pub standard_resolution: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub phase: Phase,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            resolutions: vec![(8, 8), (24, 24), (32, 32)],
            standard_resolution: 16,
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            adam_beta1: 0.95,
            adam_beta2: 0.99,
            phase: Phase::Base,
            seed: 0,
        }
    }
}

impl TrainPlan {
    /// Bucket probabilities keyed by each bucket's longer side.
    pub fn probs(&self) -> Result<Vec<f64>> {
        let xs: Vec<usize> = self.resolutions.iter().map(|&(h, w)| h.max(w)).collect();
        resolution_probs(&xs, self.standard_resolution)
    }

    pub fn is_extrapolation(&self, bucket: (usize, usize)) -> bool {
        bucket.0.max(bucket.1) > self.standard_resolution
    }

    fn validate(&self, model: &UNetModel, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Config(format!(
                "plan phase is {}, expected {}",
                self.phase.as_str(),
                phase.as_str()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("lr must be >= 0 and Adam betas in [0, 1)".into()));
        }
        let s = self.standard_resolution;
        check_resolution(model.config(), s, s)?;
        if phase == Phase::Adapter {
            for &(h, w) in &self.resolutions {
                check_resolution(model.config(), h, w)?;
            }
            self.probs()?;
        }
        Ok(())
    }
}

/// AdamW with bias correction and per-parameter step counts, so parameters
/// that skip a step keep their moments untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            state: BTreeMap::new(),
        }
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> usize {
        self.state.get(name).map_or(0, |s| s.steps as usize)
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) {
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            steps: 0,
        });
        st.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(st.steps);
        let bc2 = 1.0 - self.beta2.powi(st.steps);
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + self.weight_decay * *p;
            *p -= self.lr * step;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub bucket: (usize, usize),
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub notes: Vec<String>,
    /// Steps on which the norm deltas were updated.
    pub norm_updates: usize,
}

impl TrainTrace {
    /// Tab-separated `step, HxW, phase, loss` lines; notes are prefixed by `#`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}x{}\t{}\t{}",
                r.step,
                r.bucket.0,
                r.bucket.1,
                r.phase.as_str(),
                sig_digits(r.loss, 9)
            );
        }
        out
    }

    /// Mean loss per bucket.
    pub fn mean_by_bucket(&self) -> BTreeMap<(usize, usize), f64> {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = acc.entry(r.bucket).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let rs = &self.records[range];
        rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64
    }
}

/// Plain decimal rendering with `digits` significant digits.
pub fn sig_digits(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// One noisy batch: images, labels, timesteps and noise.
struct Draw {
    x0: Tensor,
    labels: Vec<usize>,
    t: Vec<usize>,
    eps: Tensor,
}

fn draw(
    dataset: &SyntheticDataset,
    bucket: (usize, usize),
    batch: usize,
    null: Option<usize>,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Draw> {
    let (x0, labels) = dataset.make_batch(bucket, batch, null, rng)?;
    let t = (0..batch).map(|_| rng.random_range(1..=sched.len())).collect();
    let eps = Tensor::from_fn(x0.shape().to_vec(), |_| rng.sample(StandardNormal));
    Ok(Draw { x0, labels, t, eps })
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Single-resolution training of every unfrozen parameter at `s x s`.
pub fn train_base(
    model: &mut UNetModel,
    plan: &TrainPlan,
    dataset: &SyntheticDataset,
    sched: &DiffusionSchedule,
) -> Result<TrainTrace> {
    plan.validate(model, Phase::Base)?;
    let s = plan.standard_resolution;
    let null = model.config().null_class();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = AdamW::new(plan.lr, plan.adam_beta1, plan.adam_beta2);
    let mut trace = TrainTrace::default();
    for step in 1..=plan.steps {
        let d = draw(dataset, (s, s), plan.batch_size, null, sched, &mut rng)?;
        let mut tape = Tape::new();
        let mut bound = BTreeMap::new();
        let loss = simple_loss(&mut tape, sched, &d.x0, &d.t, &d.eps, |tp, xt| {
            let mut b = ModelBinder::new(model, true);
            let y = forward(tp, model.config(), &mut b, xt, &d.t, &d.labels)?;
            bound = b.bound().clone();
            Ok(y)
        })?;
        let value = tape.value(loss).item();
        check_loss(step, value)?;
        tape.backward(loss)?;
        for (site, v) in &bound {
            if model.is_frozen(site) {
                continue;
            }
            if let Some(g) = tape.grad(*v) {
                opt.update(site, model.param_mut(site).expect("bound site"), g);
            }
        }
        trace.records.push(TraceRecord {
            step,
            bucket: (s, s),
            phase: Phase::Base,
            loss: value,
        });
    }
    Ok(trace)
}

/// Adapter tensors that can be viewed over a frozen model and updated by name.
trait Trainable {
    fn view<'a>(&'a self, model: &'a UNetModel) -> Result<Adapted<'a>>;
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor>;
    fn has_norm_deltas(&self) -> bool;
}

impl Trainable for ResAdapterBundle {
    fn view<'a>(&'a self, model: &'a UNetModel) -> Result<Adapted<'a>> {
        self.apply(model)
    }
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        ResAdapterBundle::tensor_mut(self, name)
    }
    fn has_norm_deltas(&self) -> bool {
        !self.norm_deltas.is_empty()
    }
}

impl Trainable for StyleLoRABundle {
    fn view<'a>(&'a self, model: &'a UNetModel) -> Result<Adapted<'a>> {
        self.apply(model)
    }
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        StyleLoRABundle::tensor_mut(self, name)
    }
    fn has_norm_deltas(&self) -> bool {
        false
    }
}

/// Trains the adapter over the plan's buckets with the base frozen.
///
/// Low-rank pairs update on every step; norm deltas only on batches whose
/// longer side exceeds the standard resolution.
pub fn train_adapter(
    model: &UNetModel,
    bundle: &mut ResAdapterBundle,
    plan: &TrainPlan,
    dataset: &SyntheticDataset,
    sched: &DiffusionSchedule,
) -> Result<TrainTrace> {
    train_adapter_generic(model, bundle, plan, dataset, sched)
}

/// Trains attention pairs with the same loop (no gating applies).
pub fn train_style_lora(
    model: &UNetModel,
    bundle: &mut StyleLoRABundle,
    plan: &TrainPlan,
    dataset: &SyntheticDataset,
    sched: &DiffusionSchedule,
) -> Result<TrainTrace> {
    train_adapter_generic(model, bundle, plan, dataset, sched)
}

fn train_adapter_generic<B: Trainable>(
    model: &UNetModel,
    bundle: &mut B,
    plan: &TrainPlan,
    dataset: &SyntheticDataset,
    sched: &DiffusionSchedule,
) -> Result<TrainTrace> {
    plan.validate(model, Phase::Adapter)?;
    bundle.view(model)?;
    let probs = plan.probs()?;
    let null = model.config().null_class();
    let mut trace = TrainTrace::default();
    if bundle.has_norm_deltas() && !plan.resolutions.iter().any(|&b| plan.is_extrapolation(b)) {
        trace
            .notes
            .push("warning: no extrapolation bucket in plan; norm deltas will stay zero".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = AdamW::new(plan.lr, plan.adam_beta1, plan.adam_beta2);
    for step in 1..=plan.steps {
        let bucket = plan.resolutions[sample_resolution(&probs, rng.random::<f64>())?];
        let d = draw(dataset, bucket, plan.batch_size, null, sched, &mut rng)?;
        let mut tape = Tape::new();
        let mut leaves: BTreeMap<String, Var> = BTreeMap::new();
        let value;
        {
            let view = bundle.view(model)?;
            let loss = simple_loss(&mut tape, sched, &d.x0, &d.t, &d.eps, |tp, xt| {
                let (y, l) = view.forward_on(tp, xt, &d.t, &d.labels, true)?;
                leaves = l;
                Ok(y)
            })?;
            value = tape.value(loss).item();
            check_loss(step, value)?;
            tape.backward(loss)?;
        }
        let extrapolating = plan.is_extrapolation(bucket);
        let mut touched_norm = false;
        for (name, v) in &leaves {
            if is_norm_delta(name) {
                if !extrapolating {
                    continue;
                }
                touched_norm = true;
            }
            if let Some(g) = tape.grad(*v) {
                opt.update(name, bundle.tensor_mut(name).expect("leaf of bundle"), g);
            }
        }
        if touched_norm {
            trace.norm_updates += 1;
        }
        trace.records.push(TraceRecord {
            step,
            bucket,
            phase: Phase::Adapter,
            loss: value,
        });
    }
    Ok(trace)
}
