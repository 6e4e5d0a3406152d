//! Evaluation helpers: held-out loss per resolution bucket, the tiled
//! overlap baseline and its latency comparison, ablation grids and the
//! output-perturbation style proxy.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterModes, ResAdapterBundle};
use crate::diffusion::{cfg_predict, ddim_loop, forward_marginal_batch, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::trainer::SyntheticDataset;
use crate::unet::{Denoiser, UNetModel};

pub const HELDOUT_LOSS: &str = "heldout_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub bucket: (usize, usize),
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub seed: u64,
    /// Hex fingerprint of the evaluated base model.
    pub model_fingerprint: String,
    pub wall_clock_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub meta: EvalMeta,
}

impl EvalReport {
    fn push(&mut self, row: EvalRow) -> Result<()> {
        if self
            .rows
            .iter()
            .any(|r| r.bucket == row.bucket && r.variant == row.variant && r.metric == row.metric)
        {
            return Err(Error::Config(format!(
                "duplicate report row {}x{} {} {}",
                row.bucket.0, row.bucket.1, row.variant, row.metric
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn value(&self, bucket: (usize, usize), variant: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.bucket == bucket && r.variant == variant && r.metric == metric)
            .map(|r| r.value)
    }

    /// Distinct variants in first-seen order.
    pub fn variants(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.variant.as_str()))
            .map(|r| r.variant.as_str())
            .collect()
    }

    /// One JSON object per row, then one for the metadata.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.meta).expect("meta serializes"));
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.variants().iter().map(|v| v.len()).max().unwrap_or(7).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<9}  {:<width$}  {:<14}  {:>12}", "bucket", "variant", "metric", "value");
        for r in &self.rows {
            let bucket = format!("{}x{}", r.bucket.0, r.bucket.1);
            let _ = writeln!(out, "{bucket:<9}  {:<width$}  {:<14}  {:>12.6}", r.variant, r.metric, r.value);
        }
        out
    }
}

/// Held-out evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub buckets: Vec<(usize, usize)>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            buckets: vec![(8, 8), (16, 16), (24, 24), (32, 32)],
            n_batches: 8,
            batch_size: 8,
            seed: 1000,
        }
    }
}

/// One held-out noisy batch.
pub struct EvalDraw {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub t: Vec<usize>,
    pub labels: Vec<usize>,
    pub eps: Tensor,
}

/// Mean squared noise-prediction error over the held-out draws for one
/// bucket. The draws depend only on `(spec.seed, bucket, batch index)`, so
/// every predictor sees identical data.
pub fn heldout_loss_with(
    sched: &DiffusionSchedule,
    dataset: &SyntheticDataset,
    bucket: (usize, usize),
    spec: &EvalSpec,
    mut predict: impl FnMut(&EvalDraw) -> Result<Tensor>,
) -> Result<f64> {
    if spec.n_batches == 0 || spec.batch_size == 0 {
        return Err(Error::Config("evaluation needs at least one batch".into()));
    }
    let clean = SyntheticDataset {
        p_uncond: 0.0,
        ..dataset.clone()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..spec.n_batches {
        let stream = spec.seed ^ ((bucket.0 as u64) << 40) ^ ((bucket.1 as u64) << 20) ^ i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let (x0, labels) = clean.make_batch(bucket, spec.batch_size, None, &mut rng)?;
        let t: Vec<usize> = (0..spec.batch_size).map(|_| rng.random_range(1..=sched.len())).collect();
        let eps = Tensor::from_fn(x0.shape().to_vec(), |_| rng.sample(StandardNormal));
        let x_t = forward_marginal_batch(&x0, &t, &eps, sched)?;
        let draw = EvalDraw {
            x0,
            x_t,
            t,
            labels,
            eps,
        };
        let pred = predict(&draw)?;
        pred.check_finite("noise prediction")?;
        let se: f64 = pred.zip_map(&draw.eps, |p, e| (p - e) * (p - e))?.data().iter().sum();
        total += se;
        count += pred.numel();
    }
    Ok(total / count as f64)
}

/// Held-out loss of a denoiser at each bucket.
pub fn heldout_losses(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    dataset: &SyntheticDataset,
    spec: &EvalSpec,
) -> Result<Vec<f64>> {
    spec.buckets
        .iter()
        .map(|&b| heldout_loss_with(sched, dataset, b, spec, |d| model.predict_eps(&d.x_t, &d.t, &d.labels)))
        .collect()
}

/// Evaluates named denoisers over the spec's buckets.
pub fn eval_variants(
    base: &UNetModel,
    variants: &[(&str, &dyn Denoiser)],
    sched: &DiffusionSchedule,
    dataset: &SyntheticDataset,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    if spec.buckets.is_empty() {
        return Err(Error::Config("evaluation needs at least one bucket".into()));
    }
    let start = Instant::now();
    let mut report = EvalReport::default();
    for (name, den) in variants {
        let losses = heldout_losses(*den, sched, dataset, spec)?;
        for (&bucket, value) in spec.buckets.iter().zip(losses) {
            report.push(EvalRow {
                bucket,
                variant: name.to_string(),
                metric: HELDOUT_LOSS.into(),
                value,
            })?;
        }
    }
    report.meta = EvalMeta {
        seed: spec.seed,
        model_fingerprint: format!("{:016x}", base.fingerprint()),
        wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(report)
}

/// Held-out loss per bucket for the base model and, when given, the
/// adapted model.
pub fn multires_eval(
    model: &UNetModel,
    bundle: Option<&ResAdapterBundle>,
    sched: &DiffusionSchedule,
    dataset: &SyntheticDataset,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    match bundle {
        None => eval_variants(model, &[("base", model)], sched, dataset, spec),
        Some(b) => {
            let adapted = b.apply(model)?;
            eval_variants(model, &[("base", model), ("base+resadapter", &adapted)], sched, dataset, spec)
        }
    }
}

/// Label for one ablation cell, e.g. `conv_lora+norm_delta@0.5`.
pub fn ablation_label(modes: AdapterModes, alpha: f64) -> String {
    let mut parts = Vec::new();
    if modes.conv_lora {
        parts.push("conv_lora");
    }
    if modes.norm_deltas {
        parts.push("norm_delta");
    }
    let name = if parts.is_empty() { "none".to_string() } else { parts.join("+") };
    format!("{name}@{alpha}")
}

/// The base row plus one row per (adapter subset, alpha) cell.
pub fn ablation_grid(
    model: &UNetModel,
    bundle: &ResAdapterBundle,
    modes: &[AdapterModes],
    alphas: &[f64],
    sched: &DiffusionSchedule,
    dataset: &SyntheticDataset,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    if modes.is_empty() || alphas.is_empty() {
        return Err(Error::Config("ablation grid needs modes and alphas".into()));
    }
    let mut cells = Vec::new();
    for &m in modes {
        for &a in alphas {
            cells.push((ablation_label(m, a), bundle.restricted(m).with_alpha(a)?));
        }
    }
    let views = cells
        .iter()
        .map(|(_, b)| b.apply(model))
        .collect::<Result<Vec<_>>>()?;
    let mut variants: Vec<(&str, &dyn Denoiser)> = vec![("base", model)];
    for ((label, _), v) in cells.iter().zip(&views) {
        variants.push((label.as_str(), v));
    }
    eval_variants(model, &variants, sched, dataset, spec)
}

/// Start offsets of tiles of length `tile` covering `total` with the given
/// stride; the last tile is shifted back to end exactly at `total`.
pub fn tile_starts(total: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + tile >= total {
            starts.push(total - tile);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

fn tile_grid(target: (usize, usize), tile: (usize, usize), overlap: usize) -> Result<Vec<(usize, usize)>> {
    let (th, tw) = tile;
    if th > target.0 || tw > target.1 {
        return Err(Error::Config(format!(
            "tile {th}x{tw} is larger than target {}x{}",
            target.0, target.1
        )));
    }
    if th == 0 || tw == 0 || overlap >= th.min(tw) {
        return Err(Error::Config(format!("overlap {overlap} must be smaller than tile {th}x{tw}")));
    }
    let rows = tile_starts(target.0, th, th - overlap);
    let cols = tile_starts(target.1, tw, tw - overlap);
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Per-pixel number of tiles covering the target.
fn coverage(target: (usize, usize), tile: (usize, usize), grid: &[(usize, usize)]) -> Vec<f64> {
    let mut count = vec![0.0; target.0 * target.1];
    for &(r, c) in grid {
        for y in r..r + tile.0 {
            for x in c..c + tile.1 {
                count[y * target.1 + x] += 1.0;
            }
        }
    }
    count
}

/// Total blend weight each pixel receives: every covering tile contributes
/// `1 / count`, summed over the tiles that cover it.
pub fn blend_weights(target: (usize, usize), tile: (usize, usize), overlap: usize) -> Result<Tensor> {
    let grid = tile_grid(target, tile, overlap)?;
    let count = coverage(target, tile, &grid);
    let mut total = vec![0.0; count.len()];
    for &(r, c) in &grid {
        for y in r..r + tile.0 {
            for x in c..c + tile.1 {
                let i = y * target.1 + x;
                total[i] += 1.0 / count[i];
            }
        }
    }
    Tensor::new([target.0, target.1], total)
}

/// Number of tiles `tiled_generate` evaluates per denoising step.
pub fn tile_count(target: (usize, usize), tile: (usize, usize), overlap: usize) -> Result<usize> {
    Ok(tile_grid(target, tile, overlap)?.len())
}

/// Overlapping-tile generation: at every DDIM step the guided noise
/// prediction is computed per tile and averaged uniformly where tiles
/// overlap, driving one trajectory at the target resolution.
pub fn tiled_generate(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    target: (usize, usize),
    tile: (usize, usize),
    overlap: usize,
    cfg: &SamplerConfig,
    c: usize,
) -> Result<Tensor> {
    let d = model.spatial_divisor();
    if !tile.0.is_multiple_of(d) || !tile.1.is_multiple_of(d) {
        return Err(Error::Resolution {
            height: tile.0,
            width: tile.1,
            divisor: d,
        });
    }
    let grid = tile_grid(target, tile, overlap)?;
    let count = coverage(target, tile, &grid);
    let channels = model.in_channels();
    let (h, w) = target;
    ddim_loop([1, channels, h, w], cfg, sched, |x, t| {
        let mut acc = vec![0.0; channels * h * w];
        for &(r, c0) in &grid {
            let crop = x.crop_nchw(r, c0, tile.0, tile.1)?;
            let eps = cfg_predict(model, &crop, t, c, cfg.guidance_scale)?;
            let e = eps.data();
            for ch in 0..channels {
                for y in 0..tile.0 {
                    for xx in 0..tile.1 {
                        acc[(ch * h + r + y) * w + c0 + xx] += e[(ch * tile.0 + y) * tile.1 + xx];
                    }
                }
            }
        }
        for ch in 0..channels {
            for (i, n) in count.iter().enumerate() {
                acc[ch * h * w + i] /= n;
            }
        }
        Tensor::new([1, channels, h, w], acc)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub direct_ms: f64,
    pub tiled_ms: f64,
    /// `tiled_ms / direct_ms`.
    pub ratio: f64,
    pub repeats: usize,
    pub tiles_per_step: usize,
    pub direct_runs_ms: Vec<f64>,
    pub tiled_runs_ms: Vec<f64>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock of direct generation at `target` versus tiled
/// generation from `tile`-sized passes.
#[allow(clippy::too_many_arguments)]
pub fn bench_latency(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    target: (usize, usize),
    tile: (usize, usize),
    overlap: usize,
    cfg: &SamplerConfig,
    c: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    let repeats = repeats.max(1);
    let channels = model.in_channels();
    let mut direct = Vec::with_capacity(repeats);
    let mut tiled = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        crate::diffusion::ddim_sample(model, [1, channels, target.0, target.1], cfg, c, sched)?;
        direct.push(t0.elapsed().as_secs_f64() * 1e3);
        let t0 = Instant::now();
        tiled_generate(model, sched, target, tile, overlap, cfg, c)?;
        tiled.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let (direct_ms, tiled_ms) = (median(&direct), median(&tiled));
    Ok(LatencyReport {
        direct_ms,
        tiled_ms,
        ratio: tiled_ms / direct_ms,
        repeats,
        tiles_per_step: tile_count(target, tile, overlap)?,
        direct_runs_ms: direct,
        tiled_runs_ms: tiled,
    })
}

/// Noisy probe inputs at `s x s`.
pub struct Probe {
    pub x: Tensor,
    pub t: Vec<usize>,
    pub c: Vec<usize>,
}

pub fn make_probes(
    dataset: &SyntheticDataset,
    sched: &DiffusionSchedule,
    s: usize,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Probe>> {
    let spec = EvalSpec {
        buckets: vec![(s, s)],
        n_batches: n,
        batch_size,
        seed,
    };
    let mut probes = Vec::new();
    heldout_loss_with(sched, dataset, (s, s), &spec, |d| {
        probes.push(Probe {
            x: d.x_t.clone(),
            t: d.t.clone(),
            c: d.labels.clone(),
        });
        Ok(d.eps.clone())
    })?;
    Ok(probes)
}

/// Mean relative L2 distance `|adapted - base| / |base|` over the probes.
pub fn style_shift(base: &dyn Denoiser, adapted: &dyn Denoiser, probes: &[Probe]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Config("style shift needs probes".into()));
    }
    let mut total = 0.0;
    for p in probes {
        let a = base.predict_eps(&p.x, &p.t, &p.c)?;
        let b = adapted.predict_eps(&p.x, &p.t, &p.c)?;
        let diff = a.zip_map(&b, |u, v| u - v)?.l2_norm();
        total += diff / a.l2_norm().max(f64::MIN_POSITIVE);
    }
    Ok(total / probes.len() as f64)
}

#[cfg(test)]
mod tests;
