//! The JSON run configuration shared by the training and evaluation commands.

use std::path::{Path, PathBuf};

use resadapter_core::adapters::AdapterModes;
use resadapter_core::diffusion::{DiffusionSchedule, SamplerConfig, ScheduleConfig};
use resadapter_core::evalbench::EvalSpec;
use resadapter_core::trainer::{Phase, SyntheticDataset, TrainPlan};
use resadapter_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};

/// A validation failure pinned to a dotted key path such as `train.lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn fail<T>(path: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        path: path.into(),
        message: message.into(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub dataset: SyntheticDataset,
    pub train: TrainSection,
    pub adapter: AdapterSection,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Training hyperparameters; the phase comes from the subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub resolutions: Vec<(usize, usize)>,
    pub standard_resolution: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainPlan::default();
        TrainSection {
            resolutions: p.resolutions,
            standard_resolution: p.standard_resolution,
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            adam_beta1: p.adam_beta1,
            adam_beta2: p.adam_beta2,
            seed: p.seed,
        }
    }
}

impl TrainSection {
    pub fn plan(&self, phase: Phase) -> TrainPlan {
        TrainPlan {
            resolutions: self.resolutions.clone(),
            standard_resolution: self.standard_resolution,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            phase,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub rank: usize,
    pub seed: u64,
    pub alpha_r: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            rank: 4,
            seed: 0,
            alpha_r: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub buckets: Vec<(usize, usize)>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Scales swept by the ablation grid.
    pub ablation_alphas: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = EvalSpec::default();
        EvalSection {
            buckets: s.buckets,
            n_batches: s.n_batches,
            batch_size: s.batch_size,
            seed: s.seed,
            ablation_alphas: vec![0.0, 0.5, 1.0],
        }
    }
}

impl EvalSection {
    pub fn spec(&self) -> EvalSpec {
        EvalSpec {
            buckets: self.buckets.clone(),
            n_batches: self.n_batches,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn modes(&self) -> [AdapterModes; 3] {
        [
            AdapterModes {
                conv_lora: true,
                norm_deltas: false,
            },
            AdapterModes {
                conv_lora: false,
                norm_deltas: true,
            },
            AdapterModes::BOTH,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Where training writes its loss trace; defaults to `<out>.trace.tsv`.
    pub trace: Option<PathBuf>,
}

impl PathsSection {
    pub fn trace_for(&self, out: &Path) -> PathBuf {
        self.trace.clone().unwrap_or_else(|| {
            let mut s = out.as_os_str().to_owned();
            s.push(".trace.tsv");
            PathBuf::from(s)
        })
    }
}

/// Parses a run configuration, reporting the key path of the first
/// malformed or unknown entry.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError {
            path: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(path: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        return fail(path, "must be positive");
    }
    Ok(())
}

fn finite(path: &str, v: f64) -> Result<(), ConfigError> {
    if !v.is_finite() {
        return fail(path, format!("must be finite, got {v}"));
    }
    Ok(())
}

fn buckets(path: &str, list: &[(usize, usize)], unet: &UNetConfig) -> Result<(), ConfigError> {
    if list.is_empty() {
        return fail(path, "needs at least one bucket");
    }
    let d = unet.spatial_divisor();
    for (i, &(h, w)) in list.iter().enumerate() {
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return fail(format!("{path}[{i}]"), format!("{h}x{w} is not a positive multiple of {d}"));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let u = &self.unet;
        positive("unet.in_channels", u.in_channels)?;
        positive("unet.base_channels", u.base_channels)?;
        if u.channel_mults.len() < 2 {
            return fail("unet.channel_mults", "needs at least two levels");
        }
        if let Some(i) = u.channel_mults.iter().position(|&m| m == 0) {
            return fail(format!("unet.channel_mults[{i}]"), "must be positive");
        }
        positive("unet.num_res_blocks_per_level", u.num_res_blocks_per_level)?;
        positive("unet.groups", u.groups)?;
        if let Some(i) = u.channel_mults.iter().position(|&m| !(m * u.base_channels).is_multiple_of(u.groups)) {
            return fail(
                "unet.groups",
                format!("{} does not divide level {i} width {}", u.groups, u.channel_mults[i] * u.base_channels),
            );
        }
        if u.time_embed_dim == 0 || !u.time_embed_dim.is_multiple_of(2) {
            return fail("unet.time_embed_dim", "must be positive and even");
        }
        positive("unet.num_classes", u.num_classes)?;
        u.validate().map_err(|e| ConfigError {
            path: "unet".into(),
            message: e.to_string(),
        })?;

        let s = &self.schedule;
        positive("schedule.steps", s.steps)?;
        if !(s.beta_start > 0.0 && s.beta_start < 1.0) {
            return fail("schedule.beta_start", "must lie in (0, 1)");
        }
        if !(s.beta_end > 0.0 && s.beta_end < 1.0) {
            return fail("schedule.beta_end", "must lie in (0, 1)");
        }
        let sched = self.schedule().map_err(|e| ConfigError {
            path: "schedule".into(),
            message: e.to_string(),
        })?;

        let d = &self.dataset;
        positive("dataset.num_classes", d.num_classes)?;
        if d.num_classes > u.num_classes {
            return fail(
                "dataset.num_classes",
                format!("{} exceeds unet.num_classes {}", d.num_classes, u.num_classes),
            );
        }
        if d.channels != u.in_channels {
            return fail(
                "dataset.channels",
                format!("{} differs from unet.in_channels {}", d.channels, u.in_channels),
            );
        }
        if !(0.0..=1.0).contains(&d.p_uncond) {
            return fail("dataset.p_uncond", "must lie in [0, 1]");
        }
        positive("dataset.supersample", d.supersample)?;
        d.validate().map_err(|e| ConfigError {
            path: "dataset".into(),
            message: e.to_string(),
        })?;

        let t = &self.train;
        buckets("train.resolutions", &t.resolutions, u)?;
        positive("train.standard_resolution", t.standard_resolution)?;
        if !t.standard_resolution.is_multiple_of(u.spatial_divisor()) {
            return fail(
                "train.standard_resolution",
                format!("must be a multiple of {}", u.spatial_divisor()),
            );
        }
        positive("train.steps", t.steps)?;
        positive("train.batch_size", t.batch_size)?;
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return fail("train.lr", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&t.adam_beta1) {
            return fail("train.adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.adam_beta2) {
            return fail("train.adam_beta2", "must lie in [0, 1)");
        }
        t.plan(Phase::Adapter).probs().map_err(|e| ConfigError {
            path: "train.resolutions".into(),
            message: e.to_string(),
        })?;

        positive("adapter.rank", self.adapter.rank)?;
        finite("adapter.alpha_r", self.adapter.alpha_r)?;

        let p = &self.sampler;
        if p.steps == 0 || p.steps > s.steps {
            return fail("sampler.steps", format!("must lie in 1..={}", s.steps));
        }
        finite("sampler.guidance_scale", p.guidance_scale)?;
        if !(0.0..=1.0).contains(&p.eta) {
            return fail("sampler.eta", "must lie in [0, 1]");
        }
        p.validate(&sched).map_err(|e| ConfigError {
            path: "sampler".into(),
            message: e.to_string(),
        })?;

        let e = &self.eval;
        buckets("eval.buckets", &e.buckets, u)?;
        positive("eval.n_batches", e.n_batches)?;
        positive("eval.batch_size", e.batch_size)?;
        if e.ablation_alphas.is_empty() {
            return fail("eval.ablation_alphas", "needs at least one value");
        }
        for (i, &a) in e.ablation_alphas.iter().enumerate() {
            finite(&format!("eval.ablation_alphas[{i}]"), a)?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> resadapter_core::Result<DiffusionSchedule> {
        self.schedule.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sampler.guidance_scale, 7.5);
        assert_eq!(cfg.sampler.steps, 25);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!((cfg.train.adam_beta1, cfg.train.adam_beta2), (0.95, 0.99));
    }

    #[test]
    fn errors_name_key_paths() {
        let cases = [
            (r#"{"train": {"lr": -1}}"#, "train.lr"),
            (r#"{"train": {"lrr": 1}}"#, "train.lrr"),
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"unet": {"groups": 3}}"#, "unet.groups"),
            (r#"{"train": {"resolutions": [[8, 8], [9, 8]]}}"#, "train.resolutions[1]"),
            (r#"{"eval": {"n_batches": "x"}}"#, "eval.n_batches"),
            (r#"{"sampler": {"steps": 80}}"#, "sampler.steps"),
            (r#"{"dataset": {"channels": 3}}"#, "dataset.channels"),
            (r#"{"train": {"resolutions": [[16, 16]]}}"#, "train.resolutions"),
        ];
        for (text, path) in cases {
            let err = parse(text).unwrap_err();
            assert_eq!(err.path, path, "{text}: {err}");
        }
        assert!(parse(r#"{"train": {"lrr": 1}}"#).unwrap_err().message.contains("lrr"));
    }

    #[test]
    fn trace_path_defaults_next_to_output() {
        let p = PathsSection::default();
        assert_eq!(p.trace_for(Path::new("/tmp/m.rsbm")), PathBuf::from("/tmp/m.rsbm.trace.tsv"));
    }
}
