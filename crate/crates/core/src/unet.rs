//! Miniature UNet noise predictor with a stable parameter naming scheme.
//!
//! Every parameter lives under a dotted site path:
//!
//! ```text
//! time.mlp{0|1}.{weight|bias}
//! embed.class.weight
//! {down.L|mid|up.L}.res.B.{norm1|norm2}.{gamma|beta}
//! {down.L|mid|up.L}.res.B.{conv1|conv2}.{weight|bias}
//! {down.L|mid|up.L}.res.B.temb.{weight|bias}
//! {down.L|mid|up.L}.res.B.skip.weight        (channel change only)
//! down.L.sampler.conv.{weight|bias}           (3x3, stride 2)
//! up.L.sampler.conv.{weight|bias}             (nearest 2x, then 3x3)
//! mid.attn.{q|k|v|o}.weight
//! out.norm.{gamma|beta}, out.conv.{weight|bias}
//! ```
//!
//! Up levels are numbered from the bottleneck outwards, so `up.0` is the
//! deepest. Adapters and the checkpoint format address parameters by these
//! paths.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{nchw_dims, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub groups: usize,
    pub attn_at_bottleneck: bool,
    pub time_embed_dim: usize,
    /// Number of real classes; `0` means unconditional.
    pub num_classes: usize,
    /// Reserve one extra embedding row (id `num_classes`) as the null token
    /// for classifier-free guidance.
    pub null_class_reserved: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 8,
            channel_mults: vec![1, 2],
            num_res_blocks_per_level: 1,
            groups: 4,
            attn_at_bottleneck: true,
            time_embed_dim: 32,
            num_classes: 3,
            null_class_reserved: true,
        }
    }
}

impl UNetConfig {
    /// Height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.channel_mults.len().saturating_sub(1)
    }

    pub fn null_class(&self) -> Option<usize> {
        self.null_class_reserved.then_some(self.num_classes)
    }

    fn class_rows(&self) -> usize {
        self.num_classes + usize::from(self.null_class_reserved)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Effective group count for a norm over `channels`.
    pub fn groups_for(&self, channels: usize) -> usize {
        self.groups.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.len() < 2 {
            return bad("channel_mults needs at least two levels".into());
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.num_res_blocks_per_level == 0 {
            return bad("num_res_blocks_per_level must be >= 1".into());
        }
        if self.groups == 0 {
            return bad("groups must be >= 1".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim));
        }
        for spec in site_specs(self) {
            if let Some(c) = spec.norm_channels {
                let g = self.groups_for(c);
                if c % g != 0 {
                    return bad(format!("{}: {c} channels not divisible by {g} groups", spec.path));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `N(0, gain / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct SiteSpec {
    path: String,
    shape: Vec<usize>,
    init: Init,
    norm_channels: Option<usize>,
}

struct SpecBuilder {
    specs: Vec<SiteSpec>,
}

impl SpecBuilder {
    fn push(&mut self, path: String, shape: Vec<usize>, init: Init) {
        self.specs.push(SiteSpec {
            path,
            shape,
            init,
            norm_channels: None,
        });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool, zero: bool) {
        let init = if zero {
            Init::Zeros
        } else {
            Init::FanIn {
                fan_in: cin * k * k,
                gain: 2.0,
            }
        };
        self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], init);
        if bias {
            self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
        }
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool, gain: f64) {
        self.push(
            format!("{prefix}.weight"),
            vec![out, inp],
            Init::FanIn { fan_in: inp, gain },
        );
        if bias {
            self.push(format!("{prefix}.bias"), vec![out], Init::Zeros);
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        for (name, init) in [("gamma", Init::Ones), ("beta", Init::Zeros)] {
            self.specs.push(SiteSpec {
                path: format!("{prefix}.{name}"),
                shape: vec![c],
                init,
                norm_channels: Some(c),
            });
        }
    }

    fn res(&mut self, prefix: &str, cin: usize, cout: usize, emb: usize) {
        self.norm(&format!("{prefix}.norm1"), cin);
        self.conv(&format!("{prefix}.conv1"), cout, cin, 3, true, false);
        self.linear(&format!("{prefix}.temb"), cout, emb, true, 1.0);
        self.norm(&format!("{prefix}.norm2"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3, true, false);
        if cin != cout {
            self.conv(&format!("{prefix}.skip"), cout, cin, 1, false, false);
        }
    }
}

/// Enumerates every parameter site in forward-pass order.
fn site_specs(cfg: &UNetConfig) -> Vec<SiteSpec> {
    let mut b = SpecBuilder { specs: Vec::new() };
    let e = cfg.time_embed_dim;
    let levels = cfg.channel_mults.len();
    b.linear("time.mlp0", e, e, true, 2.0);
    b.linear("time.mlp1", e, e, true, 1.0);
    if cfg.class_rows() > 0 {
        b.push("embed.class.weight".into(), vec![cfg.class_rows(), e], Init::Normal(1.0));
    }
    let mut ch = cfg.in_channels;
    let mut skip_ch = Vec::with_capacity(levels);
    for level in 0..levels {
        let out = cfg.level_channels(level);
        for blk in 0..cfg.num_res_blocks_per_level {
            b.res(&format!("down.{level}.res.{blk}"), ch, out, e);
            ch = out;
        }
        skip_ch.push(ch);
        if level + 1 < levels {
            b.conv(&format!("down.{level}.sampler.conv"), ch, ch, 3, true, false);
        }
    }
    b.res("mid.res.0", ch, ch, e);
    if cfg.attn_at_bottleneck {
        for p in ["q", "k", "v", "o"] {
            b.linear(&format!("mid.attn.{p}"), ch, ch, false, 1.0);
        }
    }
    b.res("mid.res.1", ch, ch, e);
    for up in 0..levels {
        let level = levels - 1 - up;
        let out = cfg.level_channels(level);
        for blk in 0..cfg.num_res_blocks_per_level {
            let cin = if blk == 0 { ch + skip_ch[level] } else { ch };
            b.res(&format!("up.{up}.res.{blk}"), cin, out, e);
            ch = out;
        }
        if up + 1 < levels {
            b.conv(&format!("up.{up}.sampler.conv"), ch, ch, 3, true, false);
        }
    }
    b.norm("out.norm", ch);
    b.conv("out.conv", cfg.in_channels, ch, 3, true, true);
    b.specs
}

/// Which family of sites [`UNetModel::list_sites`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteSelector {
    /// Weights of the downsampler and upsampler convolutions.
    SamplerConvs,
    /// `gamma`/`beta` of both group norms inside every resnet block.
    ResnetNorms,
    /// Bottleneck attention q/k/v/o projection weights.
    AttentionProjections,
    All,
}

impl SiteSelector {
    pub fn matches(self, path: &str) -> bool {
        let parts: Vec<&str> = path.split('.').collect();
        match self {
            SiteSelector::All => true,
            SiteSelector::SamplerConvs => {
                matches!(parts.as_slice(), ["down" | "up", _, "sampler", "conv", "weight"])
            }
            SiteSelector::ResnetNorms => {
                parts.len() >= 4
                    && parts[parts.len() - 4] == "res"
                    && matches!(parts[parts.len() - 2], "norm1" | "norm2")
                    && matches!(parts[parts.len() - 1], "gamma" | "beta")
            }
            SiteSelector::AttentionProjections => {
                matches!(parts.as_slice(), ["mid", "attn", "q" | "k" | "v" | "o", "weight"])
            }
        }
    }
}

/// Sinusoidal embedding `[sin(t w_i)..., cos(t w_i)...]`, `w_i = 10000^(-2i/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let tf = t as f64;
    let freq = |i: usize| 10000f64.powf(-2.0 * i as f64 / dim as f64);
    let mut data = Vec::with_capacity(dim);
    data.extend((0..half).map(|i| (tf * freq(i)).sin()));
    data.extend((0..half).map(|i| (tf * freq(i)).cos()));
    Tensor::new([dim], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl UNetModel {
    /// Builds a model with seeded fan-in-scaled weights, zero biases, unit
    /// norm scales and a zero output convolution.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in site_specs(&config) {
            let t = match spec.init {
                Init::FanIn { fan_in, gain } => {
                    Tensor::randn(spec.shape, (gain / fan_in as f64).sqrt(), &mut rng)
                }
                Init::Normal(std) => Tensor::randn(spec.shape, std, &mut rng),
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::ones(spec.shape),
            };
            params.insert(spec.path, t);
        }
        Ok(UNetModel {
            config,
            params,
            frozen: BTreeSet::new(),
        })
    }

    /// Reassembles a model from stored parameters, checking them against the
    /// grammar for `config`.
    pub fn from_params(config: UNetConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = site_specs(&config);
        let expected: BTreeMap<&str, &[usize]> =
            specs.iter().map(|s| (s.path.as_str(), s.shape.as_slice())).collect();
        for (name, t) in &params {
            match expected.get(name.as_str()) {
                None => return Err(crate::FormatError::UnknownSite(name.clone()).into()),
                Some(shape) if *shape != t.shape() => {
                    return Err(crate::FormatError::Inconsistent {
                        name: name.clone(),
                        detail: format!("shape {:?}, architecture expects {shape:?}", t.shape()),
                    }
                    .into())
                }
                Some(_) => {}
            }
        }
        if let Some(missing) = expected.keys().find(|k| !params.contains_key(**k)) {
            return Err(crate::FormatError::MissingSite(missing.to_string()).into());
        }
        Ok(UNetModel {
            config,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, site: &str) -> Option<&Tensor> {
        self.params.get(site)
    }

    pub fn param_mut(&mut self, site: &str) -> Option<&mut Tensor> {
        self.params.get_mut(site)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.params.keys().cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, site: &str) -> bool {
        self.frozen.contains(site)
    }

    /// Number of scalars in frozen parameters.
    pub fn frozen_params(&self) -> usize {
        self.frozen.iter().map(|s| self.params[s].numel()).sum()
    }

    /// Sorted site paths matching `selector`.
    pub fn list_sites(&self, selector: SiteSelector) -> Vec<String> {
        self.params
            .keys()
            .filter(|p| selector.matches(p))
            .cloned()
            .collect()
    }

    /// 64-bit FNV-1a over the sorted `(path, shape)` list. Values are not
    /// hashed, so retraining keeps the fingerprint.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (path, t) in &self.params {
            h.write(path.as_bytes());
            h.write(&[0]);
            for d in t.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            h.write(&[0xff]);
        }
        h.finish()
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut binder = ModelBinder::new(self, false);
        let y = forward(&mut tape, &self.config, &mut binder, xv, t, c)?;
        Ok(tape.take_value(y))
    }
}

/// Supplies the tape variable for each site the forward pass reads.
pub trait ParamSource {
    fn bind(&mut self, tape: &mut Tape, site: &str) -> Result<Var>;
}

/// Binds model parameters as tape leaves, each at most once per tape.
///
/// With `trainable`, non-frozen parameters are recorded with
/// `requires_grad`; overrides replace individual sites by caller-provided
/// variables.
pub struct ModelBinder<'a> {
    model: &'a UNetModel,
    trainable: bool,
    overrides: BTreeMap<String, Var>,
    bound: BTreeMap<String, Var>,
}

impl<'a> ModelBinder<'a> {
    pub fn new(model: &'a UNetModel, trainable: bool) -> Self {
        ModelBinder {
            model,
            trainable,
            overrides: BTreeMap::new(),
            bound: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, site: impl Into<String>, var: Var) -> Self {
        self.overrides.insert(site.into(), var);
        self
    }

    /// Sites bound so far, with their variables.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}

impl ParamSource for ModelBinder<'_> {
    fn bind(&mut self, tape: &mut Tape, site: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(site) {
            return Ok(*v);
        }
        let v = if let Some(v) = self.overrides.get(site) {
            *v
        } else {
            let t = self
                .model
                .param(site)
                .ok_or_else(|| Error::Config(format!("model has no parameter {site}")))?;
            let grad = self.trainable && !self.model.is_frozen(site);
            tape.leaf(t.clone().with_requires_grad(grad))
        };
        self.bound.insert(site.to_string(), v);
        Ok(v)
    }
}

/// The noise predictor interface shared by samplers and evaluators.
pub trait Denoiser {
    fn predict_eps(&self, x: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor>;
    /// Class id of the unconditional token, if one is reserved.
    fn null_class(&self) -> Option<usize>;
    /// Height/width divisor required by the network.
    fn spatial_divisor(&self) -> usize {
        1
    }
    /// Image channels the denoiser expects.
    fn in_channels(&self) -> usize {
        1
    }
}

impl Denoiser for UNetModel {
    fn predict_eps(&self, x: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        self.forward(x, t, c)
    }
    fn null_class(&self) -> Option<usize> {
        self.config.null_class()
    }
    fn spatial_divisor(&self) -> usize {
        self.config.spatial_divisor()
    }
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }
}

/// Checks that an `H x W` input is legal for `cfg`.
pub fn check_resolution(cfg: &UNetConfig, h: usize, w: usize) -> Result<()> {
    let d = cfg.spatial_divisor();
    if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
        return Err(Error::Resolution {
            height: h,
            width: w,
            divisor: d,
        });
    }
    Ok(())
}

struct Ctx<'a, 'b> {
    tape: &'a mut Tape,
    cfg: &'a UNetConfig,
    params: &'a mut (dyn ParamSource + 'b),
    emb: Var,
    batch: usize,
}

impl Ctx<'_, '_> {
    fn p(&mut self, site: &str) -> Result<Var> {
        self.params.bind(self.tape, site)
    }

    fn norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let c = self.tape.shape(x)[1];
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        self.tape.group_norm(x, self.cfg.groups_for(c), g, b, NORM_EPS)
    }

    fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn res(&mut self, prefix: &str, x: Var, cout: usize) -> Result<Var> {
        let cin = self.tape.shape(x)[1];
        let h = self.norm(&format!("{prefix}.norm1"), x)?;
        let h = self.tape.silu(h);
        let h = self.conv(&format!("{prefix}.conv1"), h, 1, 1)?;
        let tw = self.p(&format!("{prefix}.temb.weight"))?;
        let tb = self.p(&format!("{prefix}.temb.bias"))?;
        let tproj = self.tape.linear(self.emb, tw, Some(tb))?;
        let tproj = self.tape.reshape(tproj, [self.batch, cout, 1, 1])?;
        let h = self.tape.add(h, tproj)?;
        let h = self.norm(&format!("{prefix}.norm2"), h)?;
        let h = self.tape.silu(h);
        let h = self.conv(&format!("{prefix}.conv2"), h, 1, 1)?;
        let skip = if cin != cout {
            let w = self.p(&format!("{prefix}.skip.weight"))?;
            self.tape.conv2d(x, w, None, 1, 0)?
        } else {
            x
        };
        self.tape.add(skip, h)
    }

    fn attention(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw_dims(self.tape.value(x), "attention")?;
        let q = self.p("mid.attn.q.weight")?;
        let k = self.p("mid.attn.k.weight")?;
        let v = self.p("mid.attn.v.weight")?;
        let o = self.p("mid.attn.o.weight")?;
        let tokens = self.tape.reshape(x, [n, c, h * w])?;
        let tokens = self.tape.transpose_last2(tokens)?;
        let a = self.tape.self_attention(tokens, q, k, v, o)?;
        let a = self.tape.transpose_last2(a)?;
        let a = self.tape.reshape(a, [n, c, h, w])?;
        self.tape.add(x, a)
    }
}

/// Differentiable forward pass `eps_hat = unet(x_t, t, c)`.
///
/// `t` and `c` hold one entry per sample; class ids run over
/// `0..num_classes` plus the reserved null id.
pub fn forward(
    tape: &mut Tape,
    cfg: &UNetConfig,
    params: &mut dyn ParamSource,
    x: Var,
    t: &[usize],
    c: &[usize],
) -> Result<Var> {
    let [n, cin, h, w] = nchw_dims(tape.value(x), "unet_forward")?;
    if cin != cfg.in_channels {
        return Err(Error::shape(
            "unet_forward",
            1,
            format!("expected {} channels, got {cin}", cfg.in_channels),
        ));
    }
    check_resolution(cfg, h, w)?;
    if t.len() != n {
        return Err(Error::shape("unet_forward", "t", format!("{} timesteps for batch {n}", t.len())));
    }
    let rows = cfg.class_rows();
    if rows > 0 {
        if c.len() != n {
            return Err(Error::shape("unet_forward", "c", format!("{} labels for batch {n}", c.len())));
        }
        if let Some(bad) = c.iter().find(|&&id| id >= rows) {
            return Err(Error::Config(format!("class id {bad} outside 0..{rows}")));
        }
    }

    let e = cfg.time_embed_dim;
    let mut emb_data = Vec::with_capacity(n * e);
    for &ti in t {
        emb_data.extend_from_slice(time_embedding(ti, e)?.data());
    }
    let sinus = tape.constant(Tensor::new([n, e], emb_data)?);
    let w0 = params.bind(tape, "time.mlp0.weight")?;
    let b0 = params.bind(tape, "time.mlp0.bias")?;
    let emb = tape.linear(sinus, w0, Some(b0))?;
    let emb = tape.silu(emb);
    let w1 = params.bind(tape, "time.mlp1.weight")?;
    let b1 = params.bind(tape, "time.mlp1.bias")?;
    let mut emb = tape.linear(emb, w1, Some(b1))?;
    if rows > 0 {
        let table = params.bind(tape, "embed.class.weight")?;
        let ce = tape.gather_rows(table, c)?;
        emb = tape.add(emb, ce)?;
    }
    let emb = tape.silu(emb);

    let mut ctx = Ctx {
        tape,
        cfg,
        params,
        emb,
        batch: n,
    };
    let levels = cfg.channel_mults.len();
    let mut hcur = x;
    let mut skips = Vec::with_capacity(levels);
    for level in 0..levels {
        let out = cfg.level_channels(level);
        for blk in 0..cfg.num_res_blocks_per_level {
            hcur = ctx.res(&format!("down.{level}.res.{blk}"), hcur, out)?;
        }
        skips.push(hcur);
        if level + 1 < levels {
            hcur = ctx.conv(&format!("down.{level}.sampler.conv"), hcur, 2, 1)?;
        }
    }
    let ch = cfg.level_channels(levels - 1);
    hcur = ctx.res("mid.res.0", hcur, ch)?;
    if cfg.attn_at_bottleneck {
        hcur = ctx.attention(hcur)?;
    }
    hcur = ctx.res("mid.res.1", hcur, ch)?;
    for up in 0..levels {
        let level = levels - 1 - up;
        let out = cfg.level_channels(level);
        for blk in 0..cfg.num_res_blocks_per_level {
            if blk == 0 {
                hcur = ctx.tape.concat_channels(&[hcur, skips[level]])?;
            }
            hcur = ctx.res(&format!("up.{up}.res.{blk}"), hcur, out)?;
        }
        if up + 1 < levels {
            hcur = ctx.tape.upsample_nearest2x(hcur)?;
            hcur = ctx.conv(&format!("up.{up}.sampler.conv"), hcur, 1, 1)?;
        }
    }
    hcur = ctx.norm("out.norm", hcur)?;
    hcur = ctx.tape.silu(hcur);
    ctx.conv("out.conv", hcur, 1, 1)
}

#[cfg(test)]
mod tests;
