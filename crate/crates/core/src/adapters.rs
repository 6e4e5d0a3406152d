//! Resolution adapters: low-rank deltas on the sampler convolutions plus
//! additive group-norm affine deltas inside resnet blocks, and the
//! attention-LoRA baseline used for contrast.
//!
//! Adapter tensors are addressed by the host site path plus a suffix:
//! `.lora.A`, `.lora.B` for a low-rank pair on a weight, `.delta.gamma`,
//! `.delta.beta` for a norm delta (whose site is the norm prefix, e.g.
//! `down.0.res.0.norm1`).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::unet::{forward, Denoiser, ModelBinder, ParamSource, SiteSelector, UNetModel};

pub const LORA_A: &str = ".lora.A";
pub const LORA_B: &str = ".lora.B";
pub const DELTA_GAMMA: &str = ".delta.gamma";
pub const DELTA_BETA: &str = ".delta.beta";

/// Low-rank pair with `delta = A Bᵀ`, `A: [m, r]`, `B: [n, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAPair {
    pub site: String,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoRAPair {
    /// Fresh pair for a host weight: `A ~ N(0, 1/m)`, `B = 0`. Conv hosts
    /// `[C_out, C_in, k, k]` are viewed as `[C_out, C_in k k]`.
    pub fn init(site: &str, host_shape: &[usize], rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (m, n) = matrix_dims(host_shape);
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Config(format!(
                "rank {rank} is invalid at {site}: host is {m}x{n}"
            )));
        }
        Ok(LoRAPair {
            site: site.to_string(),
            a: Tensor::randn([m, rank], (1.0 / m as f64).sqrt(), rng),
            b: Tensor::zeros([n, rank]),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `A Bᵀ` as an `[m, n]` matrix.
    pub fn delta(&self) -> Tensor {
        let (m, r) = (self.a.shape()[0], self.a.shape()[1]);
        let n = self.b.shape()[0];
        let (a, b) = (self.a.data(), self.b.data());
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..r).map(|k| a[i * r + k] * b[j * r + k]).sum()
        })
    }

    fn check_host(&self, host_shape: &[usize]) -> Result<()> {
        let (m, n) = matrix_dims(host_shape);
        let ok = self.a.rank() == 2
            && self.b.rank() == 2
            && self.a.shape()[0] == m
            && self.b.shape()[0] == n
            && self.a.shape()[1] == self.b.shape()[1];
        if !ok {
            return Err(Error::Config(format!(
                "low-rank pair at {} has A {:?}, B {:?}; host {:?} needs [{m}, r], [{n}, r]",
                self.site,
                self.a.shape(),
                self.b.shape(),
                host_shape
            )));
        }
        Ok(())
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let m = shape.first().copied().unwrap_or(1);
    (m, shape.iter().skip(1).product())
}

/// Additive deltas for one group norm's affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormDelta {
    /// Norm prefix, e.g. `mid.res.1.norm2`.
    pub site: String,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl NormDelta {
    pub fn zeros(site: &str, channels: usize) -> Self {
        NormDelta {
            site: site.to_string(),
            dgamma: Tensor::zeros([channels]),
            dbeta: Tensor::zeros([channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dgamma.numel() + self.dbeta.numel()
    }
}

/// Which adapter families are active; used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterModes {
    pub conv_lora: bool,
    pub norm_deltas: bool,
}

impl AdapterModes {
    pub const BOTH: AdapterModes = AdapterModes {
        conv_lora: true,
        norm_deltas: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResAdapterBundle {
    pub rank: usize,
    pub conv_loras: Vec<LoRAPair>,
    pub norm_deltas: Vec<NormDelta>,
    pub alpha_r: f64,
    pub base_fingerprint: u64,
}

/// Attaches a fresh resolution adapter and freezes every base parameter.
///
/// One pair per sampler-conv weight, one zero delta per resnet norm. The
/// fresh bundle leaves the model's output bitwise unchanged.
pub fn attach_resadapter(model: &mut UNetModel, rank: usize, seed: u64) -> Result<ResAdapterBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv_loras = model
        .list_sites(SiteSelector::SamplerConvs)
        .iter()
        .map(|s| LoRAPair::init(s, model.param(s).expect("listed site").shape(), rank, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let norm_deltas = norm_sites(model)
        .into_iter()
        .map(|s| {
            let c = model.param(&format!("{s}.gamma")).expect("listed site").numel();
            NormDelta::zeros(&s, c)
        })
        .collect();
    model.freeze_all();
    Ok(ResAdapterBundle {
        rank,
        conv_loras,
        norm_deltas,
        alpha_r: 1.0,
        base_fingerprint: model.fingerprint(),
    })
}

/// Norm prefixes of every resnet group norm, sorted.
fn norm_sites(model: &UNetModel) -> Vec<String> {
    model
        .list_sites(SiteSelector::ResnetNorms)
        .into_iter()
        .filter_map(|s| s.strip_suffix(".gamma").map(str::to_string))
        .collect()
}

impl ResAdapterBundle {
    pub fn trainable_params(&self) -> usize {
        self.conv_loras.iter().map(LoRAPair::param_count).sum::<usize>()
            + self.norm_deltas.iter().map(NormDelta::param_count).sum::<usize>()
    }

    /// Copy keeping only the enabled adapter families.
    pub fn restricted(&self, modes: AdapterModes) -> Self {
        ResAdapterBundle {
            conv_loras: if modes.conv_lora { self.conv_loras.clone() } else { Vec::new() },
            norm_deltas: if modes.norm_deltas { self.norm_deltas.clone() } else { Vec::new() },
            ..self.clone()
        }
    }

    pub fn with_alpha(&self, alpha_r: f64) -> Result<Self> {
        check_alpha(alpha_r)?;
        Ok(ResAdapterBundle {
            alpha_r,
            ..self.clone()
        })
    }

    /// Checks the site families, tensor shapes and fingerprint against `model`.
    pub fn validate_against(&self, model: &UNetModel) -> Result<()> {
        check_fingerprint(self.base_fingerprint, model)?;
        check_alpha(self.alpha_r)?;
        for p in &self.conv_loras {
            if !SiteSelector::SamplerConvs.matches(&p.site) {
                return Err(Error::Config(format!("{} is not a sampler convolution", p.site)));
            }
            p.check_host(host(model, &p.site)?.shape())?;
            if p.rank() != self.rank {
                return Err(Error::Config(format!(
                    "pair at {} has rank {}, bundle rank is {}",
                    p.site,
                    p.rank(),
                    self.rank
                )));
            }
        }
        for d in &self.norm_deltas {
            let gamma = format!("{}.gamma", d.site);
            if !SiteSelector::ResnetNorms.matches(&gamma) {
                return Err(Error::Config(format!("{} is not a resnet norm", d.site)));
            }
            let c = host(model, &gamma)?.numel();
            if d.dgamma.shape() != [c] || d.dbeta.shape() != [c] {
                return Err(Error::Config(format!("norm delta at {} must have {c} channels", d.site)));
            }
        }
        Ok(())
    }

    /// Every adapter tensor under its stored name.
    pub fn tensors(&self) -> BTreeMap<String, &Tensor> {
        named_tensors(&self.conv_loras, &self.norm_deltas)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        named_tensor_mut(&mut self.conv_loras, &mut self.norm_deltas, name)
    }

    /// Inference view of `model` with this bundle applied.
    pub fn apply<'a>(&'a self, model: &'a UNetModel) -> Result<Adapted<'a>> {
        self.validate_against(model)?;
        Ok(Adapted {
            model,
            loras: &self.conv_loras,
            norms: &self.norm_deltas,
            alpha: self.alpha_r,
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha_r must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_fingerprint(bundle: u64, model: &UNetModel) -> Result<()> {
    let fp = model.fingerprint();
    if fp != bundle {
        return Err(Error::Fingerprint { bundle, model: fp });
    }
    Ok(())
}

fn host<'m>(model: &'m UNetModel, site: &str) -> Result<&'m Tensor> {
    model
        .param(site)
        .ok_or_else(|| Error::Config(format!("model has no parameter {site}")))
}

fn named_tensors<'a>(loras: &'a [LoRAPair], norms: &'a [NormDelta]) -> BTreeMap<String, &'a Tensor> {
    let mut out = BTreeMap::new();
    for p in loras {
        out.insert(format!("{}{LORA_A}", p.site), &p.a);
        out.insert(format!("{}{LORA_B}", p.site), &p.b);
    }
    for d in norms {
        out.insert(format!("{}{DELTA_GAMMA}", d.site), &d.dgamma);
        out.insert(format!("{}{DELTA_BETA}", d.site), &d.dbeta);
    }
    out
}

fn named_tensor_mut<'a>(
    loras: &'a mut [LoRAPair],
    norms: &'a mut [NormDelta],
    name: &str,
) -> Option<&'a mut Tensor> {
    if let Some(site) = name.strip_suffix(LORA_A) {
        return loras.iter_mut().find(|p| p.site == site).map(|p| &mut p.a);
    }
    if let Some(site) = name.strip_suffix(LORA_B) {
        return loras.iter_mut().find(|p| p.site == site).map(|p| &mut p.b);
    }
    if let Some(site) = name.strip_suffix(DELTA_GAMMA) {
        return norms.iter_mut().find(|d| d.site == site).map(|d| &mut d.dgamma);
    }
    if let Some(site) = name.strip_suffix(DELTA_BETA) {
        return norms.iter_mut().find(|d| d.site == site).map(|d| &mut d.dbeta);
    }
    None
}

/// `true` for names of norm-delta tensors.
pub fn is_norm_delta(name: &str) -> bool {
    name.ends_with(DELTA_GAMMA) || name.ends_with(DELTA_BETA)
}

/// Low-rank pairs on the bottleneck attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLoRABundle {
    pub attn_loras: Vec<LoRAPair>,
    pub alpha: f64,
    pub base_fingerprint: u64,
}

/// Attaches q/k/v/o pairs with the same init convention as the sampler pairs.
pub fn attach_style_lora(model: &UNetModel, rank: usize, seed: u64) -> Result<StyleLoRABundle> {
    let sites = model.list_sites(SiteSelector::AttentionProjections);
    if sites.is_empty() {
        return Err(Error::Config("model has no attention projections".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn_loras = sites
        .iter()
        .map(|s| LoRAPair::init(s, model.param(s).expect("listed site").shape(), rank, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleLoRABundle {
        attn_loras,
        alpha: 1.0,
        base_fingerprint: model.fingerprint(),
    })
}

impl StyleLoRABundle {
    pub fn trainable_params(&self) -> usize {
        self.attn_loras.iter().map(LoRAPair::param_count).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, &Tensor> {
        named_tensors(&self.attn_loras, &[])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        named_tensor_mut(&mut self.attn_loras, &mut [], name)
    }

    pub fn apply<'a>(&'a self, model: &'a UNetModel) -> Result<Adapted<'a>> {
        check_fingerprint(self.base_fingerprint, model)?;
        for p in &self.attn_loras {
            if !SiteSelector::AttentionProjections.matches(&p.site) {
                return Err(Error::Config(format!("{} is not an attention projection", p.site)));
            }
            p.check_host(host(model, &p.site)?.shape())?;
        }
        Ok(Adapted {
            model,
            loras: &self.attn_loras,
            norms: &[],
            alpha: self.alpha,
        })
    }
}

/// A frozen model seen through a set of adapter deltas.
#[derive(Clone, Copy)]
pub struct Adapted<'a> {
    pub model: &'a UNetModel,
    pub loras: &'a [LoRAPair],
    pub norms: &'a [NormDelta],
    pub alpha: f64,
}

impl<'a> Adapted<'a> {
    /// Binder that composes effective weights on the tape. With `trainable`,
    /// adapter tensors become gradient leaves; base weights never do.
    pub fn binder(&self, trainable: bool) -> AdaptedBinder<'a> {
        AdaptedBinder {
            view: *self,
            base: ModelBinder::new(self.model, false),
            trainable,
            overrides: BTreeMap::new(),
            leaves: BTreeMap::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Forward pass on `tape`; returns the output and the adapter leaves by name.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: Var,
        t: &[usize],
        c: &[usize],
        trainable: bool,
    ) -> Result<(Var, BTreeMap<String, Var>)> {
        let mut b = self.binder(trainable);
        let y = forward(tape, self.model.config(), &mut b, x, t, c)?;
        Ok((y, b.leaves))
    }
}

impl Denoiser for Adapted<'_> {
    fn predict_eps(&self, x: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, _) = self.forward_on(&mut tape, xv, t, c, false)?;
        Ok(tape.take_value(y))
    }
    fn null_class(&self) -> Option<usize> {
        self.model.null_class()
    }
    fn spatial_divisor(&self) -> usize {
        self.model.config().spatial_divisor()
    }
    fn in_channels(&self) -> usize {
        self.model.config().in_channels
    }
}

pub struct AdaptedBinder<'a> {
    view: Adapted<'a>,
    base: ModelBinder<'a>,
    trainable: bool,
    overrides: BTreeMap<String, Var>,
    leaves: BTreeMap<String, Var>,
    bound: BTreeMap<String, Var>,
}

impl AdaptedBinder<'_> {
    /// Uses a caller-provided variable for the adapter tensor `name`.
    pub fn with_override(mut self, name: impl Into<String>, var: Var) -> Self {
        self.overrides.insert(name.into(), var);
        self
    }

    /// Adapter leaves created so far, by tensor name.
    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.leaves
    }

    fn leaf(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        let v = match self.overrides.get(&name) {
            Some(v) => *v,
            None => tape.leaf(t.clone().with_requires_grad(self.trainable)),
        };
        self.leaves.insert(name, v);
        v
    }

    fn compose(&mut self, tape: &mut Tape, site: &str) -> Result<Var> {
        let w = self.base.bind(tape, site)?;
        let alpha = self.view.alpha;
        if let Some(p) = self.view.loras.iter().find(|p| p.site == site) {
            let a = self.leaf(tape, format!("{site}{LORA_A}"), &p.a);
            let b = self.leaf(tape, format!("{site}{LORA_B}"), &p.b);
            let d = tape.matmul(a, b, true)?;
            let d = tape.reshape(d, tape.shape(w).to_vec())?;
            let d = tape.scale(d, alpha);
            return tape.add(w, d);
        }
        let norm = site
            .strip_suffix(".gamma")
            .map(|s| (s, true))
            .or_else(|| site.strip_suffix(".beta").map(|s| (s, false)));
        if let Some((prefix, is_gamma)) = norm {
            if let Some(d) = self.view.norms.iter().find(|d| d.site == prefix) {
                let (suffix, t) = if is_gamma {
                    (DELTA_GAMMA, &d.dgamma)
                } else {
                    (DELTA_BETA, &d.dbeta)
                };
                let dv = self.leaf(tape, format!("{prefix}{suffix}"), t);
                let dv = tape.scale(dv, alpha);
                return tape.add(w, dv);
            }
        }
        Ok(w)
    }
}

impl ParamSource for AdaptedBinder<'_> {
    fn bind(&mut self, tape: &mut Tape, site: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(site) {
            return Ok(*v);
        }
        let v = self.compose(tape, site)?;
        self.bound.insert(site.to_string(), v);
        Ok(v)
    }
}

/// Folds the bundle into a copy of the base weights.
pub fn merge(model: &UNetModel, bundle: &ResAdapterBundle) -> Result<UNetModel> {
    bundle.validate_against(model)?;
    merge_deltas(model, &bundle.conv_loras, &bundle.norm_deltas, bundle.alpha_r)
}

pub fn merge_style(model: &UNetModel, bundle: &StyleLoRABundle) -> Result<UNetModel> {
    bundle.apply(model)?;
    merge_deltas(model, &bundle.attn_loras, &[], bundle.alpha)
}

fn merge_deltas(model: &UNetModel, loras: &[LoRAPair], norms: &[NormDelta], alpha: f64) -> Result<UNetModel> {
    let mut out = model.clone();
    for p in loras {
        let d = p.delta();
        let w = out.param_mut(&p.site).expect("validated site");
        for (wv, dv) in w.data_mut().iter_mut().zip(d.data()) {
            *wv += alpha * dv;
        }
    }
    for d in norms {
        for (suffix, t) in [("gamma", &d.dgamma), ("beta", &d.dbeta)] {
            let w = out.param_mut(&format!("{}.{suffix}", d.site)).expect("validated site");
            for (wv, dv) in w.data_mut().iter_mut().zip(t.data()) {
                *wv += alpha * dv;
            }
        }
    }
    Ok(out)
}
