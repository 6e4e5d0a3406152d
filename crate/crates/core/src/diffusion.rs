//! DDPM schedule and reverse step, the simplified noise-prediction loss, and
//! a DDIM sampler with classifier-free guidance.
//!
//! Timesteps are 1-based: `t` runs over `1..=T`, and `alpha_bar(0) == 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::unet::Denoiser;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(DiffusionSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::Timestep { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `prod_{s<=t} alpha_s`; `1` at `t == 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-step noise scale, `sigma_t^2 = beta_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_marginal(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Per-sample forward marginal for a batch `[N, ...]` with one `t` per sample.
pub fn forward_marginal_batch(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_marginal",
            "*",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let n = x0.shape().first().copied().unwrap_or(1);
    if t.len() != n {
        return Err(Error::shape("forward_marginal", 0, format!("{} timesteps for batch {n}", t.len())));
    }
    let per = x0.numel() / n.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (s, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xs = &x0.data()[s * per..(s + 1) * per];
        let es = &eps.data()[s * per..(s + 1) * per];
        out.extend(xs.iter().zip(es).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Simplified training objective: mean squared error between `eps` and the
/// prediction made from `x_t = forward_marginal(x0, t, eps)`.
///
/// `predict` receives the tape and the (constant) `x_t` variable.
pub fn simple_loss<F>(
    tape: &mut Tape,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    predict: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let xt = forward_marginal_batch(x0, t, eps, schedule)?;
    let xt = tape.constant(xt);
    let pred = predict(tape, xt)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(target, pred)?;
    if tape.shape(diff) != eps.shape() {
        return Err(Error::shape(
            "simple_loss",
            "*",
            format!("prediction {:?} vs noise {:?}", tape.shape(pred), eps.shape()),
        ));
    }
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// One ancestral step: `mu_theta(x_t, t) + sigma_t * noise`, with the noise
/// term dropped at `t == 1`.
pub fn ddpm_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
    let inv = 1.0 / alpha.sqrt();
    let coef = beta / (1.0 - ab).sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = schedule.sigma(t);
    mean.zip_map(noise, |m, z| m + sigma * z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// DDIM stochasticity; `0` is deterministic.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::Config(format!(
                "sampler steps {} outside 1..={}",
                self.steps,
                schedule.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} is negative", self.guidance_scale)));
        }
        Ok(())
    }
}

/// Classifier-free guidance `eps_u + w (eps_c - eps_u)` for a batch sharing
/// one timestep and class. `w == 1` returns the conditional pass unchanged
/// and `w == 0` the unconditional one.
pub fn cfg_predict(model: &dyn Denoiser, x: &Tensor, t: usize, c: usize, w: f64) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(1);
    let cond = || model.predict_eps(x, &vec![t; n], &vec![c; n]);
    if w == 1.0 {
        return cond();
    }
    let null = model
        .null_class()
        .ok_or_else(|| Error::Config("classifier-free guidance needs a reserved null class".into()))?;
    let uncond = model.predict_eps(x, &vec![t; n], &vec![null; n])?;
    if w == 0.0 {
        return Ok(uncond);
    }
    let cond = cond()?;
    uncond.zip_map(&cond, |u, c| u + w * (c - u))
}

/// Uniformly spaced decreasing timesteps from `T` down to `1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![total];
    }
    (0..steps)
        .map(|i| {
            let frac = (steps - 1 - i) as f64 / (steps - 1) as f64;
            1 + ((total - 1) as f64 * frac).round() as usize
        })
        .collect()
}

/// Runs the DDIM update over `ddim_timesteps`, asking `eps_at(x, t)` for the
/// noise estimate at each step. Starts from seeded standard normal noise.
pub fn ddim_loop(
    shape: [usize; 4],
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    mut eps_at: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    let ts = ddim_timesteps(schedule.len(), cfg.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let eps = eps_at(&x, t)?;
        eps.check_finite("noise prediction")?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let sp = ab_prev.sqrt();
        let mut next = x.zip_map(&eps, |xv, e| {
            let x0 = ((xv - sb * e) / sa).clamp(-1.0, 1.0);
            sp * x0 + dir * e
        })?;
        if sigma > 0.0 {
            let z = Tensor::randn(shape, 1.0, &mut rng);
            next = next.zip_map(&z, |v, zv| v + sigma * zv)?;
        }
        x = next;
    }
    Ok(x)
}

/// DDIM sampling with classifier-free guidance toward class `c`.
pub fn ddim_sample(
    model: &dyn Denoiser,
    shape: [usize; 4],
    cfg: &SamplerConfig,
    c: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let d = model.spatial_divisor();
    let (h, w) = (shape[2], shape[3]);
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::Resolution {
            height: h,
            width: w,
            divisor: d,
        });
    }
    ddim_loop(shape, cfg, schedule, |x, t| cfg_predict(model, x, t, c, cfg.guidance_scale))
}

#[cfg(test)]
mod tests;
