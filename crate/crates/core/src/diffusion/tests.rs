use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;
use crate::unet::{forward, ModelBinder, UNetConfig, UNetModel};

fn two_step() -> DiffusionSchedule {
    DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap()
}

fn scalar(v: f64) -> Tensor {
    Tensor::new([1], vec![v]).unwrap()
}

/// Noise predictor defined by a closure over `(x, t, class)`.
struct FnDenoiser<F: Fn(&Tensor, usize, usize) -> Tensor> {
    f: F,
    null: Option<usize>,
}

impl<F: Fn(&Tensor, usize, usize) -> Tensor> Denoiser for FnDenoiser<F> {
    fn predict_eps(&self, x: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        Ok((self.f)(x, t[0], c[0]))
    }
    fn null_class(&self) -> Option<usize> {
        self.null
    }
}

#[test]
fn schedule_hand_products() {
    let s = two_step();
    assert_eq!(s.alphas(), &[0.9, 0.8]);
    assert_eq!(s.alpha_bars()[0], 0.9);
    assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    let one = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
    assert_eq!(one.alpha_bars(), &[0.7]);
    assert_eq!(one.alpha_bar(0), 1.0);
}

#[test]
fn schedule_identity_is_exact_and_decreasing() {
    let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    assert_eq!(s.len(), 1000);
    assert_eq!(s.beta(1), 1e-4);
    assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    for t in 1..=s.len() {
        assert_eq!(s.alpha_bar(t).to_bits(), (s.alpha_bar(t - 1) * s.alpha(t)).to_bits());
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert_eq!(s.sigma(t) * s.sigma(t), s.beta(t).sqrt() * s.beta(t).sqrt());
    }
}

#[test]
fn schedule_bounds_are_checked() {
    assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
    assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
    assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
    assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    assert!(DiffusionSchedule::from_betas(vec![0.5, 1.5]).is_err());
}

#[test]
fn forward_marginal_examples() {
    let s = two_step();
    let xt = forward_marginal(&scalar(1.0), 2, &scalar(0.5), &s).unwrap();
    assert!((xt.item() - 1.1131033).abs() < 1e-7);
    let nearly_clean = DiffusionSchedule::from_betas(vec![1e-14]).unwrap();
    let xt = forward_marginal(&scalar(0.37), 1, &scalar(2.0), &nearly_clean).unwrap();
    assert!((xt.item() - 0.37).abs() < 1e-6);
    let xt = forward_marginal(&scalar(2.0), 1, &scalar(0.0), &s).unwrap();
    assert_eq!(xt.item(), 0.9f64.sqrt() * 2.0);
    assert!(matches!(
        forward_marginal(&scalar(1.0), 3, &scalar(0.0), &s),
        Err(Error::Timestep { t: 3, max: 2 })
    ));
    assert!(forward_marginal(&scalar(1.0), 0, &scalar(0.0), &s).is_err());
}

#[test]
fn simple_loss_examples() {
    let s = two_step();
    let x0 = Tensor::new([1, 2], vec![0.3, -0.2]).unwrap();
    let eps = Tensor::new([1, 2], vec![1.0, -1.0]).unwrap();
    let mut tape = Tape::new();
    let perfect = simple_loss(&mut tape, &s, &x0, &[2], &eps, |tp, _| Ok(tp.constant(eps.clone()))).unwrap();
    assert_eq!(tape.value(perfect).item(), 0.0);
    let zero = simple_loss(&mut tape, &s, &x0, &[2], &eps, |tp, _| Ok(tp.constant(Tensor::zeros([1, 2])))).unwrap();
    assert_eq!(tape.value(zero).item(), 1.0);
}

#[test]
fn simple_loss_of_fresh_model_is_mean_square_noise() {
    let s = DiffusionSchedule::linear(50, 1e-3, 0.05).unwrap();
    let model = UNetModel::build(UNetConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Tensor::randn([2, 1, 8, 8], 0.5, &mut rng);
    let eps = Tensor::randn([2, 1, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let loss = simple_loss(&mut tape, &s, &x0, &[3, 44], &eps, |tp, xt| {
        let mut b = ModelBinder::new(&model, true);
        forward(tp, model.config(), &mut b, xt, &[3, 44], &[0, 1])
    })
    .unwrap();
    let expected = eps.data().iter().map(|e| e * e).sum::<f64>() / eps.numel() as f64;
    assert!((tape.value(loss).item() - expected).abs() < 1e-15);
}

#[test]
fn simple_loss_gradient_matches_finite_differences() {
    let s = DiffusionSchedule::linear(20, 1e-3, 0.05).unwrap();
    let cfg = UNetConfig {
        base_channels: 4,
        groups: 2,
        time_embed_dim: 8,
        num_classes: 2,
        ..UNetConfig::default()
    };
    let mut model = UNetModel::build(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = model.param("out.conv.weight").unwrap().shape().to_vec();
    *model.param_mut("out.conv.weight").unwrap() = Tensor::randn(shape, 0.3, &mut rng);
    let x0 = Tensor::randn([2, 1, 4, 4], 0.5, &mut rng);
    let eps = Tensor::randn([2, 1, 4, 4], 1.0, &mut rng);
    for site in ["out.conv.weight", "up.0.sampler.conv.weight", "mid.attn.v.weight"] {
        let point = model.param(site).unwrap().clone();
        let err = grad_check(
            |tape, p| {
                simple_loss(tape, &s, &x0, &[5, 19], &eps, |tp, xt| {
                    let mut b = ModelBinder::new(&model, false).with_override(site, p);
                    forward(tp, model.config(), &mut b, xt, &[5, 19], &[1, 2])
                })
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "{site}: {err}");
    }
}

#[test]
fn ddpm_step_examples() {
    let s = two_step();
    let zero = scalar(0.0);
    let x = ddpm_step(&scalar(1.0), 2, &scalar(0.5), &s, &zero).unwrap();
    assert!((x.item() - 0.9067).abs() < 1e-4);
    let x = ddpm_step(&scalar(1.3), 2, &zero, &s, &zero).unwrap();
    assert_eq!(x.item(), 1.3 / 0.8f64.sqrt());
    let tiny = DiffusionSchedule::from_betas(vec![1e-14, 1e-14]).unwrap();
    let x = ddpm_step(&scalar(0.7), 2, &scalar(0.4), &tiny, &zero).unwrap();
    assert!((x.item() - 0.7).abs() < 1e-6);
    // the final step ignores the noise argument
    let a = ddpm_step(&scalar(0.7), 1, &scalar(0.4), &s, &scalar(5.0)).unwrap();
    let b = ddpm_step(&scalar(0.7), 1, &scalar(0.4), &s, &zero).unwrap();
    assert_eq!(a, b);
    let c = ddpm_step(&scalar(0.7), 2, &scalar(0.4), &s, &scalar(1.0)).unwrap();
    assert!((c.item() - ddpm_step(&scalar(0.7), 2, &scalar(0.4), &s, &zero).unwrap().item() - 0.2f64.sqrt()).abs() < 1e-15);
    assert!(ddpm_step(&scalar(0.7), 3, &zero, &s, &zero).is_err());
}

fn class_valued(null: Option<usize>) -> FnDenoiser<impl Fn(&Tensor, usize, usize) -> Tensor> {
    FnDenoiser {
        f: |x: &Tensor, _t: usize, c: usize| x.map(|v| 0.1 * v + if c == 9 { 0.0 } else { 1.0 + 0.3 * c as f64 }),
        null,
    }
}

#[test]
fn cfg_examples() {
    let x = Tensor::from_fn([2, 1, 1, 3], |i| i as f64 * 0.37 - 0.5);
    let m = class_valued(Some(9));
    let cond = m.predict_eps(&x, &[4, 4], &[1, 1]).unwrap();
    let w1 = cfg_predict(&m, &x, 4, 1, 1.0).unwrap();
    assert!(w1.data().iter().zip(cond.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let uncond = m.predict_eps(&x, &[4, 4], &[9, 9]).unwrap();
    assert_eq!(cfg_predict(&m, &x, 4, 1, 0.0).unwrap(), uncond);

    // eps_u = 0, eps_c = 1
    let binary = FnDenoiser {
        f: |x: &Tensor, _: usize, c: usize| x.map(|_| if c == 0 { 0.0 } else { 1.0 }),
        null: Some(0),
    };
    let out = cfg_predict(&binary, &x, 1, 1, 7.5).unwrap();
    assert!(out.data().iter().all(|&v| v == 7.5));

    let same = FnDenoiser {
        f: |x: &Tensor, _: usize, _: usize| x.map(|v| v * 0.25 + 0.125),
        null: Some(0),
    };
    let out = cfg_predict(&same, &x, 1, 1, 7.5).unwrap();
    assert_eq!(out, x.map(|v| v * 0.25 + 0.125));

    let no_null = class_valued(None);
    assert!(matches!(cfg_predict(&no_null, &x, 1, 1, 7.5), Err(Error::Config(_))));
    assert!(cfg_predict(&no_null, &x, 1, 1, 1.0).is_ok());
}

#[test]
fn timestep_subsequence() {
    assert_eq!(ddim_timesteps(50, 50), (1..=50).rev().collect::<Vec<_>>());
    let ts = ddim_timesteps(50, 25);
    assert_eq!(ts.len(), 25);
    assert_eq!((ts[0], ts[24]), (50, 1));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(ddim_timesteps(50, 1), vec![50]);
}

#[test]
fn ddim_is_deterministic_and_shape_preserving() {
    let s = DiffusionSchedule::linear(50, 1e-3, 0.05).unwrap();
    let cfg = UNetConfig {
        base_channels: 4,
        groups: 2,
        time_embed_dim: 8,
        ..UNetConfig::default()
    };
    let mut model = UNetModel::build(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = model.param("out.conv.weight").unwrap().shape().to_vec();
    *model.param_mut("out.conv.weight").unwrap() = Tensor::randn(shape, 0.3, &mut rng);
    let sc = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let a = ddim_sample(&model, [1, 1, 16, 24], &sc, 1, &s).unwrap();
    let b = ddim_sample(&model, [1, 1, 16, 24], &sc, 1, &s).unwrap();
    assert_eq!(a.shape(), &[1, 1, 16, 24]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let other = ddim_sample(&model, [1, 1, 16, 24], &SamplerConfig { seed: 1, ..sc.clone() }, 1, &s).unwrap();
    assert_ne!(a, other);
    assert!(matches!(
        ddim_sample(&model, [1, 1, 16, 23], &sc, 1, &s),
        Err(Error::Resolution { .. })
    ));
    assert!(ddim_sample(&model, [1, 1, 16, 16], &SamplerConfig { steps: 51, ..sc.clone() }, 1, &s).is_err());
    assert!(ddim_sample(&model, [1, 1, 16, 16], &SamplerConfig { eta: 1.5, ..sc }, 1, &s).is_err());
}

/// Closed-form variance of a linear-Gaussian reverse chain started from
/// `N(0, 1)`: each step maps `x -> c_t x + sqrt(v_t) z`.
fn chain_variance(s: &DiffusionSchedule, data_var: f64, posterior_noise: bool) -> f64 {
    let mut v = 1.0;
    for t in (1..=s.len()).rev() {
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let k = (1.0 - ab).sqrt() / (ab * data_var + 1.0 - ab);
        let c = (1.0 - s.beta(t) / (1.0 - ab).sqrt() * k) / s.alpha(t).sqrt();
        let noise = if t == 1 {
            0.0
        } else if posterior_noise {
            (1.0 - ab_prev) / (1.0 - ab) * s.beta(t)
        } else {
            s.beta(t)
        };
        v = c * c * v + noise;
    }
    v
}

/// With `eta = 1` and every timestep visited, DDIM and the ancestral chain
/// share their law when the chain's noise is the posterior variance
/// `beta_tilde_t`. Checked on a one-pixel Gaussian problem with its exact
/// noise predictor, over 4000 independent runs.
#[test]
fn ddim_eta_one_matches_ancestral_chain_in_distribution() {
    let s = DiffusionSchedule::linear(50, 1e-3, 0.05).unwrap();
    let data_var = 0.09;
    let exact = |x: &Tensor, t: usize| {
        let ab = s.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * data_var + 1.0 - ab);
        x.map(|v| k * v)
    };
    let model = FnDenoiser {
        f: |x: &Tensor, t: usize, _c: usize| exact(x, t),
        null: None,
    };
    let runs = 4000;
    let sc = SamplerConfig {
        steps: 50,
        guidance_scale: 1.0,
        eta: 1.0,
        seed: 11,
    };
    let ddim = ddim_sample(&model, [runs, 1, 1, 1], &sc, 0, &s).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = Tensor::randn([runs, 1, 1, 1], 1.0, &mut rng);
    for t in (1..=s.len()).rev() {
        let eps = exact(&x, t);
        let posterior = if t > 1 {
            ((1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t)).sqrt()
        } else {
            0.0
        };
        let z = Tensor::randn([runs, 1, 1, 1], posterior / s.sigma(t), &mut rng);
        x = ddpm_step(&x, t, &eps, &s, &z).unwrap();
    }

    let moments = |t: &Tensor| {
        let m = t.mean();
        (m, t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.numel() as f64)
    };
    let (m_ddim, v_ddim) = moments(&ddim);
    let (m_anc, v_anc) = moments(&x);
    let v_theory = chain_variance(&s, data_var, true);
    let se = v_theory * (2.0 / runs as f64).sqrt();
    assert!(m_ddim.abs() < 4.0 * (v_theory / runs as f64).sqrt(), "{m_ddim}");
    assert!(m_anc.abs() < 4.0 * (v_theory / runs as f64).sqrt(), "{m_anc}");
    assert!((v_ddim - v_theory).abs() < 4.0 * se, "ddim var {v_ddim} vs {v_theory}");
    assert!((v_anc - v_theory).abs() < 4.0 * se, "ancestral var {v_anc} vs {v_theory}");
    assert!((v_ddim - v_anc).abs() < 4.0 * se * 2f64.sqrt());
    // sigma_t^2 = beta_t gives a visibly wider law on this schedule
    assert!(chain_variance(&s, data_var, false) - v_theory > 8.0 * se);
}

proptest! {
    #[test]
    fn forward_marginal_is_homogeneous(a in -3.0f64..3.0, x in -1.0f64..1.0, e in -3.0f64..3.0, t in 1usize..=50) {
        let s = DiffusionSchedule::linear(50, 1e-3, 0.05).unwrap();
        let lhs = forward_marginal(&scalar(a * x), t, &scalar(a * e), &s).unwrap().item();
        let rhs = a * forward_marginal(&scalar(x), t, &scalar(e), &s).unwrap().item();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }
}
