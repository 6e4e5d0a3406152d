//! Finite-difference verification of every differentiable primitive and of
//! the end-to-end training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{simple_loss, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, Tape, Tensor, Var};
use crate::unet::{forward, ModelBinder, UNetConfig, UNetModel};

/// Finite-difference step used by every check.
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    /// Max relative error between analytic and numeric gradients.
    pub error: f64,
}

type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, Var, u64) -> Result<Var>>);

/// Names of the primitive checks, in the order they run.
pub const PRIMITIVES: [&str; 21] = [
    "conv2d.input",
    "conv2d.weight",
    "conv2d.bias",
    "group_norm.input",
    "group_norm.gamma",
    "group_norm.beta",
    "linear.input",
    "linear.weight",
    "matmul.rhs_transposed",
    "matmul.lhs",
    "self_attention.input",
    "self_attention.wq",
    "silu",
    "mul.broadcast",
    "add.broadcast",
    "sub",
    "upsample_nearest2x",
    "concat+transpose+reshape",
    "softmax",
    "gather_rows",
    "scale",
];

/// UNet sites probed by the end-to-end loss check: one per layer family.
pub const LOSS_SITES: [&str; 6] = [
    "out.conv.weight",
    "up.0.sampler.conv.weight",
    "mid.attn.v.weight",
    "mid.res.0.norm1.gamma",
    "time.mlp0.weight",
    "embed.class.weight",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y * r)` with a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng(seed));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn missing(site: &str) -> Error {
    Error::Config(format!("gradient suite expects UNet site {site}"))
}

fn cases() -> Vec<Case> {
    vec![
        (
            "conv2d.input",
            vec![2, 3, 5, 4],
            Box::new(|tp, x, s| {
                let w = tp.constant(Tensor::randn([2, 3, 3, 3], 0.5, &mut rng(s + 100)));
                let b = tp.constant(Tensor::randn([2], 0.5, &mut rng(s + 101)));
                let y = tp.conv2d(x, w, Some(b), 2, 1)?;
                project(tp, y, s)
            }),
        ),
        (
            "conv2d.weight",
            vec![2, 3, 3, 3],
            Box::new(|tp, w, s| {
                let x = tp.constant(Tensor::randn([2, 3, 5, 5], 1.0, &mut rng(s + 100)));
                let y = tp.conv2d(x, w, None, 1, 1)?;
                project(tp, y, s)
            }),
        ),
        (
            "conv2d.bias",
            vec![2],
            Box::new(|tp, b, s| {
                let x = tp.constant(Tensor::randn([1, 1, 4, 4], 1.0, &mut rng(s + 100)));
                let w = tp.constant(Tensor::randn([2, 1, 3, 3], 1.0, &mut rng(s + 101)));
                let y = tp.conv2d(x, w, Some(b), 1, 0)?;
                project(tp, y, s)
            }),
        ),
        (
            "group_norm.input",
            vec![2, 4, 3, 3],
            Box::new(|tp, x, s| {
                let g = tp.constant(Tensor::randn([4], 1.0, &mut rng(s + 100)));
                let b = tp.constant(Tensor::randn([4], 1.0, &mut rng(s + 101)));
                let y = tp.group_norm(x, 2, g, b, 1e-5)?;
                project(tp, y, s)
            }),
        ),
        (
            "group_norm.gamma",
            vec![4],
            Box::new(|tp, g, s| {
                let x = tp.constant(Tensor::randn([2, 4, 3, 3], 1.0, &mut rng(s + 100)));
                let b = tp.constant(Tensor::zeros([4]));
                let y = tp.group_norm(x, 2, g, b, 1e-5)?;
                project(tp, y, s)
            }),
        ),
        (
            "group_norm.beta",
            vec![4],
            Box::new(|tp, b, s| {
                let x = tp.constant(Tensor::randn([2, 4, 3, 3], 1.0, &mut rng(s + 100)));
                let g = tp.constant(Tensor::ones([4]));
                let y = tp.group_norm(x, 4, g, b, 1e-5)?;
                project(tp, y, s)
            }),
        ),
        (
            "linear.input",
            vec![3, 4],
            Box::new(|tp, x, s| {
                let w = tp.constant(Tensor::randn([5, 4], 1.0, &mut rng(s + 100)));
                let b = tp.constant(Tensor::randn([5], 1.0, &mut rng(s + 101)));
                let y = tp.linear(x, w, Some(b))?;
                project(tp, y, s)
            }),
        ),
        (
            "linear.weight",
            vec![5, 4],
            Box::new(|tp, w, s| {
                let x = tp.constant(Tensor::randn([2, 3, 4], 1.0, &mut rng(s + 100)));
                let y = tp.linear(x, w, None)?;
                project(tp, y, s)
            }),
        ),
        (
            "matmul.rhs_transposed",
            vec![2, 3, 4],
            Box::new(|tp, b, s| {
                let a = tp.constant(Tensor::randn([2, 5, 4], 1.0, &mut rng(s + 100)));
                let y = tp.matmul(a, b, true)?;
                project(tp, y, s)
            }),
        ),
        (
            "matmul.lhs",
            vec![5, 4],
            Box::new(|tp, a, s| {
                let b = tp.constant(Tensor::randn([4, 3], 1.0, &mut rng(s + 100)));
                let y = tp.matmul(a, b, false)?;
                project(tp, y, s)
            }),
        ),
        (
            "self_attention.input",
            vec![2, 4, 3],
            Box::new(|tp, x, s| {
                let w: Vec<Var> = (0..4)
                    .map(|i| tp.constant(Tensor::randn([3, 3], 0.7, &mut rng(s + 100 + i))))
                    .collect();
                let y = tp.self_attention(x, w[0], w[1], w[2], w[3])?;
                project(tp, y, s)
            }),
        ),
        (
            "self_attention.wq",
            vec![3, 3],
            Box::new(|tp, wq, s| {
                let x = tp.constant(Tensor::randn([2, 4, 3], 1.0, &mut rng(s + 99)));
                let w: Vec<Var> = (0..3)
                    .map(|i| tp.constant(Tensor::randn([3, 3], 0.7, &mut rng(s + 100 + i))))
                    .collect();
                let y = tp.self_attention(x, wq, w[0], w[1], w[2])?;
                project(tp, y, s)
            }),
        ),
        (
            "silu",
            vec![11],
            Box::new(|tp, x, s| {
                let y = tp.silu(x);
                project(tp, y, s)
            }),
        ),
        (
            "mul.broadcast",
            vec![2, 3, 1, 1],
            Box::new(|tp, b, s| {
                let a = tp.constant(Tensor::randn([2, 3, 2, 2], 1.0, &mut rng(s + 100)));
                let y = tp.mul(a, b)?;
                project(tp, y, s)
            }),
        ),
        (
            "add.broadcast",
            vec![3, 1],
            Box::new(|tp, b, s| {
                let a = tp.constant(Tensor::randn([2, 3, 4], 1.0, &mut rng(s + 100)));
                let y = tp.add(a, b)?;
                let y = tp.square(y);
                project(tp, y, s)
            }),
        ),
        (
            "sub",
            vec![2, 3],
            Box::new(|tp, a, s| {
                let b = tp.constant(Tensor::randn([2, 3], 1.0, &mut rng(s + 100)));
                let y = tp.sub(b, a)?;
                let y = tp.square(y);
                Ok(tp.mean(y))
            }),
        ),
        (
            "upsample_nearest2x",
            vec![1, 2, 3, 2],
            Box::new(|tp, x, s| {
                let y = tp.upsample_nearest2x(x)?;
                project(tp, y, s)
            }),
        ),
        (
            "concat+transpose+reshape",
            vec![1, 2, 2, 3],
            Box::new(|tp, x, s| {
                let other = tp.constant(Tensor::randn([1, 1, 2, 3], 1.0, &mut rng(s + 100)));
                let y = tp.concat_channels(&[other, x])?;
                let y = tp.reshape(y, [1, 3, 6])?;
                let y = tp.transpose_last2(y)?;
                let y = tp.square(y);
                project(tp, y, s)
            }),
        ),
        (
            "softmax",
            vec![3, 4],
            Box::new(|tp, x, s| {
                let y = tp.softmax(x)?;
                project(tp, y, s)
            }),
        ),
        (
            "gather_rows",
            vec![4, 3],
            Box::new(|tp, table, s| {
                let y = tp.gather_rows(table, &[2, 0, 2])?;
                project(tp, y, s)
            }),
        ),
        (
            "scale",
            vec![5],
            Box::new(|tp, x, s| {
                let y = tp.scale(x, -2.5);
                project(tp, y, s)
            }),
        ),
    ]
}

/// Checks every primitive once per seed.
pub fn primitive_checks(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, shape, f) in cases() {
        for seed in seeds.clone() {
            let point = Tensor::randn(shape.clone(), 1.0, &mut rng(1000 + seed));
            let error = grad_check(|tp, x| f(tp, x, seed), &point, STEP)?;
            out.push(CheckResult {
                name: name.to_string(),
                seed,
                error,
            });
        }
    }
    Ok(out)
}

/// Checks the gradient of the simple diffusion loss with respect to several
/// parameters of a small, randomly perturbed UNet.
pub fn loss_checks(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CheckResult>> {
    let sched = DiffusionSchedule::linear(20, 1e-3, 0.05)?;
    let cfg = UNetConfig {
        base_channels: 4,
        groups: 2,
        time_embed_dim: 8,
        num_classes: 2,
        ..UNetConfig::default()
    };
    let mut out = Vec::new();
    for seed in seeds {
        let mut model = UNetModel::build(cfg.clone(), seed)?;
        let mut r = rng(seed + 7);
        // the output convolution starts at zero, which would hide every
        // upstream gradient
        let out_conv = model.param_mut("out.conv.weight").ok_or_else(|| missing("out.conv.weight"))?;
        *out_conv = Tensor::randn(out_conv.shape().to_vec(), 0.3, &mut r);
        let x0 = Tensor::randn([2, 1, 4, 4], 0.5, &mut r);
        let eps = Tensor::randn([2, 1, 4, 4], 1.0, &mut r);
        let t = [1 + (seed as usize % 10), 11 + (seed as usize % 10)];
        let c = [1, 2];
        for site in LOSS_SITES {
            let point = model.param(site).ok_or_else(|| missing(site))?.clone();
            let error = grad_check(
                |tape, p| {
                    simple_loss(tape, &sched, &x0, &t, &eps, |tp, xt| {
                        let mut b = ModelBinder::new(&model, false).with_override(site, p);
                        forward(tp, model.config(), &mut b, xt, &t, &c)
                    })
                },
                &point,
                STEP,
            )?;
            out.push(CheckResult {
                name: format!("simple_loss/{site}"),
                seed,
                error,
            });
        }
    }
    Ok(out)
}

/// Primitive and end-to-end checks over the given seeds.
pub fn full_suite(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(seeds.clone())?;
    out.extend(loss_checks(seeds)?);
    Ok(out)
}
