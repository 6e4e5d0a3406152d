use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn small_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        base_channels: 4,
        channel_mults: vec![1, 2],
        num_res_blocks_per_level: 1,
        groups: 2,
        attn_at_bottleneck: true,
        time_embed_dim: 8,
        num_classes: 2,
        null_class_reserved: true,
    }
}

/// A model whose output convolution is no longer zero.
fn live_model(cfg: UNetConfig, seed: u64) -> UNetModel {
    let mut m = UNetModel::build(cfg, seed).unwrap();
    let shape = m.param("out.conv.weight").unwrap().shape().to_vec();
    let w = Tensor::randn(shape, 0.3, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    *m.param_mut("out.conv.weight").unwrap() = w;
    m
}

fn input(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn build_is_deterministic() {
    let a = UNetModel::build(UNetConfig::default(), 7).unwrap();
    let b = UNetModel::build(UNetConfig::default(), 7).unwrap();
    for (k, v) in a.params() {
        let w = b.param(k).unwrap();
        assert!(v.data().iter().zip(w.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{k}");
    }
    let c = UNetModel::build(UNetConfig::default(), 8).unwrap();
    assert_ne!(a.param("down.0.res.0.conv1.weight"), c.param("down.0.res.0.conv1.weight"));
}

#[test]
fn two_level_config_has_one_sampler_each_way() {
    let cfg = UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        num_res_blocks_per_level: 2,
        ..UNetConfig::default()
    };
    let m = UNetModel::build(cfg, 0).unwrap();
    let sites = m.list_sites(SiteSelector::All);
    assert_eq!(sites.iter().filter(|s| *s == "down.0.sampler.conv.weight").count(), 1);
    assert_eq!(sites.iter().filter(|s| *s == "up.0.sampler.conv.weight").count(), 1);
    assert_eq!(
        m.list_sites(SiteSelector::SamplerConvs),
        vec!["down.0.sampler.conv.weight", "up.0.sampler.conv.weight"]
    );
}

#[test]
fn fresh_model_predicts_zero() {
    let m = UNetModel::build(UNetConfig::default(), 3).unwrap();
    let y = m.forward(&input([2, 1, 16, 16], 1), &[5, 40], &[0, 3]).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_shape_follows_input_including_non_square() {
    let m = live_model(small_config(), 4);
    for (h, w) in [(16, 16), (24, 16), (8, 20)] {
        let y = m.forward(&input([1, 1, h, w], 2), &[3], &[1]).unwrap();
        assert_eq!(y.shape(), &[1, 1, h, w]);
    }
}

#[test]
fn indivisible_resolution_names_divisor() {
    let cfg = UNetConfig {
        channel_mults: vec![1, 1, 2],
        ..small_config()
    };
    let m = UNetModel::build(cfg, 0).unwrap();
    match m.forward(&input([1, 1, 12, 10], 0), &[1], &[0]) {
        Err(Error::Resolution { divisor, .. }) => assert_eq!(divisor, 4),
        other => panic!("expected resolution error, got {other:?}"),
    }
    assert!(m.forward(&input([1, 1, 12, 8], 0), &[1], &[0]).is_ok());
}

#[test]
fn rejects_out_of_range_class() {
    let m = UNetModel::build(small_config(), 0).unwrap();
    assert!(m.forward(&input([1, 1, 8, 8], 0), &[1], &[2]).is_ok());
    assert!(matches!(
        m.forward(&input([1, 1, 8, 8], 0), &[1], &[3]),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_gradient_matches_finite_differences() {
    let model = live_model(small_config(), 11);
    let x = input([2, 1, 8, 8], 12);
    for site in ["down.0.sampler.conv.weight", "mid.res.0.conv1.weight", "up.0.res.0.norm1.gamma"] {
        let point = model.param(site).unwrap().clone();
        let err = grad_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let mut binder = ModelBinder::new(&model, false).with_override(site, p);
                let y = forward(tape, model.config(), &mut binder, xv, &[4, 17], &[0, 2])?;
                Ok(tape.sum(y))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "{site}: {err}");
    }
}

#[test]
fn time_embedding_examples() {
    let e = time_embedding(0, 6).unwrap();
    assert_eq!(&e.data()[..3], &[0.0; 3]);
    assert_eq!(&e.data()[3..], &[1.0; 3]);
    let e = time_embedding(1, 2).unwrap();
    assert!((e.data()[0] - 0.8414710).abs() < 1e-7);
    assert!((e.data()[1] - 0.5403023).abs() < 1e-7);
    assert_eq!(time_embedding(9, 8).unwrap(), time_embedding(9, 8).unwrap());
    assert_ne!(time_embedding(9, 8).unwrap(), time_embedding(10, 8).unwrap());
    assert!(time_embedding(1, 3).is_err());
}

#[test]
fn selectors_partition_and_resolve() {
    let m = UNetModel::build(UNetConfig::default(), 0).unwrap();
    let all: BTreeSet<String> = m.list_sites(SiteSelector::All).into_iter().collect();
    let sampler = m.list_sites(SiteSelector::SamplerConvs);
    let norms = m.list_sites(SiteSelector::ResnetNorms);
    let attn = m.list_sites(SiteSelector::AttentionProjections);
    assert_eq!(sampler.len(), 2);
    assert_eq!(attn, vec!["mid.attn.k.weight", "mid.attn.o.weight", "mid.attn.q.weight", "mid.attn.v.weight"]);
    for list in [&sampler, &norms, &attn] {
        let mut sorted = list.clone();
        sorted.sort();
        assert_eq!(&sorted, list);
        for s in list.iter() {
            assert!(all.contains(s));
            assert!(m.param(s).is_some());
        }
    }
    assert!(sampler.iter().all(|s| !norms.contains(s)));
    assert!(norms.iter().all(|s| s.contains(".res.") && !s.starts_with("out.")));
    // 6 resnet blocks, two norms each, gamma and beta
    assert_eq!(norms.len(), 6 * 2 * 2);

    let no_attn = UNetModel::build(
        UNetConfig {
            attn_at_bottleneck: false,
            ..UNetConfig::default()
        },
        0,
    )
    .unwrap();
    assert!(no_attn.list_sites(SiteSelector::AttentionProjections).is_empty());
}

#[test]
fn forward_reads_every_parameter() {
    let m = UNetModel::build(UNetConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(input([1, 1, 8, 8], 0));
    let mut binder = ModelBinder::new(&m, false);
    forward(&mut tape, m.config(), &mut binder, x, &[1], &[0]).unwrap();
    let bound: Vec<&String> = binder.bound().keys().collect();
    let params: Vec<&String> = m.params().keys().collect();
    assert_eq!(bound, params);
}

#[test]
fn frozen_flags_do_not_change_outputs() {
    let mut m = live_model(small_config(), 5);
    let x = input([1, 1, 8, 8], 6);
    let before = m.forward(&x, &[9], &[1]).unwrap();
    m.freeze_all();
    assert_eq!(m.frozen_params(), m.param_count());
    assert_eq!(m.forward(&x, &[9], &[1]).unwrap(), before);
}

#[test]
fn invalid_configs_are_rejected() {
    let one_level = UNetConfig {
        channel_mults: vec![1],
        ..small_config()
    };
    assert!(matches!(UNetModel::build(one_level, 0), Err(Error::Config(_))));
    let odd = UNetConfig {
        time_embed_dim: 7,
        ..small_config()
    };
    assert!(UNetModel::build(odd, 0).is_err());
    let bad_groups = UNetConfig {
        base_channels: 6,
        groups: 4,
        ..small_config()
    };
    assert!(matches!(UNetModel::build(bad_groups, 0), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_shape_equals_input_shape(hm in 1usize..6, wm in 1usize..6, seed in 0u64..100) {
        let m = live_model(small_config(), seed);
        let (h, w) = (2 * hm, 2 * wm);
        let y = m.forward(&input([1, 1, h, w], seed), &[1], &[0]).unwrap();
        prop_assert_eq!(y.shape(), &[1, 1, h, w]);
    }
}
