use super::*;
use crate::adapters::attach_resadapter;
use crate::diffusion::ddim_sample;
use crate::unet::UNetConfig;

fn sched() -> DiffusionSchedule {
    DiffusionSchedule::linear(50, 1e-3, 0.05).unwrap()
}

fn small_config() -> UNetConfig {
    UNetConfig {
        base_channels: 4,
        groups: 2,
        time_embed_dim: 8,
        ..UNetConfig::default()
    }
}

/// Live model with a randomly filled bundle.
fn adapted_pair(seed: u64) -> (UNetModel, ResAdapterBundle) {
    let mut m = UNetModel::build(small_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = m.param("out.conv.weight").unwrap().shape().to_vec();
    *m.param_mut("out.conv.weight").unwrap() = Tensor::randn(shape, 0.3, &mut rng);
    let mut b = attach_resadapter(&mut m, 2, seed).unwrap();
    let names: Vec<String> = b.tensors().keys().cloned().collect();
    for n in names {
        let t = b.tensor_mut(&n).unwrap();
        *t = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng);
    }
    (m, b)
}

fn quick_spec() -> EvalSpec {
    EvalSpec {
        buckets: vec![(8, 8), (16, 16), (8, 16)],
        n_batches: 2,
        batch_size: 4,
        seed: 9,
    }
}

#[test]
fn oracle_predictor_has_zero_loss() {
    let ds = SyntheticDataset::default();
    for b in quick_spec().buckets {
        let l = heldout_loss_with(&sched(), &ds, b, &quick_spec(), |d| Ok(d.eps.clone())).unwrap();
        assert_eq!(l, 0.0);
    }
}

#[test]
fn fresh_model_loss_is_noise_energy() {
    let m = UNetModel::build(UNetConfig::default(), 0).unwrap();
    let spec = EvalSpec {
        buckets: vec![(16, 16), (32, 32)],
        ..EvalSpec::default()
    };
    let r = multires_eval(&m, None, &sched(), &SyntheticDataset::default(), &spec).unwrap();
    for b in &spec.buckets {
        let v = r.value(*b, "base", HELDOUT_LOSS).unwrap();
        assert!((v - 1.0).abs() <= 0.05, "{v}");
    }
    assert_eq!(r.meta.model_fingerprint, format!("{:016x}", m.fingerprint()));
}

#[test]
fn fresh_bundle_does_not_change_eval() {
    let mut m = UNetModel::build(small_config(), 1).unwrap();
    let shape = m.param("out.conv.weight").unwrap().shape().to_vec();
    *m.param_mut("out.conv.weight").unwrap() = Tensor::randn(shape, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
    let plain = multires_eval(&m, None, &sched(), &SyntheticDataset::default(), &quick_spec()).unwrap();
    let b = attach_resadapter(&mut m, 2, 0).unwrap();
    let r = multires_eval(&m, Some(&b), &sched(), &SyntheticDataset::default(), &quick_spec()).unwrap();
    for bucket in quick_spec().buckets {
        let base = r.value(bucket, "base", HELDOUT_LOSS).unwrap();
        assert_eq!(base, plain.value(bucket, "base", HELDOUT_LOSS).unwrap());
        assert_eq!(base, r.value(bucket, "base+resadapter", HELDOUT_LOSS).unwrap());
    }
    assert_eq!(r.to_jsonl().lines().count(), 2 * 3 + 1);
    assert!(r.to_table().contains("base+resadapter"));
}

#[test]
fn empty_bucket_list_is_an_error() {
    let m = UNetModel::build(small_config(), 0).unwrap();
    let spec = EvalSpec {
        buckets: vec![],
        ..quick_spec()
    };
    assert!(multires_eval(&m, None, &sched(), &SyntheticDataset::default(), &spec).is_err());
}

#[test]
fn ablation_grid_shape_and_identities() {
    let (m, b) = adapted_pair(2);
    let modes = [
        AdapterModes {
            conv_lora: true,
            norm_deltas: false,
        },
        AdapterModes {
            conv_lora: false,
            norm_deltas: true,
        },
        AdapterModes::BOTH,
    ];
    let spec = quick_spec();
    let ds = SyntheticDataset::default();
    let grid = ablation_grid(&m, &b, &modes, &[0.0, 0.5, 1.0], &sched(), &ds, &spec).unwrap();
    assert_eq!(grid.variants().len(), 9 + 1);
    let full = multires_eval(&m, Some(&b), &sched(), &ds, &spec).unwrap();
    for bucket in spec.buckets {
        let base = grid.value(bucket, "base", HELDOUT_LOSS).unwrap();
        for m in modes {
            assert_eq!(grid.value(bucket, &ablation_label(m, 0.0), HELDOUT_LOSS).unwrap(), base);
        }
        assert_eq!(
            grid.value(bucket, "conv_lora+norm_delta@1", HELDOUT_LOSS).unwrap(),
            full.value(bucket, "base+resadapter", HELDOUT_LOSS).unwrap()
        );
    }
}

#[test]
fn tile_layout() {
    assert_eq!(tile_starts(32, 16, 8), vec![0, 8, 16]);
    assert_eq!(tile_starts(24, 16, 8), vec![0, 8]);
    assert_eq!(tile_starts(16, 16, 16), vec![0]);
    assert_eq!(tile_starts(40, 16, 11), vec![0, 11, 22, 24]);
    assert_eq!(tile_count((32, 32), (16, 16), 8).unwrap(), 9);
    for (target, tile, overlap) in [((32, 32), (16, 16), 8), ((40, 24), (16, 8), 5), ((16, 16), (16, 16), 0)] {
        let w = blend_weights(target, tile, overlap).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() <= 1e-12));
    }
    assert!(blend_weights((8, 8), (16, 16), 0).is_err());
    assert!(blend_weights((32, 32), (16, 16), 16).is_err());
}

#[test]
fn single_tile_matches_direct_sampling() {
    let (m, b) = adapted_pair(4);
    let view = b.apply(&m).unwrap();
    let cfg = SamplerConfig {
        steps: 5,
        ..SamplerConfig::default()
    };
    let direct = ddim_sample(&view, [1, 1, 16, 16], &cfg, 1, &sched()).unwrap();
    let tiled = tiled_generate(&view, &sched(), (16, 16), (16, 16), 0, &cfg, 1).unwrap();
    assert!(direct.data().iter().zip(tiled.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let big = tiled_generate(&view, &sched(), (16, 24), (8, 8), 4, &cfg, 1).unwrap();
    assert_eq!(big.shape(), &[1, 1, 16, 24]);
    assert!(tiled_generate(&view, &sched(), (8, 8), (16, 16), 0, &cfg, 1).is_err());
    assert!(matches!(
        tiled_generate(&view, &sched(), (16, 16), (5, 5), 2, &cfg, 1),
        Err(Error::Resolution { .. })
    ));
}

#[test]
fn degenerate_benchmark_is_balanced() {
    let (m, _) = adapted_pair(5);
    let cfg = SamplerConfig {
        steps: 4,
        ..SamplerConfig::default()
    };
    let r = bench_latency(&m, &sched(), (16, 16), (16, 16), 0, &cfg, 0, 5).unwrap();
    assert_eq!(r.tiles_per_step, 1);
    assert_eq!(r.direct_runs_ms.len(), 5);
    assert!(r.ratio > 1.0 / 1.5 && r.ratio < 1.5, "{r:?}");
}

#[test]
fn style_shift_of_zero_bundle_is_zero() {
    let (m, b) = adapted_pair(6);
    let ds = SyntheticDataset::default();
    let probes = make_probes(&ds, &sched(), 16, 2, 2, 1).unwrap();
    assert_eq!(probes.len(), 2);
    let zero = b.with_alpha(0.0).unwrap();
    assert_eq!(style_shift(&m, &zero.apply(&m).unwrap(), &probes).unwrap(), 0.0);
    let mut last = 0.0;
    for a in [0.25, 0.5, 1.0] {
        let s = style_shift(&m, &b.with_alpha(a).unwrap().apply(&m).unwrap(), &probes).unwrap();
        assert!(s > 0.0);
        last = s.max(last);
    }
    assert!(last > 0.0);
}
