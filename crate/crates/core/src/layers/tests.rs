use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_diff_grad, relative_error};

const FD_STEP: f32 = 1e-2;
const GRAD_TOL: f64 = 1e-3;

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-scale..scale))
}

/// Params with every tensor randomized, so zero-initialized parts are exercised too.
fn random_params(cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> LayerParams {
    LayerParams {
        tensors: cfg
            .tensor_specs()
            .iter()
            .map(|s| match s.role {
                TensorRole::Scale => Tensor::from_fn(&s.dims, |_| 1.0 + rng.gen_range(-0.3..0.3)),
                _ => uniform(&s.dims, rng, 0.5),
            })
            .collect(),
    }
}

fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

/// Checks input and parameter gradients of one layer against central differences.
fn gradient_check(cfg: &LayerConfig, x: &Tensor, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(cfg, &mut rng);
    let (y, cache) = forward(cfg, &params, x, true).unwrap();
    let probe = uniform(y.dims(), &mut rng, 1.0);
    let mut grads = params.zeros_like();
    let need_dx = cfg.kind != LayerKind::PatchEmbed;
    let dx = backward(
        cfg,
        &params,
        cache.as_ref().unwrap(),
        x.dims(),
        &probe,
        Some(&mut grads),
        need_dx,
    )
    .unwrap();

    if let Some(dx) = dx {
        let fd = finite_diff_grad(
            |xx| weighted_sum(&forward(cfg, &params, xx, false).unwrap().0, &probe),
            x,
            FD_STEP,
        );
        let err = relative_error(dx.data(), fd.data(), 1e-6);
        assert!(err <= GRAD_TOL, "{:?} dx seed {seed}: {err}", cfg.kind);
    }
    for (i, g) in grads.tensors.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                p.tensors[i] = t.clone();
                weighted_sum(&forward(cfg, &p, x, false).unwrap().0, &probe)
            },
            &params.tensors[i],
            FD_STEP,
        );
        let err = relative_error(g.data(), fd.data(), 1e-6);
        assert!(
            err <= GRAD_TOL,
            "{:?} param {i} seed {seed}: {err}",
            cfg.kind
        );
    }
}

#[test]
fn gradient_check_every_kind_over_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let seq = uniform(&[2, 5, 8], &mut rng, 1.0);
        gradient_check(
            &LayerConfig::patch_embed(2, 2, 8),
            &uniform(&[2, 4, 4, 2], &mut rng, 1.0),
            seed,
        );
        gradient_check(
            &LayerConfig::class_token(8),
            &uniform(&[2, 4, 8], &mut rng, 1.0),
            seed,
        );
        gradient_check(&LayerConfig::pos_embed(2, 8), &seq, seed);
        gradient_check(&LayerConfig::pos_embed(3, 8), &seq, seed);
        gradient_check(&LayerConfig::transformer_block(8, 2, 16), &seq, seed);
        gradient_check(&LayerConfig::residual_adapter(8, 8), &seq, seed);
        gradient_check(&LayerConfig::head(8, 3), &seq, seed);
    }
}

#[test]
fn transformer_block_backward_on_single_3x8_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = uniform(&[1, 3, 8], &mut rng, 1.0);
    gradient_check(&LayerConfig::transformer_block(8, 2, 32), &x, 77);
}

#[test]
fn vit_ti16_parameter_counts() {
    assert_eq!(param_count(&LayerConfig::patch_embed(16, 3, 192)), 147_648);
    assert_eq!(param_count(&LayerConfig::class_token(192)), 192);
    assert_eq!(param_count(&LayerConfig::pos_embed(2, 192)), 960);
    assert_eq!(
        param_count(&LayerConfig::transformer_block(192, 3, 768)),
        444_864
    );
    assert_eq!(param_count(&LayerConfig::residual_adapter(192, 32)), 12_896);
}

#[test]
fn patch_embed_cases() {
    let cfg = LayerConfig::patch_embed(16, 3, 192);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = init_layer(&cfg, &mut rng, InitMode::Random);
    let img = Tensor::filled(&[32, 32, 3], 0.5);
    assert_eq!(
        patch_embed_forward(&cfg, &p, &img).unwrap().dims(),
        &[4, 192]
    );

    let zero = init_layer(&cfg, &mut rng, InitMode::Zero);
    assert!(patch_embed_forward(&cfg, &zero, &img)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let scalar = LayerConfig::patch_embed(1, 1, 1);
    let p = LayerParams {
        tensors: vec![Tensor::filled(&[1, 1], 2.0), Tensor::filled(&[1], 1.0)],
    };
    let out = patch_embed_forward(&scalar, &p, &Tensor::filled(&[1, 1, 1], 3.0)).unwrap();
    assert_eq!(out.data(), &[7.0]);

    let bad = Tensor::zeros(&[30, 32, 3]);
    assert!(matches!(
        patch_embed_forward(&cfg, &zero, &bad),
        Err(Error::Shape(_))
    ));
}

#[test]
fn patch_embed_flattens_patches_row_major() {
    // 4×4 single-channel image, 2×2 patches, hidden 1 with weights [1, 10, 100, 1000].
    let cfg = LayerConfig::patch_embed(2, 1, 1);
    let p = LayerParams {
        tensors: vec![
            Tensor::new(vec![4, 1], vec![1.0, 10.0, 100.0, 1000.0]).unwrap(),
            Tensor::zeros(&[1]),
        ],
    };
    let img = Tensor::from_fn(&[4, 4, 1], |i| i as f32);
    let out = patch_embed_forward(&cfg, &p, &img).unwrap();
    // Top-left patch holds pixels 0,1,4,5.
    assert_eq!(out.data()[0], 0.0 + 10.0 + 400.0 + 5000.0);
    // Bottom-right patch holds 10,11,14,15.
    assert_eq!(out.data()[3], 10.0 + 110.0 + 1400.0 + 15000.0);
}

#[test]
fn class_token_cases() {
    let cfg = LayerConfig::class_token(192);
    let zero = init_layer(&cfg, &mut ChaCha8Rng::seed_from_u64(0), InitMode::Zero);
    let tokens = Tensor::filled(&[4, 192], 1.0);
    let out = class_token_prepend(&cfg, &zero, &tokens).unwrap();
    assert_eq!(out.dims(), &[5, 192]);
    assert!(out.row(0).iter().all(|&v| v == 0.0));
    assert!(out.row(1).iter().all(|&v| v == 1.0));
    let again = class_token_prepend(&cfg, &zero, &out).unwrap();
    assert_eq!(again.dims()[0], out.dims()[0] + 1);
    assert!(class_token_prepend(&cfg, &zero, &Tensor::zeros(&[4, 8])).is_err());
}

#[test]
fn pos_embed_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LayerConfig::pos_embed(2, 4);
    let tokens = uniform(&[5, 4], &mut rng, 1.0);
    let zero = init_layer(&cfg, &mut rng, InitMode::Zero);
    assert_eq!(pos_embed_add(&cfg, &zero, &tokens).unwrap(), tokens);

    let p = init_layer(&cfg, &mut rng, InitMode::Random);
    let out = pos_embed_add(&cfg, &p, &tokens).unwrap();
    for (i, v) in out.data().iter().enumerate() {
        assert_eq!(*v, tokens.data()[i] + p.tensors[0].data()[i]);
    }

    // Constant field survives upsampling exactly; class slot kept verbatim.
    let mut emb = Tensor::filled(&[5, 4], 0.37);
    emb.data_mut()[..4].copy_from_slice(&[9.0, 8.0, 7.0, 6.0]);
    let p = LayerParams { tensors: vec![emb] };
    let out = pos_embed_add(&cfg, &p, &Tensor::zeros(&[17, 4])).unwrap();
    assert_eq!(out.row(0), &[9.0, 8.0, 7.0, 6.0]);
    for r in 1..17 {
        assert!(
            out.row(r).iter().all(|&v| v == 0.37),
            "row {r}: {:?}",
            out.row(r)
        );
    }
}

#[test]
fn bilinear_resampling_matches_hand_interpolation() {
    // 2×2 grid of scalars [[0, 1], [2, 3]] upsampled to 4×4 with half-pixel centres:
    // axis coordinates for 4 outputs are -0.25, 0.25, 0.75, 1.25 → clamped.
    let grid = [0.0f32, 1.0, 2.0, 3.0];
    let out = bilinear_resample_grid(&grid, 2, 4, 1);
    let coord = [0.0f64, 0.25, 0.75, 1.0];
    for oy in 0..4 {
        for ox in 0..4 {
            let expect = 2.0 * coord[oy] + coord[ox];
            assert!((out[oy * 4 + ox] as f64 - expect).abs() < 1e-6);
        }
    }
    assert_eq!(bilinear_resample_grid(&grid, 2, 2, 1), grid.to_vec());
}

#[test]
fn transformer_block_identity_with_zero_projections() {
    let cfg = LayerConfig::transformer_block(8, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = init_layer(&cfg, &mut rng, InitMode::Random);
    for i in [4, 5, 10, 11] {
        p.tensors[i] = Tensor::zeros(p.tensors[i].dims());
    }
    let x = uniform(&[6, 8], &mut rng, 2.0);
    assert_eq!(transformer_block_forward(&cfg, &p, &x).unwrap(), x);
}

#[test]
fn fresh_adapter_is_identity() {
    let cfg = LayerConfig::residual_adapter(16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = init_layer(&cfg, &mut rng, InitMode::Random);
    for _ in 0..10 {
        let x = uniform(&[7, 16], &mut rng, 3.0);
        assert_eq!(residual_adapter_forward(&cfg, &p, &x).unwrap(), x);
    }
}

#[test]
fn head_cases() {
    let cfg = LayerConfig::head(4, 3);
    let zero = init_layer(&cfg, &mut ChaCha8Rng::seed_from_u64(0), InitMode::Random);
    assert!(zero
        .tensors
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 0.0)));
    let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    assert!(head_forward(&cfg, &zero, &x)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let cfg = LayerConfig::head(2, 2);
    let p = LayerParams {
        tensors: vec![
            Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
            Tensor::zeros(&[2]),
        ],
    };
    let x = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
    assert_eq!(head_forward(&cfg, &p, &x).unwrap().data(), x.data());
    assert!(head_forward(&cfg, &p, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn init_is_deterministic_and_zero_rules_hold() {
    let cfg = LayerConfig::residual_adapter(8, 16);
    let a = init_layer(&cfg, &mut ChaCha8Rng::seed_from_u64(42), InitMode::Random);
    let b = init_layer(&cfg, &mut ChaCha8Rng::seed_from_u64(42), InitMode::Random);
    assert_eq!(a, b);
    assert!(a.tensors[4].data().iter().all(|&v| v == 0.0));
    assert!(a.tensors[0].data().iter().all(|&v| v == 1.0));
    assert!(a.tensors[2].data().iter().any(|&v| v != 0.0));
}

#[test]
fn truncated_normal_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws: Vec<f32> = (0..100_000)
        .map(|_| truncated_normal(&mut rng, INIT_STD))
        .collect();
    let mean = draws.iter().map(|&v| v as f64).sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() < 0.005);
    assert!(draws.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
}

#[test]
fn validate_rejects_bad_configs() {
    assert!(LayerConfig::transformer_block(10, 3, 8).validate().is_err());
    assert!(LayerConfig::residual_adapter(8, 12).validate().is_err());
    assert!(LayerConfig::pos_embed(0, 8).validate().is_err());
    assert!(LayerConfig::head(8, 1).validate().is_err());
    assert!(LayerConfig::transformer_block(192, 3, 768)
        .validate()
        .is_ok());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn any_config() -> impl Strategy<Value = LayerConfig> {
        let heads = 1usize..4;
        prop_oneof![
            (1usize..5, 1usize..4, 1usize..16)
                .prop_map(|(ps, c, h)| LayerConfig::patch_embed(ps, c, h)),
            (1usize..32).prop_map(LayerConfig::class_token),
            (1usize..5, 1usize..16).prop_map(|(g, h)| LayerConfig::pos_embed(g, h)),
            (heads, 1usize..6, 1usize..40).prop_map(|(n, k, m)| LayerConfig::transformer_block(
                n * k,
                n,
                m
            )),
            (1usize..24, 0usize..5)
                .prop_map(|(h, i)| LayerConfig::residual_adapter(h, ADAPTER_DIMS[i])),
            (1usize..16, 2usize..12).prop_map(|(h, c)| LayerConfig::head(h, c)),
        ]
    }

    proptest! {
        #[test]
        fn param_count_matches_allocation(cfg in any_config(), seed in any::<u64>()) {
            let p = init_layer(&cfg, &mut ChaCha8Rng::seed_from_u64(seed), InitMode::Random);
            prop_assert_eq!(param_count(&cfg), p.scalar_count());
            prop_assert!(p.check_shapes(&cfg).is_ok());
        }
    }
}
