//! Finite-difference checks of every analytic gradient.

use gmmlab_core::attention::{AttentionWeights, GmmParams, MaskParams, MaskPlacement};
use gmmlab_core::data::Sample;
use gmmlab_core::gradcheck::{
    check_attention_grads, check_mask_grads, check_model_grads, jitter, max_error, CheckOptions, DEFAULT_TOLERANCE,
};
use gmmlab_core::mask::{init_kernels, GaussianKernel, KernelInit, DEFAULT_EPSILON};
use gmmlab_core::model::{MaskMode, ModelConfig, TinyViT};
use gmmlab_core::numerics::{Matrix, Rng};

fn random_matrix(r: usize, c: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
}

fn small_kernels(rng: &mut Rng, k: usize) -> Vec<GaussianKernel> {
    (0..k)
        .map(|_| GaussianKernel::new(rng.uniform_range(-2.0, 2.0), rng.uniform_range(0.3, 4.0)))
        .collect()
}

#[test]
fn mixture_gradients_over_random_trials() {
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = Rng::derive(trial, 5);
        let g = [2, 3, 4][trial as usize % 3];
        let k = [1, 3, 5][(trial as usize / 3) % 3];
        let ks = small_kernels(&mut rng, k);
        let r = random_matrix(g * g, g * g, &mut rng);
        let errs = check_mask_grads(&ks, g, DEFAULT_EPSILON, &r, &CheckOptions::default()).unwrap();
        worst = worst.max(max_error(&errs));
    }
    assert!(worst < DEFAULT_TOLERANCE, "worst relative error {worst}");
}

#[test]
fn attention_gradients_all_mask_modes() {
    for seed in 0..5u64 {
        for (n, g) in [(4usize, 2usize), (9, 3)] {
            for heads in [1usize, 2] {
                for k in [1usize, 3] {
                    let mut rng = Rng::derive(seed, 77);
                    let d = 4;
                    let masks = [
                        MaskParams::None,
                        MaskParams::Gmm(
                            GmmParams::from_kernels(
                                g,
                                DEFAULT_EPSILON,
                                &(0..heads).map(|_| small_kernels(&mut rng, k)).collect::<Vec<_>>(),
                            )
                            .unwrap(),
                        ),
                        MaskParams::Elm(Matrix::from_fn(n, n, |_, _| 1.0 + rng.normal(0.0, 0.3))),
                    ];
                    for mask in masks {
                        for placement in [MaskPlacement::PreSoftmax, MaskPlacement::PostSoftmax] {
                            let mut w = AttentionWeights::random(d, heads, 0.5, mask.clone(), &mut rng).unwrap();
                            w.placement = placement;
                            let x = random_matrix(n, d, &mut rng);
                            let r = random_matrix(n, d, &mut rng);
                            let errs = check_attention_grads(&w, &x, &r, &CheckOptions::default()).unwrap();
                            let e = max_error(&errs);
                            assert!(e < DEFAULT_TOLERANCE, "seed {seed} n {n} h {heads} k {k}: {errs:?}");
                        }
                    }
                }
            }
        }
    }
}

fn toy_batch(cfg: &ModelConfig, count: usize, rng: &mut Rng) -> Vec<Sample> {
    let s = cfg.image_side;
    (0..count)
        .map(|i| Sample {
            image: (0..cfg.channels * s * s).map(|_| rng.uniform()).collect(),
            label: i % cfg.classes,
            channels: cfg.channels,
            side: s,
        })
        .collect()
}

#[test]
fn full_model_gradients_all_mask_modes() {
    for mode in [MaskMode::None, MaskMode::Gmm, MaskMode::Elm] {
        for share_heads in [false, true] {
            let cfg = ModelConfig {
                image_side: 4,
                channels: 1,
                patch: 2,
                dim: 8,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                classes: 3,
                mask: mode,
                kernels: 2,
                share_heads,
                ..ModelConfig::default()
            };
            let mut rng = Rng::new(11);
            let mut model = TinyViT::new(&cfg, &mut rng).unwrap();
            jitter(model.tensors_mut(), 0.1, &mut rng);
            let batch = toy_batch(&cfg, 3, &mut rng);
            let errs = check_model_grads(&model, &batch, &CheckOptions::default()).unwrap();
            assert!(max_error(&errs) < DEFAULT_TOLERANCE, "{mode:?}: {errs:?}");
        }
    }
}

#[test]
fn kernels_from_paper_init_also_check() {
    // σ drawn around 10 gives nearly flat masks; gradients must still agree
    let mut rng = Rng::new(2);
    let ks = init_kernels(&mut rng, 5, KernelInit::default());
    let r = random_matrix(16, 16, &mut rng);
    let errs = check_mask_grads(&ks, 4, DEFAULT_EPSILON, &r, &CheckOptions::default()).unwrap();
    assert!(max_error(&errs) < DEFAULT_TOLERANCE, "{errs:?}");
}
