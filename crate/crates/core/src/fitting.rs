//! Fitting a Gaussian mixture mask to a dense target mask.
//!
//! The objective is the mean squared error in unfolded mask space,
//! `L = Σ_ij (M_ij − T_ij)² / N²`, minimized over every `(α_k, σ_k)` with
//! AdamW (no weight decay) under a cosine learning-rate decay. Kernel
//! permutations and σ sign flips leave `L` unchanged, so only mask-space
//! error is ever reported.

use crate::error::{Error, Result};
use crate::mask::{grid_side_for, init_kernels, mask_param_grads, unfold_mask, GaussianKernel, KernelInit, DEFAULT_EPSILON};
use crate::numerics::{cosine_lr, AdamW, AdamWState, Matrix, ParamSlot, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate at the last step, as a fraction of `lr`.
    pub final_lr_fraction: f64,
    pub restarts: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub init: KernelInit,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 5000,
            lr: 1.0,
            final_lr_fraction: 0.01,
            restarts: 3,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            init: KernelInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kernels: Vec<GaussianKernel>,
    /// Mask-space MSE before each optimizer step.
    pub losses: Vec<f64>,
    /// RMSE of the returned kernels against the target.
    pub rmse: f64,
    /// Which restart produced this result.
    pub restart: usize,
}

fn target_grid(target: &Matrix) -> Result<usize> {
    if !target.is_square() {
        return Err(Error::InvalidArgument(format!(
            "target mask must be square, got {:?}",
            target.shape()
        )));
    }
    grid_side_for(target.rows())
}

/// Mask-space mean squared error of `kernels` against `target`.
pub fn mask_mse(kernels: &[GaussianKernel], target: &Matrix, epsilon: f64) -> Result<f64> {
    let g = target_grid(target)?;
    let m = unfold_mask(kernels, g, epsilon)?;
    let n2 = (target.rows() * target.cols()) as f64;
    Ok(m.sub(target)?.as_slice().iter().map(|d| d * d).sum::<f64>() / n2)
}

pub fn mask_rmse(kernels: &[GaussianKernel], target: &Matrix, epsilon: f64) -> Result<f64> {
    Ok(mask_mse(kernels, target, epsilon)?.sqrt())
}

/// Single-start fit from kernels drawn with `rng`.
pub fn fit_gmm_to_elm(target: &Matrix, k: usize, opts: &FitOptions, rng: &mut Rng) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("fitting needs at least one kernel".into()));
    }
    let g = target_grid(target)?;
    let start = init_kernels(rng, k, opts.init);
    fit_from(target, g, start, opts)
}

fn fit_from(target: &Matrix, g: usize, start: Vec<GaussianKernel>, opts: &FitOptions) -> Result<FitResult> {
    let n2 = (target.rows() * target.cols()) as f64;
    let adam = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut state = AdamWState::default();
    let mut flat: Vec<f64> = start.iter().flat_map(|k| [k.alpha, k.sigma]).collect();
    let kernels_of = |flat: &[f64]| -> Vec<GaussianKernel> {
        flat.chunks_exact(2).map(|p| GaussianKernel::new(p[0], p[1])).collect()
    };
    let mut losses = Vec::with_capacity(opts.steps);
    let min_lr = opts.lr * opts.final_lr_fraction;
    for step in 0..opts.steps {
        let kernels = kernels_of(&flat);
        let residual = unfold_mask(&kernels, g, opts.epsilon)?.sub(target)?;
        losses.push(residual.as_slice().iter().map(|d| d * d).sum::<f64>() / n2);
        let upstream = residual.scale(2.0 / n2);
        let grads = mask_param_grads(&kernels, g, opts.epsilon, &upstream)?;
        let grad_flat: Vec<f64> = grads.iter().flat_map(|g| [g.d_alpha, g.d_sigma]).collect();
        let lr = cosine_lr(step as u64, opts.steps as u64, opts.lr, min_lr)?;
        adam.step(
            &mut state,
            &mut [ParamSlot {
                value: &mut flat,
                grad: &grad_flat,
                decay: false,
            }],
            lr,
        )?;
    }
    let kernels = kernels_of(&flat);
    let rmse = mask_rmse(&kernels, target, opts.epsilon)?;
    Ok(FitResult {
        kernels,
        losses,
        rmse,
        restart: 0,
    })
}

/// Best of `opts.restarts` independent fits (at least one); restart `r`
/// draws its start from stream `r` of `opts.seed`. Ties keep the lower index.
pub fn fit_multistart(target: &Matrix, k: usize, opts: &FitOptions) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = Rng::derive(opts.seed, r as u64);
        let mut res = fit_gmm_to_elm(target, k, opts, &mut rng)?;
        res.restart = r;
        if best.as_ref().is_none_or(|b| res.rmse < b.rmse) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Best-fit RMSE for each kernel count, in the order given.
pub fn kernel_count_sweep(target: &Matrix, counts: &[usize], opts: &FitOptions) -> Result<Vec<(usize, f64)>> {
    counts
        .iter()
        .map(|&k| Ok((k, fit_multistart(target, k, opts)?.rmse)))
        .collect()
}

/// `mean(diagonal) − mean(off-diagonal)`. Negative values mean a patch is
/// discouraged from attending to itself relative to the others.
pub fn extroversion_score(mask: &Matrix) -> Result<f64> {
    if !mask.is_square() || mask.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "extroversion needs a non-empty square mask, got {:?}",
            mask.shape()
        )));
    }
    let n = mask.rows();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        for (j, &v) in mask.row(i).iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let off_count = n * n - n;
    let off_mean = if off_count == 0 { 0.0 } else { off / off_count as f64 };
    Ok(diag / n as f64 - off_mean)
}
