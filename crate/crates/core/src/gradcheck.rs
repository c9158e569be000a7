//! Central finite-difference checks of the analytic gradients.
//!
//! Every check perturbs one scalar at a time by multiples of `h` and
//! compares a central difference with the analytic value. The default
//! stencil is fourth order: the second-order one carries an `O(h²)`
//! truncation error of roughly 1e-9 in absolute terms at `h = 1e-4` on the
//! toy models, which is enough to push entries with gradients near 1e-6 past
//! a 1e-4 relative tolerance although the analytic values are right.
//!
//! The error of one entry is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
//! entries whose true gradient is essentially zero from dominating.

use crate::attention::{attention_backward, attention_forward, AttentionWeights};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::{mask_param_grads, unfold_mask, GaussianKernel};
use crate::model::TinyViT;
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Finite-difference stencil, both centred on the unperturbed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`; truncation error `O(h²)`.
    Central2,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`; `O(h⁴)`.
    #[default]
    Central4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Entries checked per tensor, chosen at random; `None` checks all.
    pub per_tensor: Option<usize>,
    pub seed: u64,
    /// Scales every analytic gradient by `1 + corrupt` before comparing.
    /// Only useful as a negative control.
    pub corrupt: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            stencil: Stencil::default(),
            per_tensor: None,
            seed: 0,
            corrupt: 0.0,
        }
    }
}

/// Worst error within one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_error(groups: &[GroupError]) -> f64 {
    groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
}

fn pick(len: usize, opts: &CheckOptions, rng: &mut Rng) -> Vec<usize> {
    match opts.per_tensor {
        Some(k) if k < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares analytic gradients against finite differences of `loss`,
/// perturbing entries of `params` through `access`.
fn check_tensors<P: Clone>(
    params: &P,
    names: &[String],
    analytic: &[Vec<f64>],
    mut access: impl FnMut(&mut P) -> Vec<&mut [f64]>,
    mut loss: impl FnMut(&P) -> Result<f64>,
    opts: &CheckOptions,
) -> Result<Vec<GroupError>> {
    let mut rng = Rng::new(opts.seed);
    let mut out = Vec::with_capacity(names.len());
    let mut work = params.clone();
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        let mut worst: f64 = 0.0;
        let idx = pick(len, opts, &mut rng);
        for &i in &idx {
            let orig = access(&mut work)[t][i];
            let mut at = |delta: f64| -> Result<f64> {
                access(&mut work)[t][i] = orig + delta;
                loss(&work)
            };
            let h = opts.step;
            let numeric = match opts.stencil {
                Stencil::Central2 => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central4 => (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
            };
            access(&mut work)[t][i] = orig;
            let a = analytic[t][i] * (1.0 + opts.corrupt);
            worst = worst.max(relative_error(a, numeric));
        }
        out.push(GroupError {
            name: name.clone(),
            max_rel_error: worst,
            checked: idx.len(),
        });
    }
    Ok(out)
}

/// Mixture parameters under `L = Σ M ∘ R`.
pub fn check_mask_grads(
    kernels: &[GaussianKernel],
    g: usize,
    epsilon: f64,
    r: &Matrix,
    opts: &CheckOptions,
) -> Result<Vec<GroupError>> {
    let grads = mask_param_grads(kernels, g, epsilon, r)?;
    let analytic = vec![
        grads.iter().map(|k| k.d_alpha).collect(),
        grads.iter().map(|k| k.d_sigma).collect(),
    ];
    let params: (Vec<f64>, Vec<f64>) = (
        kernels.iter().map(|k| k.alpha).collect(),
        kernels.iter().map(|k| k.sigma).collect(),
    );
    check_tensors(
        &params,
        &["alpha".into(), "sigma".into()],
        &analytic,
        |p| vec![&mut p.0[..], &mut p.1[..]],
        |p| {
            let ks: Vec<_> = p.0.iter().zip(&p.1).map(|(&a, &s)| GaussianKernel::new(a, s)).collect();
            Ok(unfold_mask(&ks, g, epsilon)?.hadamard(r)?.sum())
        },
        opts,
    )
}

/// Every attention tensor plus the input, under `L = Σ out ∘ R`.
pub fn check_attention_grads(
    w: &AttentionWeights,
    x: &Matrix,
    r: &Matrix,
    opts: &CheckOptions,
) -> Result<Vec<GroupError>> {
    let (_, trace) = attention_forward(x, w)?;
    let (dx, grads) = attention_backward(w, &trace, r)?;
    let mut names: Vec<String> = w.tensor_infos("").into_iter().map(|i| i.name).collect();
    names.push("input".into());
    let mut analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    analytic.push(dx.as_slice().to_vec());
    check_tensors(
        &(w.clone(), x.clone()),
        &names,
        &analytic,
        |p| {
            let mut v = p.0.tensors_mut();
            v.push(p.1.as_mut_slice());
            v
        },
        |p| Ok(attention_forward(&p.1, &p.0)?.0.hadamard(r)?.sum()),
        opts,
    )
}

/// Every model tensor under the mean cross-entropy of `batch`.
pub fn check_model_grads(model: &TinyViT, batch: &[Sample], opts: &CheckOptions) -> Result<Vec<GroupError>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs a non-empty batch".into()));
    }
    let out = model.loss_and_grads(batch)?;
    let names: Vec<String> = model.tensor_infos().into_iter().map(|i| i.name).collect();
    let analytic: Vec<Vec<f64>> = out.grads.tensors().iter().map(|t| t.to_vec()).collect();
    check_tensors(
        model,
        &names,
        &analytic,
        |m| m.tensors_mut(),
        |m| {
            let (logits, _) = m.forward(batch)?;
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            Ok(crate::model::cross_entropy(&logits, &labels)?.0)
        },
        opts,
    )
}

/// Adds `N(0, std²)` noise to every parameter so that checks do not run at
/// special points such as zero biases or unit norms.
pub fn jitter(tensors: Vec<&mut [f64]>, std: f64, rng: &mut Rng) {
    for t in tensors {
        for v in t.iter_mut() {
            *v += rng.normal(0.0, std);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }

    #[test]
    fn mask_check_passes_and_corruption_fails() {
        let ks = [GaussianKernel::new(0.6, 2.0), GaussianKernel::new(-0.8, 0.7)];
        let mut rng = Rng::new(3);
        let r = Matrix::from_fn(9, 9, |_, _| rng.normal(0.0, 1.0));
        let ok = check_mask_grads(&ks, 3, 1e-6, &r, &CheckOptions::default()).unwrap();
        assert!(max_error(&ok) < 1e-6, "{ok:?}");
        let bad = CheckOptions {
            corrupt: 0.01,
            ..CheckOptions::default()
        };
        let err = check_mask_grads(&ks, 3, 1e-6, &r, &bad).unwrap();
        assert!(max_error(&err) > 1e-3);
    }

    #[test]
    fn fourth_order_stencil_has_smaller_truncation_error() {
        let ks = [GaussianKernel::new(1.3, 0.8)];
        let mut rng = Rng::new(8);
        let r = Matrix::from_fn(16, 16, |_, _| rng.normal(0.0, 1.0));
        let at = |stencil| {
            let opts = CheckOptions {
                step: 1e-2,
                stencil,
                ..CheckOptions::default()
            };
            max_error(&check_mask_grads(&ks, 4, 1e-6, &r, &opts).unwrap())
        };
        let (e2, e4) = (at(Stencil::Central2), at(Stencil::Central4));
        assert!(e4 < e2 / 100.0, "second order {e2:e}, fourth order {e4:e}");
    }
}
