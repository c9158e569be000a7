//! AdamW with decoupled weight decay, and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment accumulators, one pair of buffers per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn for_shapes(lengths: impl IntoIterator<Item = usize>) -> Self {
        let lengths: Vec<usize> = lengths.into_iter().collect();
        AdamWState {
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One learnable tensor as seen by the optimizer.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl AdamW {
    /// One bias-corrected AdamW update. Decay is applied as
    /// `p ← p − lr·wd·p` before the adaptive step.
    pub fn step(&self, state: &mut AdamWState, slots: &mut [ParamSlot<'_>], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} < 0")));
        }
        if state.first.is_empty() && state.step == 0 {
            *state = AdamWState::for_shapes(slots.iter().map(|s| s.value.len()));
        }
        if state.first.len() != slots.len() || state.second.len() != slots.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} state tensors for {} parameters", state.first.len(), slots.len()),
            ));
        }
        for (idx, slot) in slots.iter().enumerate() {
            if slot.value.len() != slot.grad.len()
                || state.first[idx].len() != slot.value.len()
                || state.second[idx].len() != slot.value.len()
            {
                return Err(Error::shape(
                    "adamw_step",
                    format!(
                        "tensor {idx}: value {}, grad {}, moments {}/{}",
                        slot.value.len(),
                        slot.grad.len(),
                        state.first[idx].len(),
                        state.second[idx].len()
                    ),
                ));
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, slot) in slots.iter_mut().enumerate() {
            let decay = if slot.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut state.first[idx], &mut state.second[idx]);
            for i in 0..slot.value.len() {
                let g = slot.grad[i];
                let p = &mut slot.value[i];
                *p -= decay * *p;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `min_lr + ½·(base_lr − min_lr)·(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule step {step} outside [0, {total_steps}]"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn run(opt: &AdamW, params: &mut Vec<f64>, grads: &[f64], lr: f64, state: &mut AdamWState) {
        let mut slots = [ParamSlot {
            value: params.as_mut_slice(),
            grad: grads,
            decay: true,
        }];
        opt.step(state, &mut slots, lr).unwrap();
    }

    #[test]
    fn zero_lr_is_noop() {
        let opt = AdamW::default();
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamWState::default();
        run(&opt, &mut p, &[0.3, 0.1, -5.0], 0.0, &mut st);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_only_path() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut p = vec![1.0, -2.0, 4.0];
        let mut st = AdamWState::default();
        run(&opt, &mut p, &[0.0; 3], 0.01, &mut st);
        for (a, b) in p.iter().zip([1.0, -2.0, 4.0]) {
            assert_abs_diff_eq!(*a, b * 0.999, epsilon = 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![0.5, 0.5];
        let mut st = AdamWState::default();
        run(&opt, &mut p, &[3.0, -0.2], 0.01, &mut st);
        assert_abs_diff_eq!(p[0], 0.49, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], 0.51, epsilon = 1e-7);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let opt = AdamW::default();
        let mut p = vec![1.0, 2.0];
        let mut st = AdamWState::for_shapes([3]);
        let mut slots = [ParamSlot {
            value: p.as_mut_slice(),
            grad: &[0.0, 0.0],
            decay: false,
        }];
        assert!(opt.step(&mut st, &mut slots, 0.1).is_err());
        let mut slots = [ParamSlot {
            value: p.as_mut_slice(),
            grad: &[0.0],
            decay: false,
        }];
        assert!(opt.step(&mut AdamWState::default(), &mut slots, 0.1).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.001).unwrap(), 0.1);
        assert_abs_diff_eq!(cosine_lr(100, 100, 0.1, 0.001).unwrap(), 0.001, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(50, 100, 0.1, 0.0).unwrap(), 0.05, epsilon = 1e-15);
        assert!(cosine_lr(101, 100, 0.1, 0.0).is_err());
        assert!(cosine_lr(0, 0, 0.1, 0.0).is_err());
    }
}
