//! Mini-batch AdamW training with a per-step cosine schedule.
//!
//! All randomness of epoch `e` (shuffle order, augmentation) comes from
//! stream `1000 + e` of the run seed, and model initialization from stream 1,
//! so resuming at an epoch boundary replays exactly what an uninterrupted run
//! would have done.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, NamedTensor};
use super::config::{DatasetKind, RunConfig};
use super::vit::{argmax, TinyViT};
use crate::data::{augment, load_cifar10, synth_generate_stream, Sample, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, AdamW, AdamWState, ParamSlot, Rng};

const INIT_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// One JSON object per line.
pub fn metrics_to_jsonl(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// The synthetic spec a run actually uses: image side and class count come
/// from the model.
pub fn synth_spec_for(cfg: &RunConfig) -> SynthSpec {
    SynthSpec {
        side: cfg.model.image_side,
        classes: cfg.model.classes,
        ..cfg.synth
    }
}

/// Builds or loads the run's dataset. Synthetic train and test sets are
/// streams 0 and 1 of the synthetic seed; CIFAR-10 is read from `cifar_dir`
/// and truncated to the configured sizes (0 keeps everything).
pub fn load_dataset(cfg: &RunConfig, cifar_dir: Option<&Path>) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synth => {
            let spec = synth_spec_for(cfg);
            Ok(Dataset {
                train: synth_generate_stream(&spec, cfg.train_size, 0)?,
                test: synth_generate_stream(&spec, cfg.test_size, 1)?,
            })
        }
        DatasetKind::Cifar10 => {
            let dir = cifar_dir.ok_or_else(|| Error::InvalidArgument("no CIFAR-10 directory given".into()))?;
            let mut train = load_cifar10(dir, Split::Train)?;
            let mut test = load_cifar10(dir, Split::Test)?;
            if cfg.train_size > 0 {
                train.truncate(cfg.train_size);
            }
            if cfg.test_size > 0 {
                test.truncate(cfg.test_size);
            }
            Ok(Dataset { train, test })
        }
    }
}

/// Model, optimizer moments and counters at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TinyViT,
    pub optimizer: AdamWState,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = TinyViT::new(&cfg.model, &mut Rng::derive(cfg.seed, INIT_STREAM))?;
        Ok(TrainState {
            model,
            optimizer: AdamWState::default(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let infos = self.model.tensor_infos();
        let tensors = infos
            .iter()
            .zip(self.model.tensors())
            .map(|(i, t)| NamedTensor {
                name: i.name.clone(),
                shape: i.shape.clone(),
                data: t.to_vec(),
            })
            .collect();
        let mut optimizer = Vec::new();
        for (prefix, moments) in [("m.", &self.optimizer.first), ("v.", &self.optimizer.second)] {
            for (i, m) in infos.iter().zip(moments) {
                optimizer.push(NamedTensor {
                    name: format!("{prefix}{}", i.name),
                    shape: i.shape.clone(),
                    data: m.clone(),
                });
            }
        }
        Checkpoint {
            config: cfg.clone(),
            epoch: self.epoch as u64,
            step: self.step,
            tensors,
            optimizer,
        }
    }

    /// Rebuilds the state; every tensor must match the embedded config by
    /// name and shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = TinyViT::new(&ck.config.model, &mut Rng::new(0))?;
        let infos = model.tensor_infos();
        let mismatch = |what: &str| Error::Checkpoint(format!("{what} do not match the embedded config"));
        if ck.tensors.len() != infos.len() {
            return Err(mismatch("tensor count"));
        }
        for ((info, dst), src) in infos.iter().zip(model.tensors_mut()).zip(&ck.tensors) {
            if info.name != src.name || info.shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} where {} {:?} was expected",
                    src.name, src.shape, info.name, info.shape
                )));
            }
            dst.copy_from_slice(&src.data);
        }
        let optimizer = if ck.optimizer.is_empty() {
            AdamWState {
                step: ck.step,
                ..AdamWState::default()
            }
        } else {
            if ck.optimizer.len() != 2 * infos.len() {
                return Err(mismatch("optimizer tensors"));
            }
            let (m, v) = ck.optimizer.split_at(infos.len());
            for (info, (a, b)) in infos.iter().zip(m.iter().zip(v)) {
                if a.name != format!("m.{}", info.name)
                    || b.name != format!("v.{}", info.name)
                    || a.shape != info.shape
                    || b.shape != info.shape
                {
                    return Err(mismatch("optimizer tensors"));
                }
            }
            AdamWState {
                first: m.iter().map(|t| t.data.clone()).collect(),
                second: v.iter().map(|t| t.data.clone()).collect(),
                step: ck.step,
            }
        };
        Ok(TrainState {
            model,
            optimizer,
            epoch: ck.epoch as usize,
            step: ck.step,
        })
    }
}

pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> usize {
    train_len.div_ceil(batch_size.max(1))
}

/// Top-1 accuracy; 0 for an empty set.
pub fn evaluate(model: &TinyViT, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (logits, _) = model.forward(chunk)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(i, s)| argmax(logits.row(*i)) == s.label)
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn check_geometry(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.model;
    for s in data.train.iter().chain(&data.test) {
        if s.channels != m.channels || s.side != m.image_side || s.label >= m.classes {
            return Err(Error::InvalidArgument(format!(
                "dataset sample {}x{}x{} with label {} does not fit a model for {}x{}x{} images and {} classes",
                s.channels, s.side, s.side, s.label, m.channels, m.image_side, m.image_side, m.classes
            )));
        }
    }
    Ok(())
}

/// Trains from `state` until `cfg.epochs` epochs are complete, calling
/// `on_epoch` after each one. Returns the metrics of the epochs run here.
pub fn train_from(
    cfg: &RunConfig,
    data: &Dataset,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_geometry(cfg, data)?;
    if state.model.config != cfg.model {
        return Err(Error::InvalidArgument("state was built for a different model".into()));
    }
    let per_epoch = steps_per_epoch(data.train.len(), cfg.batch_size);
    if per_epoch == 0 && cfg.epochs > state.epoch {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let total = (per_epoch * cfg.epochs) as u64;
    let adam = AdamW {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let decay: Vec<bool> = state.model.tensor_infos().iter().map(|i| i.decay).collect();
    let mut history = Vec::new();

    while state.epoch < cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, EPOCH_STREAM_BASE + state.epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, cfg.lr);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&data.train[i], &mut rng)
                    } else {
                        data.train[i].clone()
                    }
                })
                .collect();
            let out = state.model.loss_and_grads(&batch)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
            lr = cosine_lr(state.step, total, cfg.lr, cfg.min_lr)?;
            let grads = out.grads.tensors();
            let mut slots: Vec<ParamSlot> = state
                .model
                .tensors_mut()
                .into_iter()
                .zip(grads)
                .zip(&decay)
                .map(|((value, grad), &decay)| ParamSlot { value, grad, decay })
                .collect();
            adam.step(&mut state.optimizer, &mut slots, lr)?;
            state.step += 1;
        }
        if !state.model.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "parameters became non-finite in epoch {}",
                state.epoch + 1
            )));
        }
        state.epoch += 1;
        let n = data.train.len() as f64;
        let metrics = EpochMetrics {
            epoch: state.epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc: evaluate(&state.model, &data.test, cfg.batch_size)?,
        };
        on_epoch(&metrics, state)?;
        history.push(metrics);
    }
    Ok(history)
}

/// A full run from fresh initialization.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<(Vec<EpochMetrics>, TrainState)> {
    let mut state = TrainState::init(cfg)?;
    let history = train_from(cfg, data, &mut state, |_, _| Ok(()))?;
    Ok((history, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::MaskMode;

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.image_side = 8;
        cfg.model.patch = 2;
        cfg.model.dim = 8;
        cfg.model.heads = 2;
        cfg.model.depth = 1;
        cfg.model.kernels = 2;
        cfg.train_size = 24;
        cfg.test_size = 8;
        cfg.batch_size = 8;
        cfg.epochs = 2;
        cfg.synth.bar_length = 4.0;
        cfg.synth.bars = 2;
        cfg
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let cfg = RunConfig {
            epochs: 0,
            ..tiny_run()
        };
        let data = load_dataset(&cfg, None).unwrap();
        let (hist, state) = train(&cfg, &data).unwrap();
        assert!(hist.is_empty());
        assert_eq!(state, TrainState::init(&cfg).unwrap());
    }

    #[test]
    fn checkpoint_state_round_trip() {
        let mut cfg = tiny_run();
        cfg.model.mask = MaskMode::Elm;
        cfg.epochs = 1;
        let data = load_dataset(&cfg, None).unwrap();
        let (_, state) = train(&cfg, &data).unwrap();
        let ck = state.to_checkpoint(&cfg);
        assert_eq!(ck.step, 3);
        let back = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(back, state);
        let fresh = TrainState::init(&cfg).unwrap().to_checkpoint(&cfg);
        assert!(fresh.optimizer.is_empty());
        assert_eq!(TrainState::from_checkpoint(&fresh).unwrap(), TrainState::init(&cfg).unwrap());
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let cfg = tiny_run();
        let mut data = load_dataset(&cfg, None).unwrap();
        data.train[0].label = 7;
        assert!(train(&cfg, &data).is_err());
    }

    #[test]
    fn metrics_json_keys() {
        let m = EpochMetrics {
            epoch: 1,
            lr: 0.5,
            train_loss: 1.0,
            train_acc: 0.25,
            test_acc: 0.5,
        };
        let line = metrics_to_jsonl(&[m]);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        for k in ["epoch", "lr", "train_loss", "train_acc", "test_acc"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
