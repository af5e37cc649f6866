//! Generic training loop: shuffled mini-batches, MSE loss, Adam with
//! global-norm clipping, plateau scheduling, best-checkpoint tracking, and
//! deterministic resume (per-epoch RNG reseeding makes interrupted and
//! uninterrupted runs produce identical histories).

use ndarray::Array5;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{clip_global_norm, Adam};
use crate::error::NnError;
use crate::param::Param;
use crate::scheduler::ReduceLrOnPlateau;

/// Training hyperparameters. Defaults follow the conventional stable
/// choices: Adam at 1e-3, halve-on-plateau with patience 20, batch 16,
/// global clip 1.0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// Stop as soon as the epoch-mean training MSE drops below this value.
    pub stop_when_train_mse_below: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            epochs: 100,
            batch_size: 16,
            clip_norm: Some(1.0),
            plateau_factor: 0.5,
            plateau_patience: 20,
            min_lr: 1e-6,
            seed: 0,
            stop_when_train_mse_below: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Assembles `(input, target)` batches for the trainer.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Materializes the batch for the given sample indices.
    fn assemble(&self, indices: &[usize]) -> (Array5<f32>, Array5<f32>);
}

/// A model trainable by MSE regression on 5D tensors.
pub trait BatchModel {
    fn forward_train(&mut self, x: Array5<f32>, rng: &mut ChaCha8Rng) -> Array5<f32>;
    fn backward(&mut self, dy: &Array5<f32>);
    fn infer_batch(&self, x: &Array5<f32>) -> Array5<f32>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    /// Parameters plus non-trainable state (running statistics), by name.
    fn state_blobs(&self) -> Vec<(String, Vec<f32>)>;
    fn load_state_blobs(
        &mut self,
        lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>,
    ) -> Result<(), NnError>;
}

pub fn mse_and_grad(pred: &Array5<f32>, target: &Array5<f32>) -> (f64, Array5<f32>) {
    assert_eq!(pred.dim(), target.dim());
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = pred.clone();
    for (g, t) in grad.iter_mut().zip(target.iter()) {
        let d = *g - *t;
        loss += d as f64 * d as f64;
        *g = (2.0 * d as f64 / n) as f32;
    }
    (loss / n, grad)
}

pub fn eval_mse<M: BatchModel>(model: &M, source: &dyn BatchSource, batch_size: usize) -> f64 {
    let n = source.len();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut i = 0;
    while i < n {
        let j = (i + batch_size).min(n);
        let idx: Vec<usize> = (i..j).collect();
        let (x, t) = source.assemble(&idx);
        let y = model.infer_batch(&x);
        for (a, b) in y.iter().zip(t.iter()) {
            let d = (a - b) as f64;
            sum += d * d;
        }
        count += y.len();
        i = j;
    }
    sum / count.max(1) as f64
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Optimizer, scheduler, history, and best-state bookkeeping for one
/// training job. Serializable into a checkpoint and reconstructible for
/// resume.
pub struct Trainer {
    pub adam: Adam,
    pub scheduler: ReduceLrOnPlateau,
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_state: Vec<(String, Vec<f32>)>,
}

impl Trainer {
    pub fn new(hyper: &Hyper) -> Self {
        Trainer {
            adam: Adam::new(hyper.lr),
            scheduler: ReduceLrOnPlateau::new(
                hyper.plateau_factor,
                hyper.plateau_patience,
                hyper.min_lr,
            ),
            next_epoch: 0,
            history: Vec::new(),
            best_val: f64::INFINITY,
            best_epoch: 0,
            best_state: Vec::new(),
        }
    }

    /// Trains from `next_epoch` to `hyper.epochs`. The model is left at its
    /// final state; the best-validation state is kept in `best_state`.
    pub fn run<M: BatchModel>(
        &mut self,
        model: &mut M,
        train: &dyn BatchSource,
        val: &dyn BatchSource,
        hyper: &Hyper,
    ) -> Result<(), NnError> {
        if train.is_empty() || val.is_empty() {
            return Err(NnError::invalid("training and validation must be non-empty"));
        }
        let n = train.len();
        for epoch in self.next_epoch..hyper.epochs {
            let mut rng = epoch_rng(hyper.seed, epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0f64;
            let mut sample_count = 0usize;
            for (step, chunk) in order.chunks(hyper.batch_size).enumerate() {
                let (x, t) = train.assemble(chunk);
                let y = model.forward_train(x, &mut rng);
                let (loss, dy) = mse_and_grad(&y, &t);
                if !loss.is_finite() {
                    return Err(NnError::NanLoss { epoch, step });
                }
                loss_sum += loss * chunk.len() as f64;
                sample_count += chunk.len();

                let mut params = model.params_mut();
                for p in params.iter_mut() {
                    p.zero_grad();
                }
                drop(params);
                model.backward(&dy);
                let mut params = model.params_mut();
                if let Some(max_norm) = hyper.clip_norm {
                    clip_global_norm(&mut params, max_norm);
                }
                self.adam.step(&mut params);
            }
            let train_mse = loss_sum / sample_count as f64;
            let val_mse = eval_mse(model, val, hyper.batch_size);
            if !val_mse.is_finite() {
                return Err(NnError::NanLoss { epoch, step: usize::MAX });
            }

            if let Some(new_lr) = self.scheduler.step(val_mse, self.adam.lr) {
                log::info!("epoch {epoch}: plateau, lr -> {new_lr:.3e}");
                self.adam.lr = new_lr;
            }
            self.history.push(EpochRecord {
                epoch,
                train_mse,
                val_mse,
                lr: self.adam.lr,
            });
            if val_mse < self.best_val {
                self.best_val = val_mse;
                self.best_epoch = epoch;
                self.best_state = model.state_blobs();
            }
            self.next_epoch = epoch + 1;

            if let Some(target) = hyper.stop_when_train_mse_below {
                if train_mse < target {
                    log::info!("epoch {epoch}: train mse {train_mse:.3e} under target, stopping");
                    break;
                }
            }
        }
        Ok(())
    }

    /// Loads the tracked best state back into the model.
    pub fn restore_best<M: BatchModel>(&self, model: &mut M) -> Result<(), NnError> {
        if self.best_state.is_empty() {
            return Err(NnError::invalid("no best state recorded"));
        }
        let mut lookup = |name: &str| -> Option<Vec<f32>> {
            self.best_state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone())
        };
        model.load_state_blobs(&mut lookup)
    }
}
