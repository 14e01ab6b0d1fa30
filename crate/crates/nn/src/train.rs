//! Mini-batch training with early stopping, checkpoint-friendly resume and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{argmax, Network};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::real::Real;
use crate::seed;
use crate::spec::{ModelSpec, Shape3};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4f50;
const INIT_TAG: u64 = 0x494e_4954;

/// A labeled batch of equally shaped samples stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet<T> {
    pub shape: Shape3,
    pub data: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> TensorSet<T> {
    pub fn new(shape: Shape3, data: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if data.len() != shape.size() * labels.len() {
            return Err(NnError::InvalidConfig(format!(
                "{} values cannot hold {} samples of shape {shape}",
                data.len(),
                labels.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let size = self.shape.size();
        &self.data[i * size..(i + 1) * size]
    }

    fn gather(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.shape.size());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (data, labels)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub train: &'a TensorSet<T>,
    pub valid: &'a TensorSet<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub early_stopping: bool,
    pub patience: usize,
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.early_stopping && self.patience == 0 {
            return Err(NnError::InvalidConfig("patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

/// Best-validation weights tracked for early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<T> {
    pub epoch: usize,
    pub loss: f64,
    pub params: Vec<T>,
}

/// Network weights plus everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub network: Network<T>,
    pub optimizer: OptimizerState<T>,
    pub learn: LearnConfig,
    pub seed: u64,
    pub history: Vec<EpochStats>,
    pub early_stopped: bool,
    pub best: Option<BestSnapshot<T>>,
    /// Consecutive epochs without validation improvement.
    pub wait: usize,
}

impl<T: Real> TrainedModel<T> {
    pub fn fresh(spec: &ModelSpec, learn: &LearnConfig, seed: u64) -> Result<Self> {
        learn.validate()?;
        let network = Network::new(spec, seed::derive(seed, &[INIT_TAG]))?;
        let optimizer = OptimizerState::new(learn.optimizer, learn.learning_rate, network.num_params());
        Ok(Self {
            network,
            optimizer,
            learn: learn.clone(),
            seed,
            history: Vec::new(),
            early_stopped: false,
            best: None,
            wait: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.network.spec()
    }

    pub fn epochs_consumed(&self) -> usize {
        self.history.len()
    }

    /// Validation loss of the weights currently held.
    pub fn validation_loss(&self) -> Option<f64> {
        if self.early_stopped {
            self.best.as_ref().map(|b| b.loss)
        } else {
            self.history.last().map(|h| h.valid_loss)
        }
    }

    pub fn weights_finite(&self) -> bool {
        self.network.params().iter().all(|p| p.is_finite())
    }
}

fn check_set<T: Real>(set: &TensorSet<T>, spec: &ModelSpec, what: &'static str) -> Result<()> {
    if set.is_empty() {
        return Err(NnError::EmptyData(what));
    }
    if set.shape != spec.input {
        return Err(NnError::Shape {
            layer: 0,
            kind: spec.layers.first().map_or("input", |l| l.kind()),
            detail: format!("{what} samples have shape {}, model expects {}", set.shape, spec.input),
        });
    }
    Ok(())
}

/// Trains until the cumulative epoch count reaches `budget_epochs` or early
/// stopping fires. When `resume_from` is given, training continues from its
/// state; the per-epoch random streams depend only on `(seed, epoch)`, so
/// `b` epochs in one call equal `b` epochs split over several resumed calls.
pub fn train<T: Real>(
    spec: &ModelSpec,
    data: TrainData<'_, T>,
    learn: &LearnConfig,
    budget_epochs: usize,
    seed: u64,
    resume_from: Option<TrainedModel<T>>,
) -> Result<TrainedModel<T>> {
    if budget_epochs == 0 {
        return Err(NnError::InvalidConfig("epoch budget must be at least 1".into()));
    }
    learn.validate()?;
    check_set(data.train, spec, "training set")?;
    check_set(data.valid, spec, "validation set")?;
    let mut model = match resume_from {
        Some(m) => {
            if m.spec() != spec {
                return Err(NnError::ResumeMismatch);
            }
            if &m.learn != learn || m.seed != seed {
                return Err(NnError::InvalidConfig(
                    "resumed model was trained with different settings".into(),
                ));
            }
            m
        }
        None => TrainedModel::fresh(spec, learn, seed)?,
    };

    let n = data.train.len();
    while model.history.len() < budget_epochs && !model.early_stopped {
        let epoch = model.history.len();
        let mut order: Vec<usize> = (0..n).collect();
        if learn.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[SHUFFLE_TAG, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, idx) in order.chunks(learn.batch_size).enumerate() {
            let (x, labels) = data.train.gather(idx);
            let dropout_seed = seed::derive(seed, &[DROPOUT_TAG, epoch as u64, bi as u64]);
            let (loss, grads, ok) = model.network.training_step(&x, &labels, dropout_seed)?;
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    loss,
                });
            }
            model.optimizer.step(model.network.params_mut(), &grads)?;
            loss_sum += loss * idx.len() as f64;
            correct += ok;
        }
        let valid = evaluate(&model.network, data.valid)?;
        if !valid.loss.is_finite() {
            return Err(NnError::NonFiniteLoss {
                epoch: epoch + 1,
                batch: usize::MAX,
                loss: valid.loss,
            });
        }
        model.history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            valid_loss: valid.loss,
            valid_accuracy: valid.accuracy,
        });
        if learn.early_stopping {
            let improved = model.best.as_ref().is_none_or(|b| valid.loss < b.loss);
            if improved {
                model.best = Some(BestSnapshot {
                    epoch: epoch + 1,
                    loss: valid.loss,
                    params: model.network.params().to_vec(),
                });
                model.wait = 0;
            } else {
                model.wait += 1;
                if model.wait >= learn.patience {
                    let best = model.best.as_ref().expect("best exists once an epoch ran");
                    model.network.params_mut().copy_from_slice(&best.params);
                    model.early_stopped = true;
                }
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }
}

/// Mean cross-entropy, argmax accuracy (ties to the lowest class) and confusion matrix.
pub fn evaluate<T: Real>(network: &Network<T>, set: &TensorSet<T>) -> Result<Metrics> {
    check_set(set, network.spec(), "evaluation set")?;
    let classes = network.num_classes();
    let (probs, logp) = network.predict(&set.data)?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut loss = 0.0;
    for ((p, lp), &label) in probs.chunks(classes).zip(logp.chunks(classes)).zip(&set.labels) {
        loss -= lp[label].as_f64();
        confusion[label][argmax(p)] += 1;
    }
    let n = set.len() as f64;
    let correct: u64 = (0..classes).map(|i| confusion[i][i]).sum();
    Ok(Metrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
        confusion,
    })
}
