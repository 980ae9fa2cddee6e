use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::AugmentPolicy;
use super::model::{Mode, Network};
use super::tensor::{Scalar, Tensor};
use crate::dataset::TreatmentLabel;
use crate::seed::{derive_seed, stream};
use crate::{Error, Result};

/// Samples per unit of parallel work. Gradients are summed per chunk and
/// chunks are reduced in index order, so results do not depend on the
/// thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Optimizer::Sgd => 1e-2,
            Optimizer::Adam => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment: bool,
    #[serde(default)]
    pub policy: AugmentPolicy,
}

impl TrainConfig {
    pub fn rgb() -> Self {
        TrainConfig {
            batch_size: 24,
            epochs: 100,
            optimizer: Optimizer::Adam,
            learning_rate: Optimizer::Adam.default_learning_rate(),
            seed: 0,
            augment: true,
            policy: AugmentPolicy::default(),
        }
    }

    pub fn thermal() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 400,
            optimizer: Optimizer::Sgd,
            learning_rate: Optimizer::Sgd.default_learning_rate(),
            seed: 0,
            augment: true,
            policy: AugmentPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Precondition("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: f64,
    adam: Option<&mut Adam<T>>,
) {
    match adam {
        None => {
            let lr = T::lit(lr);
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * d;
                }
            }
        }
        Some(state) => {
            state.step += 1;
            let c1 = 1.0 - BETA1.powi(state.step);
            let c2 = 1.0 - BETA2.powi(state.step);
            let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
            let (one, eps) = (T::one(), T::lit(ADAM_EPS));
            let step = T::lit(lr / c1);
            let c2 = T::lit(c2);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = b1 * m[j] + (one - b1) * d;
                    v[j] = b2 * v[j] + (one - b2) * d * d;
                    *w = *w - step * m[j] / ((v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Mini-batch training with cross-entropy loss. Shuffling, augmentation and
/// dropout draw from streams keyed by `(seed, epoch, position)`, so a run is
/// a pure function of the data, the initial weights and the config.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    inputs: &[Tensor<T>],
    labels: &[TreatmentLabel],
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs for {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let d = net.spec().input;
    for x in inputs {
        if x.shape() != [d.channels, d.height, d.width] {
            return Err(Error::Shape(format!(
                "training input {:?} does not match the network",
                x.shape()
            )));
        }
    }

    let mut adam = (config.optimizer == Optimizer::Adam).then(|| Adam {
        m: net
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect(),
        v: net
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect(),
        step: 0,
    });
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(&[config.seed, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let base = b * config.batch_size;
            let frozen = &*net;
            let parts: Vec<Result<(Vec<Tensor<T>>, f64, usize)>> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(c, chunk)| {
                    let first = base + c * CHUNK;
                    run_chunk(frozen, inputs, labels, chunk, first, epoch, config)
                })
                .collect();
            let mut grads = net.zero_grads();
            for part in parts {
                let (g, loss, hits) = part.map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch },
                    other => other,
                })?;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a = *a + v;
                    }
                }
                loss_sum += loss;
                correct += hits;
            }
            let scale = T::one() / T::lit(batch.len() as f64);
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
            }
            if grads
                .iter()
                .any(|g| g.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged { epoch });
            }
            apply_update(
                net.params_mut(),
                &grads,
                config.learning_rate,
                adam.as_mut(),
            );
        }
        let loss = loss_sum / inputs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let entry = EpochLog {
            epoch,
            loss,
            train_acc: correct as f64 / inputs.len() as f64,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5}, train acc {:.3}",
            entry.loss,
            entry.train_acc
        );
        log.push(entry);
    }
    Ok(log)
}

/// Forward and backward over one chunk; returns summed gradients, summed
/// loss and the number of correct predictions.
fn run_chunk<T: Scalar>(
    net: &Network<T>,
    inputs: &[Tensor<T>],
    labels: &[TreatmentLabel],
    chunk: &[usize],
    first_position: usize,
    epoch: usize,
    config: &TrainConfig,
) -> Result<(Vec<Tensor<T>>, f64, usize)> {
    let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
        .map(|k| {
            stream(&[
                derive_seed(&[config.seed, 0x5eed]),
                epoch as u64,
                (first_position + k) as u64,
            ])
        })
        .collect();
    let mut flat = Vec::with_capacity(chunk.len() * net.spec().input.len());
    for (&i, rng) in chunk.iter().zip(rngs.iter_mut()) {
        if config.augment {
            let x = super::augment::augment(&inputs[i], rng, &config.policy);
            flat.extend_from_slice(x.data());
        } else {
            flat.extend_from_slice(inputs[i].data());
        }
    }
    let trace = net.forward_batch(&flat, chunk.len(), Mode::Train, &mut rngs)?;
    let idx: Vec<usize> = chunk.iter().map(|&i| labels[i].index()).collect();
    let probs = trace.probabilities();
    let hits = idx
        .iter()
        .enumerate()
        .filter(|&(k, &y)| {
            let p = &probs[k * 4..k * 4 + 4];
            super::argmax_label(&[p[0], p[1], p[2], p[3]]).index() == y
        })
        .count();
    let mut grads = net.zero_grads();
    let loss = net.backward(&trace, &idx, &mut grads);
    Ok((grads, loss.to_f64().unwrap_or(f64::NAN), hits))
}

/// Writes `epoch,loss,train_acc` rows.
pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "epoch,loss,train_acc").map_err(io)?;
    for e in log {
        writeln!(out, "{},{:.6},{:.6}", e.epoch, e.loss, e.train_acc).map_err(io)?;
    }
    out.flush().map_err(io)
}
