//! Mini-batch SGD over a [`ViTParams`] model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{forward_on_tape, ViTParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.sgd.validate()
    }
}

/// Which way a step moves along the loss gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// SGD with optional heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (±g + λ·θ)`, `θ ← θ − η·v`.
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. Returns `false`, leaving `params` untouched, if the
    /// update would produce a non-finite value.
    pub fn step(&mut self, params: &mut ViTParams, grads: &[Tensor], direction: Direction) -> bool {
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.config;
        let sign = match direction {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        };
        if self.velocity.is_empty() {
            self.velocity = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        }
        let mut next_velocity = self.velocity.clone();
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(grads.len());
        for ((t, g), v) in params.tensors().iter().zip(grads).zip(&mut next_velocity) {
            let mut values = t.data().to_vec();
            for ((w, &gi), vi) in values.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = sign * gi + weight_decay * *w;
                *vi = momentum * *vi + d;
                *w -= lr * *vi;
            }
            if values.iter().any(|w| !w.is_finite()) {
                return false;
            }
            next.push(values);
        }
        for (t, values) in params.tensors_mut().iter_mut().zip(next) {
            t.data_mut().copy_from_slice(&values);
        }
        self.velocity = next_velocity;
        true
    }
}

/// Splits `indices` into batches after a fresh shuffle drawn from `rng`.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs the model on a batch with trainable parameters and returns the loss
/// and per-parameter gradients. `loss` builds the scalar objective from the
/// bound logits.
pub fn loss_and_gradients<F>(params: &ViTParams, images: &Tensor, loss: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (logits, _) = forward_on_tape(&mut tape, &bound, images, false)?;
    let l = loss(&mut tape, logits)?;
    let value = tape.value(l).item()?;
    let vars = bound.vars().to_vec();
    let mut grads = tape.backward(l)?;
    Ok((value, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Maps numeric blow-ups during a step to a divergence error at `step`.
pub(crate) fn diverged<T>(result: Result<T>, phase: &'static str, step: usize) -> Result<T> {
    match result {
        Err(Error::NonFinite { .. }) => Err(Error::Divergence { phase, step }),
        other => other,
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub steps_per_epoch: usize,
}

/// Cross-entropy SGD over the samples of `data` listed in `indices`.
pub fn train_cross_entropy(
    params: &mut ViTParams,
    data: &LabeledDataset,
    indices: &[usize],
    config: &TrainConfig,
    direction: Direction,
    phase: &'static str,
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog {
        losses: Vec::new(),
        steps_per_epoch: indices.len().div_ceil(config.batch_size),
    };
    if config.epochs == 0 || indices.is_empty() {
        return Ok(log);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.sgd);
    for _ in 0..config.epochs {
        for batch in shuffled_batches(indices, config.batch_size, &mut rng) {
            let step = log.losses.len();
            let (images, labels) = data.gather(&batch)?;
            let (loss, grads) = diverged(
                loss_and_gradients(params, &images, |tape, logits| tape.cross_entropy(logits, &labels)),
                phase,
                step,
            )?;
            if !loss.is_finite() || !sgd.step(params, &grads, direction) {
                return Err(Error::Divergence { phase, step });
            }
            log.losses.push(loss);
        }
    }
    Ok(log)
}

/// Trains a freshly initialized model on `data`.
pub fn train_from_scratch(
    init: ViTParams,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ViTParams, TrainLog)> {
    let mut params = init;
    let all: Vec<usize> = (0..data.len()).collect();
    let log = train_cross_entropy(&mut params, data, &all, config, Direction::Descent, "train")?;
    Ok((params, log))
}
