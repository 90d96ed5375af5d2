//! Contrastive unlearning and the comparison baselines.
//!
//! The unlearned model θ_u starts as a copy of the original θ_o. Phase 1 walks
//! the forget set and pulls θ_u's logits on each image towards θ_o's logits on
//! the attention-masked image (positive) and away from θ_o's logits on the
//! unmasked image (negative). Phase 2 fine-tunes on the retain set with plain
//! cross-entropy.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::masking::{build_masked_view, MaskSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{
    diverged, loss_and_gradients, shuffled_batches, train_cross_entropy, train_from_scratch, Direction, Sgd,
    SgdConfig, TrainConfig, TrainLog,
};
use crate::vit::{predict_logits, ViTConfig, ViTParams};

const EVAL_BATCH: usize = 256;

/// Batch mean of `softplus((s_n − s_p)/τ)`, which equals
/// `−log(e^{s_p/τ} / (e^{s_p/τ} + e^{s_n/τ}))` without overflow.
pub fn contrastive_from_similarities(tape: &mut Tape, sp: Var, sn: Var, tau: f64) -> Result<Var> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let gap = tape.sub(sn, sp)?;
    let gap = tape.scale(gap, 1.0 / tau)?;
    let per_sample = tape.softplus(gap)?;
    tape.mean(per_sample)
}

/// Contrastive loss over anchor `z`, positive `zp` and negative `zn` logits,
/// each `[B×C]`.
pub fn contrastive_loss(tape: &mut Tape, z: Var, zp: Var, zn: Var, tau: f64) -> Result<Var> {
    let sp = tape.cosine_rows(z, zp)?;
    let sn = tape.cosine_rows(z, zn)?;
    contrastive_from_similarities(tape, sp, sn, tau)
}

/// Plain scalar version of the per-sample loss.
pub fn contrastive_value(sp: f64, sn: f64, tau: f64) -> f64 {
    let x = (sn - sp) / tau;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnlearnConfig {
    pub forget_epochs: usize,
    pub retain_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub temperature: f64,
    pub mask: MaskSpec,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            forget_epochs: 2,
            retain_epochs: 8,
            batch_size: 128,
            sgd: SgdConfig::default(),
            temperature: 0.5,
            mask: MaskSpec::default(),
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.sgd.validate()?;
        self.mask.validate()
    }

    fn retain_phase(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.retain_epochs,
            batch_size: self.batch_size,
            sgd: self.sgd,
            seed: self.seed.wrapping_add(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub params: ViTParams,
    pub forget_log: TrainLog,
    pub retain_log: TrainLog,
    pub forget_seconds: f64,
    pub retain_seconds: f64,
}

/// Frozen targets for the forget set: θ_o's logits on the masked images
/// (positives) and on the plain images (negatives), one row per forget sample.
pub struct ContrastiveTargets {
    pub positives: Tensor,
    pub negatives: Tensor,
}

impl ContrastiveTargets {
    /// θ_o is frozen, so computing the targets once is identical to
    /// recomputing them batch by batch.
    pub fn compute(original: &ViTParams, forget: &LabeledDataset, mask: &MaskSpec) -> Result<Self> {
        let masked = build_masked_view(original, forget.images(), mask)?;
        Ok(ContrastiveTargets {
            positives: predict_logits(original, &masked.images, EVAL_BATCH)?,
            negatives: predict_logits(original, forget.images(), EVAL_BATCH)?,
        })
    }

    fn rows(&self, which: &Tensor, rows: &[usize]) -> Tensor {
        let c = which.shape()[1];
        let data = rows.iter().flat_map(|&r| which.data()[r * c..(r + 1) * c].iter().copied()).collect();
        Tensor::new(vec![rows.len(), c], data).expect("rows of a finite tensor are finite")
    }
}

/// Batch means of `cos(Z, Z_p)` and `cos(Z, Z_n)` for `current` over the
/// forget set.
pub fn similarity_means(current: &ViTParams, forget: &LabeledDataset, targets: &ContrastiveTargets) -> Result<(f64, f64)> {
    let z = predict_logits(current, forget.images(), EVAL_BATCH)?;
    let mut tape = Tape::new();
    let z = tape.constant(z);
    let zp = tape.constant(targets.positives.clone());
    let zn = tape.constant(targets.negatives.clone());
    let sp = tape.cosine_rows(z, zp)?;
    let sn = tape.cosine_rows(z, zn)?;
    let sp = tape.mean(sp)?;
    let sn = tape.mean(sn)?;
    Ok((tape.value(sp).item()?, tape.value(sn).item()?))
}

/// One contrastive SGD pass over the forget set per epoch.
fn forget_phase(
    params: &mut ViTParams,
    forget: &LabeledDataset,
    targets: &ContrastiveTargets,
    config: &UnlearnConfig,
) -> Result<TrainLog> {
    let mut log = TrainLog {
        losses: Vec::new(),
        steps_per_epoch: forget.len().div_ceil(config.batch_size),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.sgd);
    let all: Vec<usize> = (0..forget.len()).collect();
    for _ in 0..config.forget_epochs {
        for batch in shuffled_batches(&all, config.batch_size, &mut rng) {
            let step = log.losses.len();
            let (images, _) = forget.gather(&batch)?;
            let zp = targets.rows(&targets.positives, &batch);
            let zn = targets.rows(&targets.negatives, &batch);
            let (loss, grads) = diverged(
                loss_and_gradients(params, &images, |tape, z| {
                    let zp = tape.constant(zp);
                    let zn = tape.constant(zn);
                    contrastive_loss(tape, z, zp, zn, config.temperature)
                }),
                "forget",
                step,
            )?;
            if !loss.is_finite() || !sgd.step(params, &grads, Direction::Descent) {
                return Err(Error::Divergence { phase: "forget", step });
            }
            log.losses.push(loss);
        }
    }
    Ok(log)
}

/// Two-phase contrastive unlearning. `original` is never modified.
pub fn unlearn(original: &ViTParams, split: &DataSplit, config: &UnlearnConfig) -> Result<UnlearnOutcome> {
    config.validate()?;
    if config.forget_epochs > 0 && split.forget().is_empty() {
        return Err(Error::Config("forget set is empty but forget epochs > 0".into()));
    }
    let guard = original.fingerprint();
    let mut params = original.clone();

    let started = Instant::now();
    let forget_log = if config.forget_epochs > 0 {
        let forget = split.forget_set()?;
        let targets = ContrastiveTargets::compute(original, &forget, &config.mask)?;
        forget_phase(&mut params, &forget, &targets, config)?
    } else {
        TrainLog::default()
    };
    let forget_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let retain_log = train_cross_entropy(
        &mut params,
        &split.train,
        split.retain(),
        &config.retain_phase(),
        Direction::Descent,
        "retain",
    )?;
    let retain_seconds = started.elapsed().as_secs_f64();

    if original.fingerprint() != guard {
        return Err(Error::Contract("original model changed during unlearning".into()));
    }
    Ok(UnlearnOutcome {
        params,
        forget_log,
        retain_log,
        forget_seconds,
        retain_seconds,
    })
}

/// Trains a fresh model on the retain set only. The forget samples are never
/// read: only the retain subset is handed to the trainer.
pub fn retrain(split: &DataSplit, vit: &ViTConfig, config: &TrainConfig) -> Result<ViTParams> {
    let retain = split.retain_set()?;
    let init = ViTParams::init(vit, config.seed)?;
    Ok(train_from_scratch(init, &retain, config)?.0)
}

/// Cross-entropy descent on the retain set, starting from θ_o.
pub fn fine_tune(original: &ViTParams, split: &DataSplit, config: &TrainConfig) -> Result<ViTParams> {
    let mut params = original.clone();
    train_cross_entropy(&mut params, &split.train, split.retain(), config, Direction::Descent, "fine-tune")?;
    Ok(params)
}

/// Cross-entropy ascent on the forget set, starting from θ_o.
pub fn gradient_ascent(original: &ViTParams, split: &DataSplit, config: &TrainConfig) -> Result<ViTParams> {
    let mut params = original.clone();
    train_cross_entropy(&mut params, &split.train, split.forget(), config, Direction::Ascent, "gradient-ascent")?;
    Ok(params)
}

/// Draws, for each label, a uniformly random different class.
pub fn relabel_away(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Config("relabeling needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .enumerate()
        .map(|(index, &y)| {
            if y >= classes {
                return Err(Error::Label {
                    index,
                    label: y,
                    classes,
                });
            }
            let r = rng.random_range(0..classes - 1);
            Ok(if r < y { r } else { r + 1 })
        })
        .collect()
}

/// Replaces the forget labels with random wrong ones (drawn from `seed`) and
/// trains on forget ∪ retain, starting from θ_o.
pub fn random_labels(original: &ViTParams, split: &DataSplit, config: &TrainConfig, seed: u64) -> Result<ViTParams> {
    let mut labels = split.train.labels().to_vec();
    let forget_labels: Vec<usize> = split.forget().iter().map(|&i| labels[i]).collect();
    let fresh = relabel_away(&forget_labels, split.train.class_count(), seed)?;
    for (&i, y) in split.forget().iter().zip(fresh) {
        labels[i] = y;
    }
    let relabeled = split.train.with_labels(labels)?;
    let all: Vec<usize> = (0..relabeled.len()).collect();
    let mut params = original.clone();
    train_cross_entropy(&mut params, &relabeled, &all, config, Direction::Descent, "random-labels")?;
    Ok(params)
}

/// Unlearning methods selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    LetheViT,
    Retrain,
    FineTune,
    GradientAscent,
    RandomLabels,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::LetheViT,
        Method::Retrain,
        Method::FineTune,
        Method::GradientAscent,
        Method::RandomLabels,
    ];

    /// Command-line name.
    pub fn key(self) -> &'static str {
        match self {
            Method::LetheViT => "lethevit",
            Method::Retrain => "retrain",
            Method::FineTune => "ft",
            Method::GradientAscent => "ga",
            Method::RandomLabels => "rl",
        }
    }

    /// Name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::LetheViT => "LetheViT",
            Method::Retrain => "Retrain",
            Method::FineTune => "FT",
            Method::GradientAscent => "GA",
            Method::RandomLabels => "RL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.key()).collect();
                Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_loss_examples() {
        assert!((contrastive_value(0.3, 0.3, 0.7) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((contrastive_value(1.0, -1.0, 1.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!(contrastive_value(1.0, -1.0, 1e-3) < 1e-300);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.key().parse::<Method>().unwrap(), m);
        }
        match "salun".parse::<Method>() {
            Err(Error::Config(msg)) => assert!(msg.contains("lethevit, retrain, ft, ga, rl")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relabel_never_keeps_the_label() {
        let labels: Vec<usize> = (0..300).map(|i| i % 4).collect();
        let fresh = relabel_away(&labels, 4, 9).unwrap();
        assert!(labels.iter().zip(&fresh).all(|(a, b)| a != b && *b < 4));
        assert!(relabel_away(&[0], 1, 0).is_err());
    }
}
