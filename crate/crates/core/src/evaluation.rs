//! Accuracy, membership inference and the gap to a retrained reference.

use std::fmt::Write as _;

use crate::data::{DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::masking::{build_masked_view, MaskSpec, MaskType};
use crate::tensor::Tensor;
use crate::vit::{predict_logits, ViTParams};

const EVAL_BATCH: usize = 256;

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows of `logits` whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let c = logits.shape().get(1).copied().unwrap_or(0);
    if logits.shape() != [labels.len(), c] || c == 0 {
        return Err(Error::dim(
            "accuracy",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn accuracy(model: &ViTParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    accuracy_from_logits(&predict_logits(model, data.images(), EVAL_BATCH)?, data.labels())
}

/// Per-sample cross-entropy of each logit row against its label.
pub fn losses_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let c = logits.shape().get(1).copied().unwrap_or(0);
    if logits.shape() != [labels.len(), c] || c == 0 {
        return Err(Error::dim(
            "per-sample loss",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .enumerate()
        .map(|(index, (row, &y))| {
            if y >= c {
                return Err(Error::Label {
                    index,
                    label: y,
                    classes: c,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            Ok(lse - row[y])
        })
        .collect()
}

pub fn sample_losses(model: &ViTParams, data: &LabeledDataset) -> Result<Vec<f64>> {
    losses_from_logits(&predict_logits(model, data.images(), EVAL_BATCH)?, data.labels())
}

/// Loss threshold separating members (loss below `t`) from non-members.
///
/// Candidates are the smallest observed loss, the midpoint between every pair
/// of adjacent distinct losses, and `+∞`. The one with the highest balanced
/// accuracy wins, the smallest on ties. When every loss is identical the
/// threshold is that value.
pub fn fit_threshold(members: &[f64], non_members: &[f64]) -> Result<f64> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::Contract("threshold fit needs members and non-members".into()));
    }
    let (m, n) = (members.len() as u128, non_members.len() as u128);
    // (loss, is_member), sorted by loss
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&l| (l, true))
        .chain(non_members.iter().map(|&l| (l, false)))
        .collect();
    if all.iter().any(|(l, _)| l.is_nan()) {
        return Err(Error::NonFinite { op: "fit_threshold" });
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // balanced accuracy × 2mn = n·(members below t) + m·(non-members at or above t)
    let score = |below_m: u128, below_n: u128| n * below_m + m * (n - below_n);
    let mut best_t = all[0].0;
    let mut best = score(0, 0);
    let (mut below_m, mut below_n) = (0u128, 0u128);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                below_m += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
        let t = match all.get(i) {
            Some(&(next, _)) => v + (next - v) / 2.0,
            None => f64::INFINITY,
        };
        let s = score(below_m, below_n);
        if s > best {
            best = s;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Percentage of `forget` losses strictly below `threshold`.
pub fn member_rate(forget: &[f64], threshold: f64) -> Result<f64> {
    if forget.is_empty() {
        return Err(Error::Contract("membership rate of an empty forget set".into()));
    }
    let hits = forget.iter().filter(|&&l| l < threshold).count();
    Ok(100.0 * hits as f64 / forget.len() as f64)
}

/// Loss-threshold attack fit on retain (members) versus test (non-members),
/// applied to the forget losses.
pub fn mia_from_losses(forget: &[f64], retain: &[f64], test: &[f64]) -> Result<f64> {
    member_rate(forget, fit_threshold(retain, test)?)
}

pub fn mia_success_rate(
    model: &ViTParams,
    forget: &LabeledDataset,
    retain: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<f64> {
    mia_from_losses(
        &sample_losses(model, forget)?,
        &sample_losses(model, retain)?,
        &sample_losses(model, test)?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub fa: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: f64,
}

impl MetricsReport {
    pub fn measure(model: &ViTParams, split: &DataSplit, method: &str, seed: u64) -> Result<Self> {
        let forget = split.forget_set()?;
        let retain = split.retain_set()?;
        let forget_logits = predict_logits(model, forget.images(), EVAL_BATCH)?;
        let retain_logits = predict_logits(model, retain.images(), EVAL_BATCH)?;
        let test_logits = predict_logits(model, split.test.images(), EVAL_BATCH)?;
        let mia = mia_from_losses(
            &losses_from_logits(&forget_logits, forget.labels())?,
            &losses_from_logits(&retain_logits, retain.labels())?,
            &losses_from_logits(&test_logits, split.test.labels())?,
        )?;
        Ok(MetricsReport {
            method: method.to_string(),
            seed,
            fa: accuracy_from_logits(&forget_logits, forget.labels())?,
            ra: accuracy_from_logits(&retain_logits, retain.labels())?,
            ta: accuracy_from_logits(&test_logits, split.test.labels())?,
            mia,
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.fa, self.ra, self.ta, self.mia]
    }
}

/// Absolute per-metric differences to the reference and their mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport {
    pub fa: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: f64,
    pub ag: f64,
}

impl GapReport {
    pub fn from_gaps(gaps: [f64; 4]) -> Self {
        let [fa, ra, ta, mia] = gaps.map(f64::abs);
        GapReport {
            fa,
            ra,
            ta,
            mia,
            ag: (fa + ra + ta + mia) / 4.0,
        }
    }
}

pub fn average_gap(method: &MetricsReport, retrain: &MetricsReport) -> GapReport {
    let (a, b) = (method.values(), retrain.values());
    GapReport::from_gaps([a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]])
}

pub const REPORT_HEADER: &str = "method,seed,FA,RA,TA,MIA,dFA,dRA,dTA,dMIA,AG";

/// CSV rows for `reports`, each compared against `retrain`, which is written
/// first.
pub fn report_csv(retrain: &MetricsReport, others: &[MetricsReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in std::iter::once(retrain).chain(others) {
        let g = average_gap(r, retrain);
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.method, r.seed, r.fa, r.ra, r.ta, r.mia, g.fa, g.ra, g.ta, g.mia, g.ag
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub mask_type: MaskType,
    pub ta: f64,
    pub mia: f64,
}

/// Test accuracy and forget-set MIA of `model` when test and forget images are
/// masked at each (ratio, type). The attack threshold is fit once on the
/// unmasked retain and test losses.
pub fn masking_sweep(
    model: &ViTParams,
    split: &DataSplit,
    ratios: &[f64],
    types: &[MaskType],
    base: &MaskSpec,
) -> Result<Vec<SweepRow>> {
    let forget = split.forget_set()?;
    let retain = split.retain_set()?;
    let threshold = fit_threshold(&sample_losses(model, &retain)?, &sample_losses(model, &split.test)?)?;
    let mut rows = Vec::with_capacity(ratios.len() * types.len());
    for &ratio in ratios {
        for &mask_type in types {
            let spec = MaskSpec {
                ratio,
                mask_type,
                ..*base
            };
            let test = build_masked_view(model, split.test.images(), &spec)?;
            let forget_masked = build_masked_view(model, forget.images(), &spec)?;
            let ta = accuracy_from_logits(&predict_logits(model, &test.images, EVAL_BATCH)?, split.test.labels())?;
            let losses = losses_from_logits(&predict_logits(model, &forget_masked.images, EVAL_BATCH)?, forget.labels())?;
            rows.push(SweepRow {
                ratio,
                mask_type,
                ta,
                mia: member_rate(&losses, threshold)?,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "ratio,mask_type,ta,mia";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{:.2},{},{:.4},{:.4}", r.ratio, r.mask_type.name(), r.ta, r.mia);
    }
    out
}
