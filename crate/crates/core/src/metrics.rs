//! Top-1 next-word accuracy with special-token masking.
//!
//! Pad targets are never scored. `NoOovNoEos` additionally skips positions
//! whose target is the out-of-vocabulary or end-of-sentence token.

use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, EOS, OOV, PAD};
use crate::model::{forward, Float, ModelError, ModelParameters};
use crate::training::Batch;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no positions to score")]
    NoPositions,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fewer than {needed} evaluated rounds (have {have})")]
    NotEnoughRounds { needed: usize, have: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Everything except pad.
    All,
    /// Also skip targets that are oov or eos.
    NoOovNoEos,
}

impl MaskMode {
    pub fn scores(self, target: usize) -> bool {
        match self {
            MaskMode::All => target != PAD,
            MaskMode::NoOovNoEos => target != PAD && target != OOV && target != EOS,
        }
    }
}

/// Index of the largest score; the smallest index wins ties.
pub fn argmax<F: Float>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Correct/total position counts for both masking modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyCounts {
    pub correct_all: u64,
    pub total_all: u64,
    pub correct_no_oov_no_eos: u64,
    pub total_no_oov_no_eos: u64,
}

impl AccuracyCounts {
    /// Tallies predictions for flattened `(N, V)` logits against `N` targets.
    pub fn tally<F: Float>(
        logits: ArrayView2<'_, F>,
        targets: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut c = AccuracyCounts::default();
        for (row, target) in logits.axis_iter(Axis(0)).zip(targets) {
            if !MaskMode::All.scores(target) {
                continue;
            }
            let hit = argmax(row) == target;
            c.total_all += 1;
            c.correct_all += hit as u64;
            if MaskMode::NoOovNoEos.scores(target) {
                c.total_no_oov_no_eos += 1;
                c.correct_no_oov_no_eos += hit as u64;
            }
        }
        c
    }

    pub fn merge(&mut self, other: &AccuracyCounts) {
        self.correct_all += other.correct_all;
        self.total_all += other.total_all;
        self.correct_no_oov_no_eos += other.correct_no_oov_no_eos;
        self.total_no_oov_no_eos += other.total_no_oov_no_eos;
    }

    pub fn positions(&self, mode: MaskMode) -> u64 {
        match mode {
            MaskMode::All => self.total_all,
            MaskMode::NoOovNoEos => self.total_no_oov_no_eos,
        }
    }

    pub fn accuracy(&self, mode: MaskMode) -> Result<f64, MetricsError> {
        let (c, t) = match mode {
            MaskMode::All => (self.correct_all, self.total_all),
            MaskMode::NoOovNoEos => (self.correct_no_oov_no_eos, self.total_no_oov_no_eos),
        };
        if t == 0 {
            return Err(MetricsError::NoPositions);
        }
        Ok(c as f64 / t as f64)
    }

    /// Accuracy, or 0 when nothing was scored.
    pub fn accuracy_or_zero(&self, mode: MaskMode) -> f64 {
        self.accuracy(mode).unwrap_or(0.0)
    }
}

/// Fraction of scored positions where the arg-max prediction equals the target.
pub fn top1_accuracy<F: Float>(
    logits: ArrayView3<'_, F>,
    targets: ArrayView2<'_, usize>,
    mode: MaskMode,
) -> Result<f64, MetricsError> {
    let (b, t, v) = logits.dim();
    if targets.dim() != (b, t) {
        return Err(MetricsError::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let flat = logits
        .to_shape((b * t, v))
        .map_err(|e| MetricsError::Shape(e.to_string()))?;
    let counts = AccuracyCounts::tally(flat.view(), targets.iter().copied());
    counts.accuracy(mode)
}

/// Dataset-level evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub accuracy_no_oov_no_eos: f64,
    /// Mean cross-entropy over all non-pad targets.
    pub loss: f64,
    pub positions_all: u64,
    pub positions_no_oov_no_eos: u64,
}

/// Sums of per-position loss alongside accuracy counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalTotals {
    pub counts: AccuracyCounts,
    pub loss_sum: f64,
}

impl EvalTotals {
    pub fn merge(&mut self, other: &EvalTotals) {
        self.counts.merge(&other.counts);
        self.loss_sum += other.loss_sum;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.counts.total_all == 0 {
            0.0
        } else {
            self.loss_sum / self.counts.total_all as f64
        }
    }

    pub fn finish(&self) -> Result<EvalResult, MetricsError> {
        Ok(EvalResult {
            accuracy: self.counts.accuracy(MaskMode::All)?,
            accuracy_no_oov_no_eos: self.counts.accuracy_or_zero(MaskMode::NoOovNoEos),
            loss: self.mean_loss(),
            positions_all: self.counts.total_all,
            positions_no_oov_no_eos: self.counts.total_no_oov_no_eos,
        })
    }
}

/// Loss sum and accuracy counts for one batch (no gradients).
pub fn batch_totals<F: Float>(
    params: &ModelParameters<F>,
    batch: &Batch,
) -> Result<EvalTotals, MetricsError> {
    let cache = forward(params, batch.inputs.view())?;
    Ok(totals_from_logits(cache.logits_flat(), batch))
}

/// Loss sum and accuracy counts given already computed flattened logits.
pub fn totals_from_logits<F: Float>(logits: ArrayView2<'_, F>, batch: &Batch) -> EvalTotals {
    let counts = AccuracyCounts::tally(logits, batch.targets.iter().copied());
    let mut loss_sum = 0.0;
    for (row, &target) in logits.axis_iter(Axis(0)).zip(batch.targets.iter()) {
        if target == PAD {
            continue;
        }
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        loss_sum += (sum.ln() - (row[target] - max)).as_f64();
    }
    EvalTotals { counts, loss_sum }
}

/// Streams `dataset` through the model in batches and aggregates exact counts.
pub fn evaluate<F: Float>(
    params: &ModelParameters<F>,
    dataset: &[TokenSequence],
    batch_size: usize,
) -> Result<EvalResult, MetricsError> {
    let batch_size = batch_size.max(1);
    let mut totals = EvalTotals::default();
    for chunk in dataset.chunks(batch_size) {
        let batch = Batch::from_sequences(chunk.iter());
        totals.merge(&batch_totals(params, &batch)?);
    }
    totals.finish()
}

/// Mean of `val_accuracy_no_oov_no_eos` over the last `n` rounds that were evaluated.
pub fn summarize_last_rounds(
    reports: &[crate::federation::RoundReport],
    n: usize,
) -> Result<f64, MetricsError> {
    let evaluated: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.validation.as_ref().map(|v| v.accuracy_no_oov_no_eos))
        .collect();
    if n == 0 || evaluated.len() < n {
        return Err(MetricsError::NotEnoughRounds {
            needed: n,
            have: evaluated.len(),
        });
    }
    let tail = &evaluated[evaluated.len() - n..];
    Ok(tail.iter().sum::<f64>() / n as f64)
}
