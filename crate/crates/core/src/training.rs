//! Mini-batch training passes shared by client updates and central pretraining.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{TokenSequence, PAD};
use crate::metrics::{totals_from_logits, EvalTotals};
use crate::model::{backward, forward, Float, ModelError, ModelParameters};
use crate::optim::{AdamHyper, AdamState, OptimError};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Inputs, targets and loss mask for a group of sequences, each `B × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<usize>,
    pub targets: Array2<usize>,
    /// True where the target is not pad.
    pub mask: Array2<bool>,
}

impl Batch {
    /// Stacks sequences of equal length.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let seqs: Vec<&TokenSequence> = seqs.into_iter().collect();
        let steps = seqs.first().map_or(0, |s| s.max_seq_len());
        let mut inputs = Array2::zeros((seqs.len(), steps));
        let mut targets = Array2::zeros((seqs.len(), steps));
        for (b, s) in seqs.iter().enumerate() {
            assert_eq!(
                s.max_seq_len(),
                steps,
                "sequences in a batch must share a length"
            );
            for (t, (&i, &o)) in s.inputs().iter().zip(s.targets()).enumerate() {
                inputs[[b, t]] = i;
                targets[[b, t]] = o;
            }
        }
        let mask = targets.mapv(|t| t != PAD);
        Batch {
            inputs,
            targets,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Settings for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub hyper: AdamHyper,
    /// Optional max global gradient norm.
    pub clip_norm: Option<f64>,
}

/// A uniformly shuffled permutation of `0..n`.
pub fn shuffled_order<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// One pass over `sequences` in `order`, one Adam step per batch.
///
/// The returned totals come from each batch's forward pass before its
/// update, so they describe the model as it was while training.
pub fn train_pass<F: Float>(
    params: &mut ModelParameters<F>,
    adam: &mut AdamState<F>,
    sequences: &[TokenSequence],
    order: &[usize],
    options: &TrainOptions,
) -> Result<EvalTotals, TrainingError> {
    let mut totals = EvalTotals::default();
    for chunk in order.chunks(options.batch_size.max(1)) {
        let batch = Batch::from_sequences(chunk.iter().map(|&i| &sequences[i]));
        let cache = forward(params, batch.inputs.view())?;
        totals.merge(&totals_from_logits(cache.logits_flat(), &batch));
        let (_, mut grads) = backward(params, &cache, batch.targets.view(), batch.mask.view())?;
        if let Some(max_norm) = options.clip_norm {
            grads.clip_global_norm(max_norm);
        }
        adam.step(params, &grads, &options.hyper)?;
    }
    Ok(totals)
}
