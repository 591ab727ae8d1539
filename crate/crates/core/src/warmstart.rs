//! Central pretraining and transfer of its weights into a federated model.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{self, CorpusError, TokenSequence, Vocabulary, NUM_SPECIALS};
use crate::embeddings::EmbeddingMatrix;
use crate::metrics::EvalTotals;
use crate::model::{init_params, Float, ModelConfig, ModelError, ModelParameters, NamedTensor};
use crate::optim::{AdamHyper, AdamState};
use crate::seed::{self, Part};
use crate::training::{shuffled_order, train_pass, TrainOptions, TrainingError};

/// Half-width of the uniform range for words the source model never saw.
pub const FILL_RANGE: f64 = 0.05;

/// Default number of central pretraining epochs.
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum WarmstartError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("empty pretraining corpus: {0}")]
    EmptyCorpus(PathBuf),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot transfer weights: {0}")]
    Incompatible(String),
}

type Result<T> = std::result::Result<T, WarmstartError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainSettings {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub hyper: AdamHyper,
    pub clip_norm: Option<f64>,
}

impl PretrainSettings {
    pub fn new(model: ModelConfig, rng_seed: u64) -> Self {
        PretrainSettings {
            model,
            epochs: DEFAULT_PRETRAIN_EPOCHS,
            batch_size: 16,
            rng_seed,
            hyper: AdamHyper::default(),
            clip_norm: None,
        }
    }

    /// Seed of the randomly initialized starting point.
    pub fn init_seed(&self) -> u64 {
        seed::derive(self.rng_seed, "pretrain-init", &[])
    }

    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = seed::stream(
            self.rng_seed,
            "pretrain-shuffle",
            &[Part::Int(epoch as u64)],
        );
        shuffled_order(n, &mut rng)
    }
}

/// Pretrained weights plus per-epoch training totals.
#[derive(Debug, Clone)]
pub struct PretrainOutcome<F = f32> {
    pub params: ModelParameters<F>,
    pub epochs: Vec<EvalTotals>,
}

/// Trains `params` for `settings.epochs` shuffled passes with one Adam state.
pub fn pretrain_on_sequences<F: Float>(
    settings: &PretrainSettings,
    sequences: &[TokenSequence],
    mut params: ModelParameters<F>,
) -> Result<PretrainOutcome<F>> {
    let mut adam = AdamState::for_params(&params);
    let options = TrainOptions {
        batch_size: settings.batch_size,
        hyper: settings.hyper,
        clip_norm: settings.clip_norm,
    };
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        let order = settings.epoch_order(epoch, sequences.len());
        epochs.push(train_pass(
            &mut params,
            &mut adam,
            sequences,
            &order,
            &options,
        )?);
        log::debug!(
            "pretrain epoch {epoch}: loss {:.4}",
            epochs[epoch - 1].mean_loss()
        );
    }
    Ok(PretrainOutcome { params, epochs })
}

/// Pretrains from a corpus file (plain text or pooled JSON-lines).
pub fn central_pretrain(
    corpus_path: &Path,
    settings: &PretrainSettings,
    vocab: &Vocabulary,
    embedding_init: Option<&EmbeddingMatrix>,
) -> Result<PretrainOutcome<f32>> {
    let records = corpus::read_corpus(corpus_path)?;
    if records.is_empty() {
        return Err(WarmstartError::EmptyCorpus(corpus_path.to_path_buf()));
    }
    let sequences: Vec<TokenSequence> = records
        .iter()
        .map(|r| corpus::tokenize(&r.text, vocab, settings.model.max_seq_len))
        .collect();
    let init = init_params(&settings.model, settings.init_seed(), embedding_init)?;
    pretrain_on_sequences(settings, &sequences, init)
}

/// The named tensors a checkpoint would hold.
pub fn extract_weights<F: Float>(params: &ModelParameters<F>) -> Vec<NamedTensor<F>> {
    params.extract_weights()
}

/// Maps pretrained weights onto a (possibly different) target vocabulary.
///
/// Embedding rows and output-layer columns/bias entries move with their
/// word; target words unknown to the source get uniform [-0.05, 0.05]
/// values. Special-token rows are copied by position; LSTM and dense
/// tensors are copied verbatim.
pub fn transfer_weights<F: Float>(
    pretrained: &ModelParameters<F>,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    rng_seed: u64,
) -> Result<ModelParameters<F>> {
    pretrained.check_consistent()?;
    if pretrained.embedding.nrows() != source_vocab.len() {
        return Err(WarmstartError::Incompatible(format!(
            "pretrained model has {} vocabulary rows, source vocabulary has {}",
            pretrained.embedding.nrows(),
            source_vocab.len()
        )));
    }
    let v = target_vocab.len();
    let e = pretrained.embedding.ncols();
    let dn = pretrained.out_w.nrows();
    let mut rng = seed::stream(rng_seed, "transfer-fill", &[]);
    let mut fill = || F::of(rng.gen_range(-FILL_RANGE..=FILL_RANGE));

    let mut embedding = Array2::zeros((v, e));
    let mut out_w = Array2::zeros((dn, v));
    let mut out_b = ndarray::Array1::zeros(v);
    for id in 0..v {
        let source_id = if id < NUM_SPECIALS {
            Some(id)
        } else {
            source_vocab
                .id(target_vocab.word(id).expect("id in range"))
                .filter(|&s| s >= NUM_SPECIALS)
        };
        match source_id {
            Some(s) => {
                embedding.row_mut(id).assign(&pretrained.embedding.row(s));
                out_w.column_mut(id).assign(&pretrained.out_w.column(s));
                out_b[id] = pretrained.out_b[s];
            }
            None => {
                embedding.row_mut(id).mapv_inplace(|_| fill());
                out_w.column_mut(id).mapv_inplace(|_| fill());
                out_b[id] = fill();
            }
        }
    }
    Ok(ModelParameters {
        embedding,
        lstm_kernel: pretrained.lstm_kernel.clone(),
        lstm_recurrent: pretrained.lstm_recurrent.clone(),
        lstm_bias: pretrained.lstm_bias.clone(),
        dense_w: pretrained.dense_w.clone(),
        dense_b: pretrained.dense_b.clone(),
        out_w,
        out_b,
        max_seq_len: pretrained.max_seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embedding_dim: 3,
            lstm_units: 4,
            dense_units: 2,
            max_seq_len: 5,
        }
    }

    fn in_range<F: Float>(xs: impl IntoIterator<Item = F>) -> bool {
        xs.into_iter().all(|x| x.as_f64().abs() <= FILL_RANGE)
    }

    #[test]
    fn identical_vocab_is_identity() {
        let vocab = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let p: ModelParameters = init_params(&config(7), 2, None).unwrap();
        let q = transfer_weights(&p, &vocab, &vocab, 5).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn disjoint_vocab_fills_every_word() {
        let src = Vocabulary::from_words(["a", "b"]).unwrap();
        let dst = Vocabulary::from_words(["x", "y", "z"]).unwrap();
        let mut p: ModelParameters = init_params(&config(6), 2, None).unwrap();
        p.embedding.fill(3.0);
        p.out_w.fill(3.0);
        p.out_b.fill(3.0);
        let q = transfer_weights(&p, &src, &dst, 5).unwrap();
        assert_eq!(q.config(), config(7));
        for id in 4..7 {
            assert!(in_range(q.embedding.row(id).iter().copied()));
            assert!(in_range(q.out_w.column(id).iter().copied()));
            assert!(q.out_b[id].abs() <= 0.05);
        }
        for id in 0..4 {
            assert_eq!(q.embedding.row(id), p.embedding.row(id));
            assert_eq!(q.out_b[id], 3.0);
        }
        assert_eq!(q.lstm_kernel, p.lstm_kernel);
        assert_eq!(q.lstm_recurrent, p.lstm_recurrent);
        assert_eq!(q.lstm_bias, p.lstm_bias);
        assert_eq!(q.dense_w, p.dense_w);
        assert_eq!(q.dense_b, p.dense_b);
    }

    #[test]
    fn overlapping_word_moves_with_its_row() {
        let src = Vocabulary::from_words(["a", "b"]).unwrap();
        let dst = Vocabulary::from_words(["c", "a"]).unwrap();
        let mut p: ModelParameters<f64> = init_params(&config(6), 2, None).unwrap();
        p.embedding.row_mut(4).fill(0.9);
        p.out_w.column_mut(4).fill(-0.9);
        p.out_b[4] = 0.7;
        let q = transfer_weights(&p, &src, &dst, 1).unwrap();
        // "a" was id 4 in the source and is id 5 in the target
        assert_eq!(q.embedding.row(5), p.embedding.row(4));
        assert_eq!(q.out_w.column(5), p.out_w.column(4));
        assert_eq!(q.out_b[5], 0.7);
        assert!(in_range(q.embedding.row(4).iter().copied()));
        assert!(q.embedding.row(4).iter().all(|&x| x != 0.9));
        assert_eq!(q, transfer_weights(&p, &src, &dst, 1).unwrap());
    }

    #[test]
    fn mismatched_source_vocab_is_rejected() {
        let src = Vocabulary::from_words(["a"]).unwrap();
        let p: ModelParameters = init_params(&config(7), 2, None).unwrap();
        assert!(matches!(
            transfer_weights(&p, &src, &src, 0),
            Err(WarmstartError::Incompatible(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "a b c\nb c a\n").unwrap();
        let vocab = corpus::build_vocab(&path, 10).unwrap();
        let mut s = PretrainSettings::new(config(vocab.len()), 4);
        s.epochs = 0;
        let out = central_pretrain(&path, &s, &vocab, None).unwrap();
        let init: ModelParameters = init_params(&s.model, s.init_seed(), None).unwrap();
        assert_eq!(out.params, init);
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "\n\n").unwrap();
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let s = PretrainSettings::new(config(5), 0);
        assert!(matches!(
            central_pretrain(&path, &s, &vocab, None),
            Err(WarmstartError::EmptyCorpus(_))
        ));
    }

    #[test]
    fn extracted_names_follow_checkpoint_order() {
        let p: ModelParameters = init_params(&config(6), 0, None).unwrap();
        let names: Vec<String> = extract_weights(&p).into_iter().map(|t| t.name).collect();
        assert_eq!(names, crate::model::TENSOR_NAMES);
    }
}
