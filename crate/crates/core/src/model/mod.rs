//! The next-word-prediction network: embedding → LSTM → linear dense → softmax.
//!
//! Gate blocks along the LSTM's 4H axis are ordered input, forget,
//! cell-candidate, output.

mod checkpoint;
mod lstm;

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::seed::{self, Part};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
};
pub use lstm::{backward, forward, softmax_row, ForwardCache};

/// Floating-point element type of a network. Training runs in `f32`;
/// `f64` exists for gradient checking.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 converts")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("converts to f64")
    }
}

impl Float for f32 {}
impl Float for f64 {}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no unmasked targets")]
    NoUnmaskedTargets,
}

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub lstm_units: usize,
    pub dense_units: usize,
    pub max_seq_len: usize,
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Small,
    Large,
    AdaptiveBaseline,
}

impl Preset {
    /// (embedding, lstm, dense) sizes.
    pub fn layer_sizes(self) -> (usize, usize, usize) {
        match self {
            Preset::Small => (100, 256, 100),
            Preset::Large => (300, 512, 300),
            Preset::AdaptiveBaseline => (96, 670, 96),
        }
    }
}

impl ModelConfig {
    pub const PRESET_VOCAB_SIZE: usize = 10_004;

    pub fn preset(preset: Preset) -> Self {
        let (embedding_dim, lstm_units, dense_units) = preset.layer_sizes();
        ModelConfig {
            vocab_size: Self::PRESET_VOCAB_SIZE,
            embedding_dim,
            lstm_units,
            dense_units,
            max_seq_len: crate::corpus::DEFAULT_MAX_SEQ_LEN,
        }
    }

    pub fn small() -> Self {
        Self::preset(Preset::Small)
    }

    pub fn large() -> Self {
        Self::preset(Preset::Large)
    }

    pub fn adaptive_baseline() -> Self {
        Self::preset(Preset::AdaptiveBaseline)
    }

    /// `V·E + 4H(E+H+1) + Dn(H+1) + V(Dn+1)`.
    pub fn param_count(&self) -> usize {
        let (v, e, h, dn) = (
            self.vocab_size,
            self.embedding_dim,
            self.lstm_units,
            self.dense_units,
        );
        v * e + 4 * h * (e + h + 1) + dn * (h + 1) + v * (dn + 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("lstm_units", self.lstm_units),
            ("dense_units", self.dense_units),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::Shape(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 8] = [
    "embedding",
    "lstm_kernel",
    "lstm_recurrent",
    "lstm_bias",
    "dense_w",
    "dense_b",
    "out_w",
    "out_b",
];

/// All trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F = f32> {
    /// V×E
    pub embedding: Array2<F>,
    /// E×4H
    pub lstm_kernel: Array2<F>,
    /// H×4H
    pub lstm_recurrent: Array2<F>,
    /// 4H
    pub lstm_bias: Array1<F>,
    /// H×Dn
    pub dense_w: Array2<F>,
    /// Dn
    pub dense_b: Array1<F>,
    /// Dn×V
    pub out_w: Array2<F>,
    /// V
    pub out_b: Array1<F>,
    /// Sequence length the network is run at; not a weight.
    pub max_seq_len: usize,
}

/// Gradients share the parameters' layout.
pub type Gradients<F = f32> = ModelParameters<F>;

/// A named, shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<F = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> ModelParameters<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, e, h, dn) = (
            config.vocab_size,
            config.embedding_dim,
            config.lstm_units,
            config.dense_units,
        );
        ModelParameters {
            embedding: Array2::zeros((v, e)),
            lstm_kernel: Array2::zeros((e, 4 * h)),
            lstm_recurrent: Array2::zeros((h, 4 * h)),
            lstm_bias: Array1::zeros(4 * h),
            dense_w: Array2::zeros((h, dn)),
            dense_b: Array1::zeros(dn),
            out_w: Array2::zeros((dn, v)),
            out_b: Array1::zeros(v),
            max_seq_len: config.max_seq_len,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config())
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.embedding.nrows(),
            embedding_dim: self.embedding.ncols(),
            lstm_units: self.lstm_recurrent.nrows(),
            dense_units: self.dense_w.ncols(),
            max_seq_len: self.max_seq_len,
        }
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Tensor shapes in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 8] {
        [
            self.embedding.shape().to_vec(),
            self.lstm_kernel.shape().to_vec(),
            self.lstm_recurrent.shape().to_vec(),
            self.lstm_bias.shape().to_vec(),
            self.dense_w.shape().to_vec(),
            self.dense_b.shape().to_vec(),
            self.out_w.shape().to_vec(),
            self.out_b.shape().to_vec(),
        ]
    }

    /// Flat row-major views in [`TENSOR_NAMES`] order.
    pub fn slices(&self) -> [&[F]; 8] {
        [
            self.embedding.as_slice().expect("standard layout"),
            self.lstm_kernel.as_slice().expect("standard layout"),
            self.lstm_recurrent.as_slice().expect("standard layout"),
            self.lstm_bias.as_slice().expect("standard layout"),
            self.dense_w.as_slice().expect("standard layout"),
            self.dense_b.as_slice().expect("standard layout"),
            self.out_w.as_slice().expect("standard layout"),
            self.out_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 8] {
        [
            self.embedding.as_slice_mut().expect("standard layout"),
            self.lstm_kernel.as_slice_mut().expect("standard layout"),
            self.lstm_recurrent.as_slice_mut().expect("standard layout"),
            self.lstm_bias.as_slice_mut().expect("standard layout"),
            self.dense_w.as_slice_mut().expect("standard layout"),
            self.dense_b.as_slice_mut().expect("standard layout"),
            self.out_w.as_slice_mut().expect("standard layout"),
            self.out_b.as_slice_mut().expect("standard layout"),
        ]
    }

    /// True when shapes match tensor for tensor.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Converts element type.
    pub fn cast<G: Float>(&self) -> ModelParameters<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::of(v.as_f64()));
        let c2 = |a: &Array2<F>| a.mapv(|v| G::of(v.as_f64()));
        ModelParameters {
            embedding: c2(&self.embedding),
            lstm_kernel: c2(&self.lstm_kernel),
            lstm_recurrent: c2(&self.lstm_recurrent),
            lstm_bias: c1(&self.lstm_bias),
            dense_w: c2(&self.dense_w),
            dense_b: c1(&self.dense_b),
            out_w: c2(&self.out_w),
            out_b: c1(&self.out_b),
            max_seq_len: self.max_seq_len,
        }
    }

    /// Global L2 norm across every tensor.
    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales in place so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = F::of(max_norm / norm);
            for s in self.slices_mut() {
                s.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }

    /// The weight tensors, named and shaped as in the checkpoint format.
    pub fn extract_weights(&self) -> Vec<NamedTensor<F>> {
        TENSOR_NAMES
            .iter()
            .zip(self.shapes())
            .zip(self.slices())
            .map(|((name, shape), data)| NamedTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect()
    }

    /// Rebuilds parameters from tensors in [`TENSOR_NAMES`] order.
    pub fn from_named_tensors(
        tensors: Vec<NamedTensor<F>>,
        max_seq_len: usize,
    ) -> Result<Self, ModelError> {
        if tensors.len() != TENSOR_NAMES.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                TENSOR_NAMES.len(),
                tensors.len()
            )));
        }
        for (t, expected) in tensors.iter().zip(TENSOR_NAMES) {
            if t.name != expected {
                return Err(ModelError::Shape(format!(
                    "expected tensor {expected:?}, found {:?}",
                    t.name
                )));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(ModelError::Shape(format!(
                    "tensor {:?} data length",
                    t.name
                )));
            }
        }
        let [emb, kernel, recurrent, bias, dw, db, ow, ob]: [NamedTensor<F>; 8] = tensors
            .try_into()
            .map_err(|_| ModelError::Shape("tensor count".into()))?;
        let params = ModelParameters {
            embedding: rank2(emb)?,
            lstm_kernel: rank2(kernel)?,
            lstm_recurrent: rank2(recurrent)?,
            lstm_bias: rank1(bias)?,
            dense_w: rank2(dw)?,
            dense_b: rank1(db)?,
            out_w: rank2(ow)?,
            out_b: rank1(ob)?,
            max_seq_len,
        };
        params.check_consistent()?;
        Ok(params)
    }

    /// Verifies the tensors describe one architecture.
    pub fn check_consistent(&self) -> Result<(), ModelError> {
        let c = self.config();
        c.validate()?;
        if self.shapes() != Self::zeros_shapes(&c) {
            return Err(ModelError::Shape(format!(
                "tensor shapes {:?} are not consistent with {c:?}",
                self.shapes()
            )));
        }
        Ok(())
    }

    fn zeros_shapes(c: &ModelConfig) -> [Vec<usize>; 8] {
        let (v, e, h, dn) = (c.vocab_size, c.embedding_dim, c.lstm_units, c.dense_units);
        [
            vec![v, e],
            vec![e, 4 * h],
            vec![h, 4 * h],
            vec![4 * h],
            vec![h, dn],
            vec![dn],
            vec![dn, v],
            vec![v],
        ]
    }
}

fn rank2<F>(t: NamedTensor<F>) -> Result<Array2<F>, ModelError> {
    match t.shape[..] {
        [r, c] => Ok(Array2::from_shape_vec((r, c), t.data).expect("length checked")),
        _ => Err(ModelError::Shape(format!(
            "tensor {:?} must be rank 2",
            t.name
        ))),
    }
}

fn rank1<F>(t: NamedTensor<F>) -> Result<Array1<F>, ModelError> {
    match t.shape[..] {
        [_] => Ok(Array1::from(t.data)),
        _ => Err(ModelError::Shape(format!(
            "tensor {:?} must be rank 1",
            t.name
        ))),
    }
}

/// Half-width of the uniform range for random embedding rows.
pub const EMBEDDING_INIT_RANGE: f64 = 0.05;

fn glorot_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..=limit))
}

/// `rows × cols` matrix with orthonormal rows (or columns, whichever is fewer).
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let (tall_r, tall_c) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall_r, tall_c, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        Array2::from_shape_fn((rows, cols), |(i, j)| q[(i, j)])
    } else {
        Array2::from_shape_fn((rows, cols), |(i, j)| q[(j, i)])
    }
}

/// Random initialization: uniform ±0.05 embeddings (unless given), Glorot
/// uniform kernels, orthogonal recurrent weights, zero biases except a forget
/// gate bias of one.
pub fn init_params<F: Float>(
    config: &ModelConfig,
    rng_seed: u64,
    embedding_init: Option<&EmbeddingMatrix>,
) -> Result<ModelParameters<F>, ModelError> {
    config.validate()?;
    let (v, e, h, dn) = (
        config.vocab_size,
        config.embedding_dim,
        config.lstm_units,
        config.dense_units,
    );
    let cast2 = |a: Array2<f64>| a.mapv(F::of);
    let stream = |tag: &str| seed::stream(rng_seed, "init", &[Part::Str(tag)]);

    let embedding = match embedding_init {
        Some(m) => {
            if m.values().dim() != (v, e) {
                return Err(ModelError::Shape(format!(
                    "embedding init is {:?}, model needs ({v}, {e})",
                    m.values().dim()
                )));
            }
            cast2(m.values().clone())
        }
        None => {
            let mut rng = stream("embedding");
            Array2::from_shape_simple_fn((v, e), || {
                F::of(rng.gen_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE))
            })
        }
    };
    let mut lstm_bias = Array1::zeros(4 * h);
    lstm_bias.slice_mut(ndarray::s![h..2 * h]).fill(F::one());
    Ok(ModelParameters {
        embedding,
        lstm_kernel: cast2(glorot_uniform(&mut stream("lstm_kernel"), e, 4 * h)),
        lstm_recurrent: cast2(orthogonal(&mut stream("lstm_recurrent"), h, 4 * h)),
        lstm_bias,
        dense_w: cast2(glorot_uniform(&mut stream("dense_w"), h, dn)),
        dense_b: Array1::zeros(dn),
        out_w: cast2(glorot_uniform(&mut stream("out_w"), dn, v)),
        out_b: Array1::zeros(v),
        max_seq_len: config.max_seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            embedding_dim: 2,
            lstm_units: 3,
            dense_units: 2,
            max_seq_len: 4,
        }
    }

    #[test]
    fn closed_form_count_matches_tensors() {
        let c = tiny();
        assert_eq!(c.param_count(), 105);
        let p: ModelParameters<f64> = init_params(&c, 0, None).unwrap();
        assert_eq!(p.count_params(), 105);
    }

    #[test]
    fn preset_counts() {
        assert_eq!(ModelConfig::small().param_count(), 2_402_072);
        assert_eq!(ModelConfig::large().param_count(), 7_831_328);
        assert_eq!(ModelConfig::adaptive_baseline().param_count(), 4_050_748);
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let c = ModelConfig {
            vocab_size: 30,
            embedding_dim: 6,
            lstm_units: 7,
            dense_units: 5,
            max_seq_len: 3,
        };
        let a: ModelParameters = init_params(&c, 3, None).unwrap();
        let b: ModelParameters = init_params(&c, 3, None).unwrap();
        let other: ModelParameters = init_params(&c, 4, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!(a.embedding.iter().all(|v| v.abs() <= 0.05));
        let limit = (6.0f32 / (6.0 + 28.0)).sqrt();
        assert!(a.lstm_kernel.iter().all(|v| v.abs() <= limit));
        let h = 7;
        for (i, &b) in a.lstm_bias.iter().enumerate() {
            let expected = if (h..2 * h).contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(b, expected);
        }
        // orthonormal rows of the recurrent matrix
        let r = a.lstm_recurrent.mapv(f64::from);
        let gram = r.dot(&r.t());
        for i in 0..h {
            for j in 0..h {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expected).abs() < 1e-5);
            }
        }
        a.check_consistent().unwrap();
    }

    #[test]
    fn embedding_init_is_used_and_checked() {
        let c = tiny();
        let m = EmbeddingMatrix::new(Array2::from_elem((5, 2), 0.25)).unwrap();
        let p: ModelParameters = init_params(&c, 0, Some(&m)).unwrap();
        assert!(p.embedding.iter().all(|&v| v == 0.25));
        let bad = EmbeddingMatrix::new(Array2::zeros((4, 2))).unwrap();
        assert!(init_params::<f32>(&c, 0, Some(&bad)).is_err());
    }

    #[test]
    fn named_tensor_round_trip() {
        let p: ModelParameters<f64> = init_params(&tiny(), 1, None).unwrap();
        let tensors = p.extract_weights();
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, TENSOR_NAMES);
        assert_eq!(tensors[1].shape, vec![2, 12]);
        let back = ModelParameters::from_named_tensors(tensors, 4).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut p: ModelParameters<f64> = init_params(&tiny(), 1, None).unwrap();
        let before = p.global_norm();
        p.clip_global_norm(before / 2.0);
        assert!((p.global_norm() - before / 2.0).abs() < 1e-9);
        let n = p.global_norm();
        p.clip_global_norm(n * 10.0);
        assert_eq!(p.global_norm(), n);
    }
}
