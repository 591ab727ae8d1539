//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's linear algebra: the eigensolver is
//! a cyclic Jacobi iteration on an explicitly formed covariance matrix.

#![allow(dead_code)]

use std::path::PathBuf;

use fedtext::model::{backward, forward, init_params, ModelConfig, ModelParameters, TENSOR_NAMES};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn config_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1].
pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..=1.0))
}

/// Column means.
pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0)) / x.nrows() as f64
}

/// Sample covariance `(X - μ)ᵀ(X - μ) / (n - 1)`, summed term by term.
pub fn covariance(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mu = column_means(x);
    let mut c = Array2::zeros((d, d));
    for r in 0..n {
        for i in 0..d {
            for j in 0..d {
                c[[i, j]] += (x[[r, i]] - mu[i]) * (x[[r, j]] - mu[j]);
            }
        }
    }
    c / (n as f64 - 1.0)
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending; eigenvectors
/// are the columns of the returned matrix.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Top-`k` principal directions (columns) and variances of `x`.
pub fn oracle_pca(x: &Array2<f64>, k: usize) -> (Vec<f64>, Array2<f64>) {
    let (values, vectors) = jacobi_eigen(&covariance(x));
    (
        values[..k].to_vec(),
        vectors.slice(ndarray::s![.., ..k]).to_owned(),
    )
}

/// Sine of the largest principal angle between the column spans of two
/// orthonormal `d × k` bases, bounded above by a Frobenius norm.
pub fn subspace_sin(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let residual = b - &a.dot(&a.t().dot(b));
    residual.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Max over entries of `|x|`.
pub fn max_abs<'a>(xs: impl IntoIterator<Item = &'a f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, &x| m.max(x.abs()))
}

/// Masked-mean cross entropy of `params` on one batch.
pub fn loss(
    params: &ModelParameters<f64>,
    inputs: &Array2<usize>,
    targets: &Array2<usize>,
    mask: &Array2<bool>,
) -> f64 {
    let cache = forward(params, inputs.view()).unwrap();
    backward(params, &cache, targets.view(), mask.view())
        .unwrap()
        .0
}

/// Central differences of `f` with respect to every parameter entry,
/// tensor by tensor in checkpoint order.
pub fn finite_difference(
    params: &ModelParameters<f64>,
    h: f64,
    f: impl Fn(&ModelParameters<f64>) -> f64,
) -> Vec<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::new();
    for k in 0..8 {
        let n = params.slices()[k].len();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = params.slices()[k][i];
            probe.slices_mut()[k][i] = orig + h;
            let up = f(&probe);
            probe.slices_mut()[k][i] = orig - h;
            let down = f(&probe);
            probe.slices_mut()[k][i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Writes an anisotropic `dim`-wide embedding table for `words`: a shared
/// offset, a few dominant directions, and small isotropic noise.
pub fn write_synthetic_table(path: &std::path::Path, words: &[&str], dim: usize, seed: u64) {
    use std::fmt::Write as _;
    let mut r = rng(seed);
    let offset: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let dominant: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut text = String::new();
    for w in words {
        let weights: Vec<f64> = (0..dominant.len())
            .map(|k| r.gen_range(-3.0..3.0) / (k + 1) as f64)
            .collect();
        text.push_str(w);
        for j in 0..dim {
            let mut v = offset[j] + r.gen_range(-0.1..0.1);
            for (wk, dk) in weights.iter().zip(&dominant) {
                v += wk * dk[j];
            }
            write!(text, " {v}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// Reads an embedding text file back as (tokens, rows).
pub fn read_table(path: &std::path::Path) -> (Vec<String>, Array2<f64>) {
    let table = fedtext::embeddings::load_embedding_table(path).unwrap();
    (table.tokens().to_vec(), table.vectors().clone())
}

/// Floor of the relative-error denominator. Central differences with
/// h = 1e-5 on an O(1) loss resolve about 1e-10 absolute, so entries smaller
/// than this are held to 1e-10 absolute agreement instead.
pub const REL_FLOOR: f64 = 1e-5;

/// Analytic vs central-difference gradients on a (V=12, E=4, H=5, Dn=3,
/// T=4, B=2) model in f64; returns the worst relative error per tensor.
pub fn gradient_check(seed: u64) -> Vec<(&'static str, f64)> {
    let config = ModelConfig {
        vocab_size: 12,
        embedding_dim: 4,
        lstm_units: 5,
        dense_units: 3,
        max_seq_len: 4,
    };
    let mut r = rng(seed);
    let mut params: ModelParameters<f64> = init_params(&config, seed, None).unwrap();
    // move every entry off its structured initial value
    for s in params.slices_mut() {
        for x in s.iter_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    }
    let inputs = Array2::from_shape_fn((2, 4), |_| r.gen_range(0..12));
    let targets = Array2::from_shape_fn((2, 4), |_| r.gen_range(0..12));
    let mask = Array2::from_shape_fn((2, 4), |(b, t)| !(b == 1 && t == 3));

    let cache = forward(&params, inputs.view()).unwrap();
    let (_, grads) = backward(&params, &cache, targets.view(), mask.view()).unwrap();
    let numeric = finite_difference(&params, 1e-5, |p| loss(p, &inputs, &targets, &mask));

    TENSOR_NAMES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let worst = grads.slices()[k]
                .iter()
                .zip(&numeric[k])
                .map(|(&a, &n)| relative_error(a, n, REL_FLOOR))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
