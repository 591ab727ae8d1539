//! PCA on embedding matrices, the mean/top-component removal post-processing
//! step, and the post-process → project → post-process reduction.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};

use super::{EmbeddingError, EmbeddingMatrix, Result};

/// Mean and top principal directions of an embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// Column mean of the fitted matrix.
    pub mean: Array1<f64>,
    /// Orthonormal rows, descending explained variance.
    pub components: Array2<f64>,
    /// Per-component variance (sample variance, `n - 1` denominator).
    pub explained_variance: Array1<f64>,
}

impl PcaBasis {
    /// Mean-centres `x` with this basis' mean.
    pub fn center(&self, x: &Array2<f64>) -> Array2<f64> {
        x - &self.mean
    }

    /// Coordinates of mean-centred rows in the component basis.
    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        self.center(x).dot(&self.components.t())
    }
}

fn check_rank_arg(x: &EmbeddingMatrix, k: usize, what: &str, upper: usize) -> Result<()> {
    if x.vocab_size() < 2 {
        return Err(EmbeddingError::InvalidArgument(format!(
            "need at least 2 rows, got {}",
            x.vocab_size()
        )));
    }
    if k == 0 || k > upper {
        return Err(EmbeddingError::InvalidArgument(format!(
            "{what} = {k} out of range 1..={upper}"
        )));
    }
    Ok(())
}

/// Flips each row so that its largest-magnitude entry (earliest on ties) is positive.
fn canonicalize_signs(components: &mut Array2<f64>) {
    for mut row in components.rows_mut() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

/// Fits the mean and top-`k` principal directions through an SVD of the
/// centred matrix. Requires `1 <= k <= min(V, d)` and `V >= 2`.
pub fn pca_fit(x: &EmbeddingMatrix, k: usize) -> Result<PcaBasis> {
    let (rows, cols) = x.values().dim();
    check_rank_arg(x, k, "D", rows.min(cols))?;
    let mean = x.values().mean_axis(Axis(0)).expect("at least one row");
    let centered = x.values() - &mean;
    let m = DMatrix::from_fn(rows, cols, |i, j| centered[[i, j]]);
    let svd =
        nalgebra::SVD::try_new(m, false, true, f64::EPSILON, 0).ok_or(EmbeddingError::SvdFailed)?;
    let v_t = svd.v_t.as_ref().ok_or(EmbeddingError::SvdFailed)?;

    // try_new sorts singular values in descending order; keep that order but
    // make it explicit so ties in floating point stay stable.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
            .then(a.cmp(&b))
    });

    let denom = (rows - 1) as f64;
    let mut components = Array2::zeros((k, cols));
    let mut explained = Array1::zeros(k);
    for (out, &src) in order.iter().take(k).enumerate() {
        for j in 0..cols {
            components[[out, j]] = v_t[(src, j)];
        }
        let s = svd.singular_values[src];
        explained[out] = s * s / denom;
    }
    canonicalize_signs(&mut components);
    Ok(PcaBasis {
        mean,
        components,
        explained_variance: explained,
    })
}

/// Subtracts the mean embedding, then removes each row's projection onto the
/// top-`d` principal directions of the centred matrix.
pub fn ppa(x: &EmbeddingMatrix, d: usize) -> Result<EmbeddingMatrix> {
    let basis = pca_fit(x, d)?;
    let centered = basis.center(x.values());
    let coords = centered.dot(&basis.components.t());
    let out = centered - coords.dot(&basis.components);
    EmbeddingMatrix::new(out)
}

/// Projects the mean-centred matrix onto its top-`n` principal directions.
pub fn pca_reduce(x: &EmbeddingMatrix, n: usize) -> Result<EmbeddingMatrix> {
    if n == 0 || n > x.dim() {
        return Err(EmbeddingError::InvalidArgument(format!(
            "N = {n} out of range 1..={}",
            x.dim()
        )));
    }
    let basis = pca_fit(x, n.min(x.vocab_size()))?;
    let mut out = basis.transform(x.values());
    if out.ncols() < n {
        // fewer rows than requested dimensions: remaining coordinates carry no variance
        let mut padded = Array2::zeros((out.nrows(), n));
        padded
            .slice_mut(ndarray::s![.., ..out.ncols()])
            .assign(&out);
        out = padded;
    }
    EmbeddingMatrix::new(out)
}

/// Post-process, reduce to `n` dimensions, post-process again with the same `d`.
pub fn pp_pca_pp(x: &EmbeddingMatrix, n: usize, d: usize) -> Result<EmbeddingMatrix> {
    if d == 0 || d > n || n > x.dim() {
        return Err(EmbeddingError::InvalidArgument(format!(
            "need 1 <= D <= N <= d, got D = {d}, N = {n}, d = {}",
            x.dim()
        )));
    }
    let first = ppa(x, d)?;
    let reduced = pca_reduce(&first, n)?;
    ppa(&reduced, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn m(values: Array2<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(values).unwrap()
    }

    #[test]
    fn axis_aligned_component_and_sign() {
        let x = m(array![[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]]);
        let b = pca_fit(&x, 1).unwrap();
        assert_eq!(b.mean.to_vec(), vec![0.0, 0.0]);
        assert!((b.components[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(b.components[[0, 1]].abs() < 1e-12);
        // (1 + 1 + 4 + 4) / 3
        assert!((b.explained_variance[0] - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_zero_variance() {
        let x = m(array![[3.0, 1.0, 2.0], [3.0, 1.0, 2.0], [3.0, 1.0, 2.0]]);
        let b = pca_fit(&x, 1).unwrap();
        assert_eq!(b.explained_variance[0], 0.0);
        let out = ppa(&m(array![[3.0, 3.0], [3.0, 3.0]]), 1).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_removal_zeroes_output() {
        let x = m(array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-2.0, 1.5]]);
        let out = ppa(&x, 2).unwrap();
        assert!(out.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rank_arguments_are_checked() {
        let x = m(array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]);
        assert!(pca_fit(&x, 0).is_err());
        assert!(pca_fit(&x, 3).is_err());
        assert!(pca_fit(&m(array![[1.0, 2.0]]), 1).is_err());
        assert!(pca_reduce(&x, 3).is_err());
        assert!(pp_pca_pp(&x, 1, 2).is_err());
    }

    #[test]
    fn rank_one_reconstruction_is_exact() {
        let v = array![0.3, -1.2, 2.0];
        let x = m(Array2::from_shape_fn((5, 3), |(i, j)| {
            (i as f64 - 1.5) * v[j]
        }));
        let b = pca_fit(&x, 1).unwrap();
        let coords = b.transform(x.values());
        let recon = coords.dot(&b.components) + &b.mean;
        for (a, e) in recon.iter().zip(x.values().iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_matrix_reduction_pads_zero_variance_columns() {
        let x = m(array![[1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 0.0, 1.0]]);
        let out = pca_reduce(&x, 3).unwrap();
        assert_eq!(out.values().dim(), (2, 3));
        assert!(out.values().column(2).iter().all(|&v| v == 0.0));
    }
}
