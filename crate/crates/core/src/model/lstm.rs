use ndarray::{s, Array2, ArrayView2, ArrayView3, ArrayViewMut1, Axis, Zip};

use super::{Float, Gradients, ModelError, ModelParameters};

/// Activations retained for backpropagation. Rows of the flattened
/// `(B·T) × _` matrices are batch-major: row `b·T + t`.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    inputs: Array2<usize>,
    /// Activated gates per step, `B × 4H`.
    gates: Vec<Array2<F>>,
    /// Cell states per step.
    cells: Vec<Array2<F>>,
    tanh_cells: Vec<Array2<F>>,
    hidden: Array2<F>,
    dense: Array2<F>,
    logits: Array2<F>,
}

impl<F: Float> ForwardCache<F> {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn steps(&self) -> usize {
        self.inputs.ncols()
    }

    /// Pre-softmax scores, `B × T × V`.
    pub fn logits(&self) -> ArrayView3<'_, F> {
        let v = self.logits.ncols();
        self.logits
            .view()
            .into_shape_with_order((self.batch_size(), self.steps(), v))
            .expect("batch-major layout")
    }

    /// Pre-softmax scores flattened to `(B·T) × V`.
    pub fn logits_flat(&self) -> ArrayView2<'_, F> {
        self.logits.view()
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn gather_rows<F: Float>(table: &Array2<F>, ids: impl Iterator<Item = usize>) -> Array2<F> {
    let rows: Vec<_> = ids.collect();
    table.select(Axis(0), &rows)
}

/// Runs the network over a `B × T` batch of ids from zero initial state.
pub fn forward<F: Float>(
    params: &ModelParameters<F>,
    inputs: ArrayView2<'_, usize>,
) -> Result<ForwardCache<F>, ModelError> {
    let (batch, steps) = inputs.dim();
    let vocab = params.embedding.nrows();
    let h = params.lstm_recurrent.nrows();
    if steps != params.max_seq_len {
        return Err(ModelError::Shape(format!(
            "batch has {steps} steps, model expects {}",
            params.max_seq_len
        )));
    }
    if let Some(&id) = inputs.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab_size: vocab,
        });
    }

    let mut hidden = Array2::zeros((batch * steps, h));
    let mut gates = Vec::with_capacity(steps);
    let mut cells = Vec::with_capacity(steps);
    let mut tanh_cells = Vec::with_capacity(steps);
    let mut h_prev = Array2::<F>::zeros((batch, h));
    let mut c_prev = Array2::<F>::zeros((batch, h));

    for t in 0..steps {
        let x = gather_rows(&params.embedding, inputs.column(t).iter().copied());
        let mut z = x.dot(&params.lstm_kernel) + h_prev.dot(&params.lstm_recurrent);
        z += &params.lstm_bias;
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j / h == 2 { v.tanh() } else { sigmoid(*v) };
            }
        }
        let i_g = z.slice(s![.., 0..h]);
        let f_g = z.slice(s![.., h..2 * h]);
        let g_g = z.slice(s![.., 2 * h..3 * h]);
        let o_g = z.slice(s![.., 3 * h..4 * h]);

        let mut c = Array2::zeros((batch, h));
        Zip::from(&mut c)
            .and(&f_g)
            .and(&c_prev)
            .and(&i_g)
            .and(&g_g)
            .for_each(|c, &f, &cp, &i, &g| *c = f * cp + i * g);
        let tc = c.mapv(|v| v.tanh());
        let h_t = &o_g * &tc;
        hidden.slice_mut(s![t..;steps, ..]).assign(&h_t);

        gates.push(z);
        c_prev = c.clone();
        cells.push(c);
        tanh_cells.push(tc);
        h_prev = h_t;
    }

    let dense = hidden.dot(&params.dense_w) + &params.dense_b;
    let logits = dense.dot(&params.out_w) + &params.out_b;
    Ok(ForwardCache {
        inputs: inputs.to_owned(),
        gates,
        cells,
        tanh_cells,
        hidden,
        dense,
        logits,
    })
}

/// Softmax of `row` written into `out`; returns `ln Σ exp(row - max)` and the max.
pub fn softmax_row<F: Float>(
    row: ndarray::ArrayView1<'_, F>,
    mut out: ArrayViewMut1<'_, F>,
) -> (F, F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    Zip::from(&mut out).and(&row).for_each(|o, &v| {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    });
    out.mapv_inplace(|e| e / sum);
    (sum.ln(), max)
}

/// Masked mean cross-entropy and its exact gradient with respect to every
/// parameter. `mask[b, t]` selects the scored positions.
pub fn backward<F: Float>(
    params: &ModelParameters<F>,
    cache: &ForwardCache<F>,
    targets: ArrayView2<'_, usize>,
    mask: ArrayView2<'_, bool>,
) -> Result<(f64, Gradients<F>), ModelError> {
    let (batch, steps) = (cache.batch_size(), cache.steps());
    if targets.dim() != (batch, steps) || mask.dim() != (batch, steps) {
        return Err(ModelError::Shape(format!(
            "targets {:?} / mask {:?} do not match batch ({batch}, {steps})",
            targets.dim(),
            mask.dim()
        )));
    }
    let vocab = params.embedding.nrows();
    let h = params.lstm_recurrent.nrows();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::NoUnmaskedTargets);
    }
    let scale = F::of(1.0 / count as f64);

    let mut d_logits = Array2::<F>::zeros(cache.logits.raw_dim());
    let mut loss = 0.0f64;
    for b in 0..batch {
        for t in 0..steps {
            if !mask[[b, t]] {
                continue;
            }
            let target = targets[[b, t]];
            if target >= vocab {
                return Err(ModelError::IdOutOfRange {
                    id: target,
                    vocab_size: vocab,
                });
            }
            let r = b * steps + t;
            let row = cache.logits.row(r);
            let mut d = d_logits.row_mut(r);
            let (log_sum, max) = softmax_row(row, d.view_mut());
            loss += (log_sum - (row[target] - max)).as_f64();
            d[target] -= F::one();
            d.mapv_inplace(|v| v * scale);
        }
    }
    let loss = loss / count as f64;

    let mut grads = params.zeros_like();
    grads.out_w = cache.dense.t().dot(&d_logits);
    grads.out_b = d_logits.sum_axis(Axis(0));
    let d_dense = d_logits.dot(&params.out_w.t());
    grads.dense_w = cache.hidden.t().dot(&d_dense);
    grads.dense_b = d_dense.sum_axis(Axis(0));
    let d_hidden = d_dense.dot(&params.dense_w.t());

    let mut dh_next = Array2::<F>::zeros((batch, h));
    let mut dc_next = Array2::<F>::zeros((batch, h));
    let zero_state = Array2::<F>::zeros((batch, h));
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let (i_g, f_g, g_g, o_g) = (
            gates.slice(s![.., 0..h]),
            gates.slice(s![.., h..2 * h]),
            gates.slice(s![.., 2 * h..3 * h]),
            gates.slice(s![.., 3 * h..4 * h]),
        );
        let c_prev = if t == 0 {
            &zero_state
        } else {
            &cache.cells[t - 1]
        };
        let tc = &cache.tanh_cells[t];

        let dh = &d_hidden.slice(s![t..;steps, ..]) + &dh_next;
        let mut dz = Array2::<F>::zeros((batch, 4 * h));
        let mut dc = Array2::<F>::zeros((batch, h));
        Zip::from(&mut dc)
            .and(&dc_next)
            .and(&dh)
            .and(&o_g)
            .and(tc)
            .for_each(|dc, &dcn, &dh, &o, &tc| *dc = dcn + dh * o * (F::one() - tc * tc));
        {
            let (mut dzi, rest) = dz.view_mut().split_at(Axis(1), h);
            let (mut dzf, rest) = rest.split_at(Axis(1), h);
            let (mut dzg, mut dzo) = rest.split_at(Axis(1), h);
            Zip::from(&mut dzi)
                .and(&dc)
                .and(&g_g)
                .and(&i_g)
                .for_each(|d, &dc, &g, &i| *d = dc * g * i * (F::one() - i));
            Zip::from(&mut dzf)
                .and(&dc)
                .and(c_prev)
                .and(&f_g)
                .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (F::one() - f));
            Zip::from(&mut dzg)
                .and(&dc)
                .and(&i_g)
                .and(&g_g)
                .for_each(|d, &dc, &i, &g| *d = dc * i * (F::one() - g * g));
            Zip::from(&mut dzo)
                .and(&dh)
                .and(tc)
                .and(&o_g)
                .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (F::one() - o));
        }

        let ids = cache.inputs.column(t);
        let x = gather_rows(&params.embedding, ids.iter().copied());
        grads.lstm_kernel += &x.t().dot(&dz);
        if t > 0 {
            let h_prev = cache.hidden.slice(s![t - 1..;steps, ..]);
            grads.lstm_recurrent += &h_prev.t().dot(&dz);
        }
        grads.lstm_bias += &dz.sum_axis(Axis(0));
        let dx = dz.dot(&params.lstm_kernel.t());
        for (row, &id) in dx.rows().into_iter().zip(ids.iter()) {
            let mut target = grads.embedding.row_mut(id);
            target += &row;
        }
        dh_next = dz.dot(&params.lstm_recurrent.t());
        dc_next = dc * f_g;
    }

    Ok((loss, grads))
}
