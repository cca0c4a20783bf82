//! Dense row-major matrices, affine layers with hand-derived gradients, and a
//! finite-difference gradient checker.
//!
//! Batched operations treat each matrix row as one sample. The single-sample
//! entry points (`affine`, `affine_backward`) are batches of one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("Matrix::from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Picks rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Picks columns by index, zero-padding the result to `width` columns.
    pub fn select_columns_padded(&self, idx: &[usize], width: usize) -> Matrix {
        debug_assert!(idx.len() <= width);
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (o, &c) in idx.iter().enumerate() {
                dst[o] = src[c];
            }
        }
        out
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::dim("Matrix::hcat", format!("{rows} rows"), bad.rows));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for m in parts {
                dst[off..off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        Ok(out)
    }

    /// Inverse of [`Matrix::hcat`]: splits columns into consecutive widths.
    pub fn hsplit(&self, widths: &[usize]) -> Result<Vec<Matrix>> {
        let total: usize = widths.iter().sum();
        if total != self.cols {
            return Err(Error::dim("Matrix::hsplit", self.cols, total));
        }
        let mut out: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(self.rows, w)).collect();
        for r in 0..self.rows {
            let src = self.row(r);
            let mut off = 0;
            for (m, &w) in out.iter_mut().zip(widths) {
                m.row_mut(r).copy_from_slice(&src[off..off + w]);
                off += w;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_affine_shapes(context: &str, in_cols: usize, w: &Matrix, b_len: usize) -> Result<()> {
    if in_cols != w.cols {
        return Err(Error::dim(
            context,
            format!("input width {} (W is {}x{})", w.cols, w.rows, w.cols),
            format!("input width {in_cols}"),
        ));
    }
    if b_len != w.rows {
        return Err(Error::dim(
            context,
            format!("bias length {} (W is {}x{})", w.rows, w.rows, w.cols),
            format!("bias length {b_len}"),
        ));
    }
    Ok(())
}

/// `W·x + b` for one sample.
pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(affine_batch(&Matrix::row_vector(x), w, b)?.into_data())
}

/// Row-wise affine map: each output row is `W·x_r + b`.
pub fn affine_batch(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    check_affine_shapes("affine", x.cols, w, b.len())?;
    let mut out = Matrix::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for (i, o) in or.iter_mut().enumerate() {
            *o = dot(w.row(i), xr) + b[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub grad_x: Vec<f64>,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

/// Gradients of `W·x + b` given the upstream gradient for one sample.
pub fn affine_backward(grad_out: &[f64], x: &[f64], w: &Matrix) -> Result<AffineGrads> {
    if grad_out.len() != w.rows {
        return Err(Error::dim(
            "affine_backward",
            format!("grad_out length {} (W is {}x{})", w.rows, w.rows, w.cols),
            grad_out.len(),
        ));
    }
    let mut grad_w = Matrix::zeros(w.rows, w.cols);
    let mut grad_b = vec![0.0; w.rows];
    let grad_x = affine_backward_batch(
        &Matrix::row_vector(grad_out),
        &Matrix::row_vector(x),
        w,
        &mut grad_w,
        &mut grad_b,
        true,
    )?
    .expect("grad_x requested");
    Ok(AffineGrads {
        grad_x: grad_x.into_data(),
        grad_w,
        grad_b,
    })
}

/// Batched affine backward pass. Accumulates (adds) into `grad_w` and
/// `grad_b`, and returns the input gradient when `want_grad_x` is set.
pub fn affine_backward_batch(
    grad_out: &Matrix,
    x: &Matrix,
    w: &Matrix,
    grad_w: &mut Matrix,
    grad_b: &mut [f64],
    want_grad_x: bool,
) -> Result<Option<Matrix>> {
    check_affine_shapes("affine_backward", x.cols, w, grad_out.cols)?;
    if grad_out.rows != x.rows {
        return Err(Error::dim("affine_backward batch", x.rows, grad_out.rows));
    }
    if grad_w.shape() != w.shape() || grad_b.len() != w.rows {
        return Err(Error::dim(
            "affine_backward accumulators",
            format!("{:?}", w.shape()),
            format!("{:?}", grad_w.shape()),
        ));
    }
    let mut grad_x = want_grad_x.then(|| Matrix::zeros(x.rows, x.cols));
    for r in 0..x.rows {
        let g = grad_out.row(r);
        let xr = x.row(r);
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            grad_b[i] += gi;
            axpy(gi, xr, grad_w.row_mut(i));
            if let Some(gx) = grad_x.as_mut() {
                axpy(gi, w.row(i), gx.row_mut(r));
            }
        }
    }
    Ok(grad_x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.scalar(v)).collect()
    }

    #[inline]
    fn scalar(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    pub fn apply_in_place(self, m: &mut Matrix) {
        if self == Activation::Identity {
            return;
        }
        m.data.iter_mut().for_each(|v| *v = self.scalar(*v));
    }

    /// Multiplies `grad` in place by the activation derivative, expressed in
    /// terms of the activation's output.
    pub fn backward_in_place(self, grad: &mut Matrix, output: &Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (g, &o) in grad.data.iter_mut().zip(&output.data) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &o) in grad.data.iter_mut().zip(&output.data) {
                    *g *= o * (1.0 - o);
                }
            }
        }
    }
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Which network section a parameter belongs to; freezing works per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Downstream,
}

/// One affine layer's weights, bias and gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, weight: Matrix, bias: Vec<f64>) -> Self {
        let (r, c) = weight.shape();
        debug_assert_eq!(bias.len(), r);
        Self {
            name: name.into(),
            group,
            grad_weight: Matrix::zeros(r, c),
            grad_bias: vec![0.0; r],
            weight,
            bias,
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Value at flat index `k`: weights first (row-major), then biases.
    fn value_mut(&mut self, k: usize) -> &mut f64 {
        let nw = self.weight.data.len();
        if k < nw {
            &mut self.weight.data[k]
        } else {
            &mut self.bias[k - nw]
        }
    }

    fn grad(&self, k: usize) -> f64 {
        let nw = self.grad_weight.data.len();
        if k < nw {
            self.grad_weight.data[k]
        } else {
            self.grad_bias[k - nw]
        }
    }
}

/// Handle to an entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Validation(format!("duplicate parameter name `{}`", param.name)));
        }
        let id = self.entries.len();
        self.index.insert(param.name.clone(), id);
        self.entries.push(param);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(Param::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(Param::zero_grad);
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.entries.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.entries.iter_mut().for_each(|p| p.frozen = false);
    }

    pub fn is_group_frozen(&self, group: ParamGroup) -> bool {
        self.entries.iter().filter(|p| p.group == group).all(|p| p.frozen)
    }

    /// Sum of absolute element-wise differences over one group's parameters.
    pub fn group_abs_delta(&self, other: &ParamStore, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .filter(|(a, _)| a.group == group)
            .map(|(a, b)| {
                let w: f64 = a.weight.data.iter().zip(&b.weight.data).map(|(x, y)| (x - y).abs()).sum();
                let bias: f64 = a.bias.iter().zip(&b.bias).map(|(x, y)| (x - y).abs()).sum();
                w + bias
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat element index of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` must evaluate the loss deterministically and accumulate its
/// analytic gradient into the store's gradient buffers. Frozen entries are
/// skipped. Gradients are left zeroed on return.
pub fn grad_check<F>(params: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    params.zero_grads();
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::GradCheck {
            param: "<base>".into(),
            message: format!("loss is {base}"),
        });
    }
    let analytic: Vec<Vec<f64>> = params
        .entries
        .iter()
        .map(|p| (0..p.len()).map(|k| p.grad(k)).collect())
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for e in 0..params.entries.len() {
        if params.entries[e].frozen {
            continue;
        }
        for k in 0..params.entries[e].len() {
            let orig = *params.entries[e].value_mut(k);
            *params.entries[e].value_mut(k) = orig + eps;
            let plus = loss_fn(params)?;
            *params.entries[e].value_mut(k) = orig - eps;
            let minus = loss_fn(params)?;
            *params.entries[e].value_mut(k) = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck {
                    param: params.entries[e].name.clone(),
                    message: format!("non-finite loss at element {k}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[e][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.entries[e].name.clone(), k));
            }
        }
    }
    params.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let out = affine(&[3.0, 4.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);

        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(affine(&[1.0, 2.0], &w, &[1.0, 0.0]).unwrap(), vec![4.0, 2.0]);

        assert_eq!(affine(&[9.0, 9.0], &Matrix::zeros(1, 2), &[5.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = affine(&[1.0, 2.0, 3.0], &Matrix::zeros(2, 2), &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x2") && msg.contains('3'), "{msg}");
    }

    #[test]
    fn affine_backward_examples() {
        let g = affine_backward(&[1.0], &[2.0, 3.0], &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(g.grad_x, vec![0.0, 0.0]);
        assert_eq!(g.grad_w.data(), &[2.0, 3.0]);
        assert_eq!(g.grad_b, vec![1.0]);

        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap();
        let g = affine_backward(&[0.0, 0.0], &[2.0, 3.0], &w).unwrap();
        assert!(g.grad_x.iter().chain(g.grad_w.data()).chain(&g.grad_b).all(|&v| v == 0.0));
    }

    #[test]
    fn affine_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = || rng.random_range(-1.0..1.0);
        let w = Matrix::new(3, 4, (0..12).map(|_| r()).collect()).unwrap();
        let b: Vec<f64> = (0..3).map(|_| r()).collect();
        let x: Vec<f64> = (0..4).map(|_| r()).collect();
        let up: Vec<f64> = (0..3).map(|_| r()).collect();
        // scalar objective: up · (W x + b)
        let f = |w: &Matrix, b: &[f64], x: &[f64]| -> f64 {
            affine(x, w, b).unwrap().iter().zip(&up).map(|(a, c)| a * c).sum()
        };
        let g = affine_backward(&up, &x, &w).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for k in 0..4 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let n = (f(&w, &b, &xp) - f(&w, &b, &xm)) / (2.0 * h);
            assert!(rel(g.grad_x[k], n) < 1e-6);
        }
        for k in 0..12 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[k] += h;
            wm.data_mut()[k] -= h;
            let n = (f(&wp, &b, &x) - f(&wm, &b, &x)) / (2.0 * h);
            assert!(rel(g.grad_w.data()[k], n) < 1e-6);
        }
        for k in 0..3 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[k] += h;
            bm[k] -= h;
            let n = (f(&w, &bp, &x) - f(&w, &bm, &x)) / (2.0 * h);
            assert!(rel(g.grad_b[k], n) < 1e-6);
        }
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(Activation::Sigmoid.apply(&[0.0]), vec![0.5]);
        let x = [1.5, -3.0, 0.0];
        assert_eq!(Activation::Identity.apply(&x), x.to_vec());
        let s = Activation::Sigmoid.apply(&[-700.0, 700.0, -30.0, 30.0]);
        assert!(s.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let p = softmax(&[1.0, 2.0]);
        assert!((p[0] - 0.2689).abs() < 1e-4 && (p[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn grad_check_quadratic() {
        let mut store = ParamStore::new();
        let id = store
            .insert(Param::new(
                "w",
                ParamGroup::Encoder,
                Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
                vec![0.0],
            ))
            .unwrap();
        // analytic gradient of ||W||^2
        let loss = |s: &mut ParamStore| -> Result<f64> {
            let p = s.get_mut(id);
            let w = p.weight.data().to_vec();
            for (g, v) in p.grad_weight.data_mut().iter_mut().zip(&w) {
                *g += 2.0 * v;
            }
            Ok(w.iter().map(|v| v * v).sum())
        };
        store.zero_grads();
        let mut probe = store.clone();
        loss(&mut probe).unwrap();
        assert_eq!(probe.get(id).grad_weight.data(), &[2.0, 4.0]);
        let report = grad_check(&mut store, 1e-5, loss).unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn grad_check_skips_frozen_and_reports_non_finite() {
        let mut store = ParamStore::new();
        store
            .insert(Param::new("a", ParamGroup::Encoder, Matrix::zeros(1, 1), vec![0.0]))
            .unwrap();
        let frozen = store
            .insert(Param::new("b", ParamGroup::Decoder, Matrix::zeros(1, 1), vec![0.0]))
            .unwrap();
        store.set_group_frozen(ParamGroup::Decoder, true);
        // Deliberately wrong gradient (zero) on the frozen entry: must not be checked.
        let loss = |s: &mut ParamStore| -> Result<f64> { Ok(3.0 * s.get(frozen).bias[0]) };
        let report = grad_check(&mut store, 1e-5, loss).unwrap();
        assert_eq!(report.checked, 2);
        assert_eq!(report.max_relative_error, 0.0);

        let mut store2 = ParamStore::new();
        store2
            .insert(Param::new("c", ParamGroup::Encoder, Matrix::zeros(1, 1), vec![0.0]))
            .unwrap();
        let err = grad_check(&mut store2, 1e-5, |s: &mut ParamStore| {
            let v = s.get(ParamId(0)).bias[0];
            Ok(if v > 0.0 { f64::NAN } else { 0.0 })
        })
        .unwrap_err();
        assert!(err.to_string().contains("`c`"), "{err}");
    }

    #[test]
    fn hcat_hsplit_inverse() {
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = Matrix::hcat(&[&a, &b]).unwrap();
        assert_eq!(c.row(1), &[2.0, 5.0, 6.0]);
        let parts = c.hsplit(&[1, 2]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }
}
