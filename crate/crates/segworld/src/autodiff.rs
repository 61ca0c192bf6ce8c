//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! The op set is exactly what the two-pass forward needs: matrix products,
//! broadcast adds, row softmax, RMS norm, SiLU, sigmoid, gathers/concats/slices,
//! and fused loss heads (mean cross-entropy, mean BCE-with-logits). Values are
//! computed eagerly; `backward` walks the tape in reverse.

use std::collections::HashMap;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Mat {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        Mat {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "not a scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C = A * B
    fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dim");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// C = A * B^T
    fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// C = A^T * B
    fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dim");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const RMS_EPS: f64 = 1e-8;

enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    RmsNorm(Var, Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Sum(Var),
    Div(Var, Var),
    MeanCrossEntropy(Var, Vec<usize>),
    BceWithLogitsMean(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by one backward pass, keyed by parameter id.
pub struct Gradients {
    by_param: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    pub fn into_map(self) -> HashMap<ParamId, Mat> {
        self.by_param
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Mat::from_vec(1, 1, vec![value]))
    }

    pub fn param(&mut self, id: ParamId, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// A * B^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape");
        let mut value = va.clone();
        value.add_assign(vb);
        self.push(value, Op::Add(a, b))
    }

    /// X[m,n] + r[1,n], broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert_eq!(vr.rows, 1, "add_row expects a row vector");
        assert_eq!(va.cols, vr.cols, "add_row width");
        let mut value = va.clone();
        for i in 0..value.rows {
            for j in 0..value.cols {
                value.data[i * value.cols + j] += vr.data[j];
            }
        }
        self.push(value, Op::AddRow(a, r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x * c).collect());
        self.push(value, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * sigmoid(x)).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(value, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| sigmoid(x)).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise RMS normalization with a learned gain: y_ij = x_ij * g_j / rms_i.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Var {
        let (va, vg) = (self.value(a), self.value(gain));
        assert_eq!(vg.rows, 1, "rms_norm gain is a row vector");
        assert_eq!(va.cols, vg.cols, "rms_norm width");
        let mut value = Mat::zeros(va.rows, va.cols);
        for i in 0..va.rows {
            let row = va.row(i);
            let ms = row.iter().map(|x| x * x).sum::<f64>() / va.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for j in 0..va.cols {
                value.data[i * va.cols + j] = row[j] * vg.data[j] * inv;
            }
        }
        self.push(value, Op::RmsNorm(a, gain))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(va.rows, va.cols);
        for i in 0..va.rows {
            let row = va.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..va.cols {
                let e = (row[j] - max).exp();
                value.data[i * va.cols + j] = e;
                sum += e;
            }
            for j in 0..va.cols {
                value.data[i * va.cols + j] /= sum;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Y[k] = A[ids[k]], a row gather (e.g. embedding lookup).
    pub fn gather_rows(&mut self, a: Var, ids: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(ids.len(), va.cols);
        for (k, &id) in ids.iter().enumerate() {
            assert!(id < va.rows, "gather id out of range");
            value.data[k * va.cols..(k + 1) * va.cols].copy_from_slice(va.row(id));
        }
        self.push(value, Op::GatherRows(a, ids))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in &parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat width");
            value.data[at * cols..(at + vp.rows) * cols].copy_from_slice(&vp.data);
            at += vp.rows;
        }
        self.push(value, Op::ConcatRows(parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows, "slice out of range");
        let value = Mat::from_vec(
            len,
            va.cols,
            va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        );
        self.push(value, Op::SliceRows(a, start, len))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![total]), Op::Sum(a))
    }

    /// Scalar division a / b.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).scalar() / self.value(b).scalar();
        self.push(Mat::from_vec(1, 1, vec![value]), Op::Div(a, b))
    }

    /// Mean over rows of -log softmax(logits)[target].
    pub fn mean_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len(), "one target per row");
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < vl.cols, "target out of range");
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[t];
        }
        let value = total / targets.len() as f64;
        self.push(
            Mat::from_vec(1, 1, vec![value]),
            Op::MeanCrossEntropy(logits, targets),
        )
    }

    /// Mean over entries of the numerically stable BCE-with-logits.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.data.len(), targets.len(), "one target per logit");
        let mut total = 0.0;
        for (&z, &t) in vl.data.iter().zip(&targets) {
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let value = total / targets.len() as f64;
        self.push(
            Mat::from_vec(1, 1, vec![value]),
            Op::BceWithLogitsMean(logits, targets),
        )
    }

    /// Reverse pass from a scalar root; returns gradients for every parameter
    /// leaf reachable from it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            (self.value(root).rows, self.value(root).cols),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = grad.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&grad);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = grad.matmul(self.value(*b));
                    let db = grad.matmul_tn(self.value(*a));
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, grad.clone());
                    self.accumulate(&mut grads, *b, grad);
                }
                Op::AddRow(a, r) => {
                    let vr = self.value(*r);
                    let mut dr = Mat::zeros(1, vr.cols);
                    for i in 0..grad.rows {
                        for j in 0..grad.cols {
                            dr.data[j] += grad.data[i * grad.cols + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, grad);
                    self.accumulate(&mut grads, *r, dr);
                }
                Op::Sub(a, b) => {
                    let db = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().map(|g| -g).collect(),
                    );
                    self.accumulate(&mut grads, *a, grad);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect(),
                    );
                    let db = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(&va.data).map(|(g, x)| g * x).collect(),
                    );
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let da = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().map(|g| g * c).collect(),
                    );
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    let va = self.value(*a);
                    let data = grad
                        .data
                        .iter()
                        .zip(&va.data)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, *a, Mat::from_vec(grad.rows, grad.cols, data));
                }
                Op::Sigmoid(a) => {
                    let vy = &node.value;
                    let data = grad
                        .data
                        .iter()
                        .zip(&vy.data)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(&mut grads, *a, Mat::from_vec(grad.rows, grad.cols, data));
                }
                Op::RmsNorm(a, gain) => {
                    let (va, vg) = (self.value(*a), self.value(*gain));
                    let n = va.cols;
                    let mut da = Mat::zeros(va.rows, n);
                    let mut dg = Mat::zeros(1, n);
                    for i in 0..va.rows {
                        let row = va.row(i);
                        let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
                        let r = (ms + RMS_EPS).sqrt();
                        // dot = sum_k G_ik * g_k * x_ik
                        let mut dot = 0.0;
                        for k in 0..n {
                            dot += grad.data[i * n + k] * vg.data[k] * row[k];
                        }
                        for j in 0..n {
                            let g_ij = grad.data[i * n + j];
                            da.data[i * n + j] =
                                g_ij * vg.data[j] / r - row[j] * dot / (n as f64 * r * r * r);
                            dg.data[j] += g_ij * row[j] / r;
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *gain, dg);
                }
                Op::SoftmaxRows(a) => {
                    let vy = &node.value;
                    let mut da = Mat::zeros(vy.rows, vy.cols);
                    for i in 0..vy.rows {
                        let yrow = vy.row(i);
                        let grow = grad.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..vy.cols {
                            da.data[i * vy.cols + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, ids) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows, va.cols);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..va.cols {
                            da.data[id * va.cols + j] += grad.data[k * va.cols + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let dp = Mat::from_vec(
                            vp.rows,
                            vp.cols,
                            grad.data[at * vp.cols..(at + vp.rows) * vp.cols].to_vec(),
                        );
                        self.accumulate(&mut grads, p, dp);
                        at += vp.rows;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows, va.cols);
                    da.data[start * va.cols..(start + len) * va.cols].copy_from_slice(&grad.data);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    let g = grad.scalar();
                    self.accumulate(
                        &mut grads,
                        *a,
                        Mat::from_vec(va.rows, va.cols, vec![g; va.data.len()]),
                    );
                }
                Op::Div(a, b) => {
                    let (x, y) = (self.value(*a).scalar(), self.value(*b).scalar());
                    let g = grad.scalar();
                    self.accumulate(&mut grads, *a, Mat::from_vec(1, 1, vec![g / y]));
                    self.accumulate(&mut grads, *b, Mat::from_vec(1, 1, vec![-g * x / (y * y)]));
                }
                Op::MeanCrossEntropy(logits, targets) => {
                    let vl = self.value(*logits);
                    let g = grad.scalar() / targets.len() as f64;
                    let mut dl = Mat::zeros(vl.rows, vl.cols);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = vl.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..vl.cols {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl.data[i * vl.cols + j] = g * (p - onehot);
                        }
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
                Op::BceWithLogitsMean(logits, targets) => {
                    let vl = self.value(*logits);
                    let g = grad.scalar() / targets.len() as f64;
                    let data = vl
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| g * (sigmoid(z) - t))
                        .collect();
                    self.accumulate(
                        &mut grads,
                        *logits,
                        Mat::from_vec(vl.rows, vl.cols, data),
                    );
                }
            }
        }

        let mut by_param = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(grad) = grads[idx].take() {
                    match by_param.entry(id) {
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(grad);
                        }
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            e.get_mut().add_assign(&grad);
                        }
                    }
                }
            }
        }
        Gradients { by_param }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], target: Var, grad: Mat) {
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Compare the analytic gradient of `build`'s scalar output against
    /// central finite differences for every entry of every input matrix.
    fn check_gradients(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let forward = |mats: &[Mat]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = mats
                .iter()
                .enumerate()
                .map(|(i, m)| tape.param(i, m.clone()))
                .collect();
            let out = build(&mut tape, &vars);
            tape.value(out).scalar()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, m)| tape.param(i, m.clone()))
            .collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);

        let h = 1e-5;
        for (pid, mat) in inputs.iter().enumerate() {
            let analytic = grads
                .param(pid)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(mat.rows, mat.cols));
            for k in 0..mat.data.len() {
                let mut plus = inputs.to_vec();
                plus[pid].data[k] += h;
                let mut minus = inputs.to_vec();
                minus[pid].data[k] -= h;
                let numeric = (forward(&plus) - forward(&minus)) / (2.0 * h);
                let a = analytic.data[k];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "param {pid} entry {k}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random_mat(&mut rng, 3, 4),
            random_mat(&mut rng, 4, 5),
            random_mat(&mut rng, 3, 5),
        ];
        check_gradients(&inputs, |tape, v| {
            let prod = tape.matmul(v[0], v[1]);
            let mixed = tape.mul(prod, v[2]);
            tape.sum(mixed)
        });
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random_mat(&mut rng, 3, 4), random_mat(&mut rng, 5, 4)];
        check_gradients(&inputs, |tape, v| {
            let prod = tape.matmul_nt(v[0], v[1]);
            let act = tape.silu(prod);
            tape.sum(act)
        });
    }

    #[test]
    fn softmax_rmsnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            random_mat(&mut rng, 4, 6),
            random_mat(&mut rng, 1, 6),
            random_mat(&mut rng, 4, 6),
        ];
        check_gradients(&inputs, |tape, v| {
            let normed = tape.rms_norm(v[0], v[1]);
            let soft = tape.softmax_rows(normed);
            let mixed = tape.mul(soft, v[2]);
            tape.sum(mixed)
        });
    }

    #[test]
    fn gather_concat_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random_mat(&mut rng, 5, 3), random_mat(&mut rng, 2, 3)];
        check_gradients(&inputs, |tape, v| {
            let gathered = tape.gather_rows(v[0], vec![1, 1, 4, 0]);
            let joined = tape.concat_rows(vec![gathered, v[1]]);
            let sliced = tape.slice_rows(joined, 1, 4);
            let act = tape.sigmoid(sliced);
            tape.sum(act)
        });
    }

    #[test]
    fn loss_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![random_mat(&mut rng, 3, 7), random_mat(&mut rng, 4, 1)];
        check_gradients(&inputs, |tape, v| {
            let ce = tape.mean_cross_entropy(v[0], vec![2, 0, 6]);
            let bce = tape.bce_with_logits_mean(v[1], vec![1.0, 0.0, 1.0, 0.0]);
            tape.add(ce, bce)
        });
    }

    #[test]
    fn scalar_ratio_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![random_mat(&mut rng, 3, 3), random_mat(&mut rng, 3, 3)];
        check_gradients(&inputs, |tape, v| {
            let probs = tape.sigmoid(v[0]);
            let weighted = tape.mul(probs, v[1]);
            let num = tape.sum(weighted);
            let num2 = tape.scale(num, 2.0);
            let eps = tape.scalar(1e-6);
            let num3 = tape.add(num2, eps);
            let den_sum = tape.sum(probs);
            let den_c = tape.scalar(4.0 + 1e-6);
            let den = tape.add(den_sum, den_c);
            let ratio = tape.div(num3, den);
            let one = tape.scalar(1.0);
            tape.sub(one, ratio)
        });
    }

    #[test]
    fn add_row_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![random_mat(&mut rng, 4, 3), random_mat(&mut rng, 1, 3)];
        check_gradients(&inputs, |tape, v| {
            let shifted = tape.add_row(v[0], v[1]);
            let act = tape.silu(shifted);
            tape.sum(act)
        });
    }

    #[test]
    fn param_reuse_accumulates() {
        // Using the same parameter twice must sum both contributions.
        let m = Mat::from_vec(1, 2, vec![0.3, -0.7]);
        let mut tape = Tape::new();
        let a = tape.param(0, m.clone());
        let b = tape.param(0, m.clone());
        let sum = tape.add(a, b);
        let out = tape.sum(sum);
        let grads = tape.backward(out);
        assert_eq!(grads.param(0).unwrap().data, vec![2.0, 2.0]);
    }

    #[test]
    fn stable_bce_matches_naive_formula() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Mat::from_vec(1, 3, vec![0.0, 30.0, -30.0]));
        let loss = tape.bce_with_logits_mean(logits, vec![1.0, 1.0, 0.0]);
        let expected = ((2f64).ln() + 0.0 + 0.0) / 3.0;
        assert!((tape.value(loss).scalar() - expected).abs() < 1e-9);
    }
}
