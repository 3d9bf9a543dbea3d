//! Reverse-mode gradient accumulation over the matrix operations used by the
//! encoder blocks, heads and losses.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the record in reverse and accumulates adjoints
//! for every node. Only the operations listed in [`Op`] are supported.

use super::matrix::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `m×n` plus a broadcast `1×n` row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    Exp(Var),
    MeanRows(Var),
    SumCols(Var),
    /// Row-wise division by an `m×1` column; rows whose divisor is below the
    /// guard produce zeros and pass no gradient.
    GuardedDivRows(Var, Var, f64),
    /// Mean binary cross-entropy with logits against constant targets.
    Bce(Var, Matrix),
    /// Per-row `1 - IoU` of `(x, y, w, h)` rows against constant targets.
    IouLoss(Var, Matrix),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `BCE(sigmoid(x), t)`.
pub fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `(iou, d iou / d pred)` for one `(x, y, w, h)` pair.
fn iou_and_grad(p: &[f64], g: &[f64]) -> (f64, [f64; 4]) {
    let (px2, py2) = (p[0] + p[2], p[1] + p[3]);
    let (gx2, gy2) = (g[0] + g[2], g[1] + g[3]);
    let ix1 = p[0].max(g[0]);
    let iy1 = p[1].max(g[1]);
    let ix2 = px2.min(gx2);
    let iy2 = py2.min(gy2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let pa = p[2] * p[3];
    let ga = g[2] * g[3];
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = pa + ga - inter;
    let iou = inter / union;
    // d iou = (U dI - I dU) / U^2, with dU = dA_p - dI
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);

    // Which side each intersection edge comes from (ties attributed to pred).
    let x1_from_p = if p[0] >= g[0] { 1.0 } else { 0.0 };
    let y1_from_p = if p[1] >= g[1] { 1.0 } else { 0.0 };
    let x2_from_p = if px2 <= gx2 { 1.0 } else { 0.0 };
    let y2_from_p = if py2 <= gy2 { 1.0 } else { 0.0 };

    let diw_dx = x2_from_p - x1_from_p;
    let diw_dw = x2_from_p;
    let dih_dy = y2_from_p - y1_from_p;
    let dih_dh = y2_from_p;

    let di = [diw_dx * ih, dih_dy * iw, diw_dw * ih, dih_dh * iw];
    let da = [0.0, 0.0, p[3], p[2]];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_inter * di[k] + d_area * da[k];
    }
    (iou, grad)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "broadcast row shape mismatch");
        let mut v = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..m {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let v = Matrix::from_vec(m.rows(), 1, data);
        self.push(v, Op::SumCols(a))
    }

    pub fn guarded_div_rows(&mut self, num: Var, den: Var, guard: f64) -> Var {
        let n = self.value(num);
        let d = self.value(den);
        assert_eq!(d.shape(), (n.rows(), 1), "divisor must be a column");
        let mut out = Matrix::zeros(n.rows(), n.cols());
        for r in 0..n.rows() {
            let dv = d.get(r, 0);
            if dv >= guard {
                for (o, x) in out.row_mut(r).iter_mut().zip(n.row(r)) {
                    *o = x / dv;
                }
            }
        }
        self.push(out, Op::GuardedDivRows(num, den, guard))
    }

    /// Mean BCE over all entries; 0 for an empty matrix.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce target shape mismatch");
        let n = x.as_slice().len();
        let total: f64 = x
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&x, &t)| bce_with_logits(x, t))
            .sum();
        let v = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(Matrix::filled(1, 1, v), Op::Bce(logits, targets))
    }

    pub fn iou_loss(&mut self, pred: Var, targets: Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.cols(), 4);
        assert_eq!(p.shape(), targets.shape(), "iou target shape mismatch");
        let data = (0..p.rows())
            .map(|r| 1.0 - iou_and_grad(p.row(r), targets.row(r)).0)
            .collect();
        let v = Matrix::from_vec(p.rows(), 1, data);
        self.push(v, Op::IouLoss(pred, targets))
    }

    /// Mean of all entries as a `1×1`; 0 for an empty matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.as_slice().len();
        let v = if n == 0 { 0.0 } else { m.sum() / n as f64 };
        self.push(Matrix::filled(1, 1, v), Op::Mean(a))
    }

    /// Accumulates adjoints of every node with respect to `output`, seeded
    /// with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let (r, c) = self.shape(output);
        grads[output.0] = Some(Matrix::filled(r, c, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.matmul(&bv.transpose()));
                    acc(&mut grads, *b, av.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, {
                        let mut s = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in s.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        s
                    });
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice_rows(offset, rows));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        let mut part = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(&mut grads, *p, part);
                        offset += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        full.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, full);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        full.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, full);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv)));
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |gv, y| gv * y)),
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, gv) in full.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = gv / rows as f64;
                        }
                    }
                    acc(&mut grads, *a, full);
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut full = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        full.row_mut(r).iter_mut().for_each(|o| *o = g.get(r, 0));
                    }
                    acc(&mut grads, *a, full);
                }
                Op::GuardedDivRows(num, den, guard) => {
                    let n = self.value(*num);
                    let d = self.value(*den);
                    let mut dn = Matrix::zeros(n.rows(), n.cols());
                    let mut dd = Matrix::zeros(d.rows(), 1);
                    for r in 0..n.rows() {
                        let dv = d.get(r, 0);
                        if dv < *guard {
                            continue;
                        }
                        let mut s = 0.0;
                        for (c, (o, gv)) in dn.row_mut(r).iter_mut().zip(g.row(r)).enumerate() {
                            *o = gv / dv;
                            s += gv * n.get(r, c);
                        }
                        dd.set(r, 0, -s / (dv * dv));
                    }
                    acc(&mut grads, *num, dn);
                    acc(&mut grads, *den, dd);
                }
                Op::Bce(logits, targets) => {
                    let x = self.value(*logits);
                    let n = x.as_slice().len().max(1) as f64;
                    let scale = g.get(0, 0) / n;
                    acc(&mut grads, *logits, x.zip_map(targets, |xv, t| (sigmoid(xv) - t) * scale));
                }
                Op::IouLoss(pred, targets) => {
                    let p = self.value(*pred);
                    let mut dp = Matrix::zeros(p.rows(), 4);
                    for r in 0..p.rows() {
                        let (_, d_iou) = iou_and_grad(p.row(r), targets.row(r));
                        let gv = g.get(r, 0);
                        for (o, d) in dp.row_mut(r).iter_mut().zip(d_iou) {
                            *o = -gv * d;
                        }
                    }
                    acc(&mut grads, *pred, dp);
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = (rows * cols).max(1) as f64;
                    acc(&mut grads, *a, Matrix::filled(rows, cols, g.get(0, 0) / n));
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}
