//! Reverse-mode differentiation over a linear tape of array operations.
//!
//! Every operation records its parents and enough payload to replay the
//! backward rule. `backward` walks the tape once in reverse, visiting only
//! ancestors of the loss, and accumulates adjoints per node.

use crate::nd::{gelu_grad_scalar, gelu_scalar, l2_normalize_rows, softmax_rows_inplace, NdArray, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, T),
    /// [R,C] + broadcast [C]
    AddRowVec(Var, Var),
    /// elementwise product with a constant array
    MulConst(Var, NdArray<T>),
    /// ln(max(x, eps))
    LogFloor(Var, T),
    SoftmaxRows(Var),
    /// row norms from the forward pass are cached for the backward rule
    L2NormRows { x: Var, eps: T, norms: Vec<T> },
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: T },
    Gelu(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize, len: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Var, Var),
    /// out[r] = mask[r] ? fill : x[r]
    ReplaceMaskedRows { x: Var, mask: Vec<bool>, fill: Var },
    SumAll(Var),
    SumRows(Var),
    DotConst { x: Var, w: NdArray<T> },
}

struct Node<T: Scalar> {
    value: NdArray<T>,
    op: Op<T>,
    /// Leaves created as constants are excluded from gradient reports.
    constant: bool,
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<NdArray<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. `v`. Nodes the loss does not depend on
    /// report zeros of the right shape.
    pub fn get(&self, v: Var) -> NdArray<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => NdArray::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> NdArray<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => NdArray::zeros(&self.shapes[v.0]),
        }
    }
}

/// Linear tape of recorded operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a [1]-shaped node.
    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node, got shape {:?}", val.shape());
        val.data()[0]
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            constant: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or data leaf).
    pub fn leaf(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input excluded from gradient bookkeeping (e.g. detached teacher
    /// outputs entering a student graph).
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            constant: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn is_constant(&self, v: Var) -> bool {
        self.nodes[v.0].constant
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let (rows, cols) = xv.as_2d();
        assert_eq!(vv.len(), cols, "add_row_vec width mismatch");
        let mut out = xv.clone();
        for r in 0..rows {
            for c in 0..cols {
                let y = out.at(r, c) + vv.data()[c];
                out.set(r, c, y);
            }
        }
        self.push(out, Op::AddRowVec(x, v))
    }

    pub fn mul_const(&mut self, x: Var, c: NdArray<T>) -> Var {
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(v, Op::MulConst(x, c))
    }

    pub fn log_floor(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x).map(|a| if a > eps { a.ln() } else { eps.ln() });
        self.push(v, Op::LogFloor(x, eps))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        softmax_rows_inplace(&mut v);
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn l2norm_rows(&mut self, x: Var, eps: T) -> Var {
        let (v, norms) = l2_normalize_rows(self.value(x), eps);
        self.push(v, Op::L2NormRows { x, eps, norms })
    }

    pub fn layernorm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.as_2d();
        assert_eq!(self.value(gain).len(), cols, "layernorm gain width mismatch");
        assert_eq!(self.value(bias).len(), cols, "layernorm bias width mismatch");
        let mut out = NdArray::zeros(xv.shape());
        let denom = T::of(cols as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= denom;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= denom;
            let inv = (var + eps).sqrt().recip();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                out.set(r, c, g[c] * xh + b[c]);
            }
        }
        self.push(out, Op::LayerNormRows { x, gain, bias, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, Op::Gelu(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_tn(self.value(b));
        self.push(v, Op::MatMulTN(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ra, ca) = av.as_2d();
        let (rb, cb) = bv.as_2d();
        assert_eq!(ca, cb, "concat_rows width mismatch");
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = NdArray::from_vec(&[ra + rb, ca], data).unwrap();
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.as_2d();
        assert!(start + len <= rows, "slice_rows out of bounds");
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let v = NdArray::from_vec(&[len, cols], data).unwrap();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.as_2d();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            assert!(i < rows, "select_rows index {i} out of bounds ({rows} rows)");
            data.extend_from_slice(xv.row(i));
        }
        let v = NdArray::from_vec(&[idx.len(), cols], data).unwrap();
        self.push(v, Op::SelectRows { x, idx })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.as_2d();
        assert!(start + len <= cols, "slice_cols out of bounds");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let v = NdArray::from_vec(&[rows, len], data).unwrap();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ra, ca) = av.as_2d();
        let (rb, cb) = bv.as_2d();
        assert_eq!(ra, rb, "concat_cols height mismatch");
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = NdArray::from_vec(&[ra, ca + cb], data).unwrap();
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn replace_masked_rows(&mut self, x: Var, mask: &[bool], fill: Var) -> Var {
        let xv = self.value(x);
        let fv = self.value(fill);
        let (rows, cols) = xv.as_2d();
        assert_eq!(mask.len(), rows, "mask length must equal row count");
        assert_eq!(fv.len(), cols, "fill width mismatch");
        let mut out = xv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(fv.data());
            }
        }
        self.push(
            out,
            Op::ReplaceMaskedRows {
                x,
                mask: mask.to_vec(),
                fill,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = NdArray::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// Sum over the trailing axis: [R,C] -> [R].
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, _) = xv.as_2d();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = T::zero();
            for &v in xv.row(r) {
                acc += v;
            }
            data.push(acc);
        }
        let v = NdArray::from_vec(&[rows], data).unwrap();
        self.push(v, Op::SumRows(x))
    }

    pub fn dot_const(&mut self, x: Var, w: NdArray<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len(), "dot_const length mismatch");
        let mut acc = T::zero();
        for (&a, &b) in xv.data().iter().zip(w.data()) {
            acc += a * b;
        }
        self.push(NdArray::scalar(acc), Op::DotConst { x, w })
    }

    fn parents(&self, i: usize) -> Vec<usize> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulElem(a, b)
            | Op::AddRowVec(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b)
            | Op::ConcatRows(a, b)
            | Op::ConcatCols(a, b) => vec![a.0, b.0],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::LogFloor(a, _)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::DotConst { x: a, .. } => vec![a.0],
            Op::L2NormRows { x, .. } => vec![x.0],
            Op::LayerNormRows { x, gain, bias, .. } => vec![x.0, gain.0, bias.0],
            Op::SliceRows { x, .. } | Op::SelectRows { x, .. } | Op::SliceCols { x, .. } => {
                vec![x.0]
            }
            Op::ReplaceMaskedRows { x, fill, .. } => vec![x.0, fill.0],
        }
    }

    /// Reverse accumulation from a scalar loss node. Only ancestors of the
    /// loss are visited; constants never receive adjoints.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let n = self.nodes.len();
        let mut reached = vec![false; n];
        reached[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reached[i] {
                for p in self.parents(i) {
                    reached[p] = true;
                }
            }
        }

        let mut grads: Vec<Option<NdArray<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !reached[i] || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            // keep the adjoint available for callers inspecting intermediates
            grads[i] = Some(g);
        }

        Grads {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        }
    }

    fn bump<'a>(grads: &'a mut [Option<NdArray<T>>], idx: usize, shape: &[usize]) -> &'a mut NdArray<T> {
        if grads[idx].is_none() {
            grads[idx] = Some(NdArray::zeros(shape));
        }
        grads[idx].as_mut().unwrap()
    }

    fn accumulate(&self, i: usize, g: &NdArray<T>, grads: &mut Vec<Option<NdArray<T>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(g, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(g, T::one());
            }
            Op::Sub(a, b) => {
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(g, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(g, -T::one());
            }
            Op::MulElem(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y);
                let db = g.zip_map(self.value(*a), |x, y| x * y);
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(&da, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(&db, T::one());
            }
            Op::Scale(a, s) => {
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(g, *s);
            }
            Op::AddRowVec(x, v) => {
                Self::bump(grads, x.0, self.value(*x).shape()).add_scaled(g, T::one());
                let (rows, cols) = g.as_2d();
                let gv = Self::bump(grads, v.0, self.value(*v).shape());
                for r in 0..rows {
                    for c in 0..cols {
                        gv.data_mut()[c] += g.at(r, c);
                    }
                }
            }
            Op::MulConst(x, c) => {
                let dx = g.zip_map(c, |a, b| a * b);
                Self::bump(grads, x.0, self.value(*x).shape()).add_scaled(&dx, T::one());
            }
            Op::LogFloor(x, eps) => {
                let xv = self.value(*x);
                let dx = g.zip_map(xv, |gi, xi| if xi > *eps { gi / xi } else { T::zero() });
                Self::bump(grads, x.0, xv.shape()).add_scaled(&dx, T::one());
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = y.as_2d();
                let mut dx = NdArray::zeros(y.shape());
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mut dot = T::zero();
                    for c in 0..cols {
                        dot += yr[c] * gr[c];
                    }
                    let dr = dx.row_mut(r);
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                Self::bump(grads, x.0, self.value(*x).shape()).add_scaled(&dx, T::one());
            }
            Op::L2NormRows { x, eps, norms } => {
                let y = &self.nodes[i].value;
                let (rows, cols) = y.as_2d();
                let mut dx = NdArray::zeros(y.shape());
                for r in 0..rows {
                    let n = norms[r];
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dr = dx.row_mut(r);
                    if n > *eps {
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot += yr[c] * gr[c];
                        }
                        for c in 0..cols {
                            dr[c] = (gr[c] - dot * yr[c]) / n;
                        }
                    } else {
                        for c in 0..cols {
                            dr[c] = gr[c] / *eps;
                        }
                    }
                }
                Self::bump(grads, x.0, self.value(*x).shape()).add_scaled(&dx, T::one());
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.as_2d();
                let denom = T::of(cols as f64);
                let mut dx = NdArray::zeros(xv.shape());
                let mut dgain = NdArray::zeros(gv.shape());
                let mut dbias = NdArray::zeros(gv.shape());
                for r in 0..rows {
                    let row = xv.row(r);
                    let mut mean = T::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean /= denom;
                    let mut var = T::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var /= denom;
                    let inv = (var + *eps).sqrt().recip();
                    let gr = g.row(r);
                    // accumulate param grads and the two row means needed for dx
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    let gd = gv.data();
                    for c in 0..cols {
                        let xh = (row[c] - mean) * inv;
                        dgain.data_mut()[c] += gr[c] * xh;
                        dbias.data_mut()[c] += gr[c];
                        let dxh = gr[c] * gd[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= denom;
                    mean_dxh_xh /= denom;
                    let dr = dx.row_mut(r);
                    for c in 0..cols {
                        let xh = (row[c] - mean) * inv;
                        let dxh = gr[c] * gd[c];
                        dr[c] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                Self::bump(grads, x.0, xv.shape()).add_scaled(&dx, T::one());
                Self::bump(grads, gain.0, gv.shape()).add_scaled(&dgain, T::one());
                Self::bump(grads, bias.0, gv.shape()).add_scaled(&dbias, T::one());
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad_scalar(xi));
                Self::bump(grads, x.0, self.value(*x).shape()).add_scaled(&dx, T::one());
            }
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(&da, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(&db, T::one());
            }
            Op::MatMulNT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_tn(self.value(*a));
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(&da, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(&db, T::one());
            }
            Op::MatMulTN(a, b) => {
                let da = self.value(*b).matmul_nt(g);
                let db = self.value(*a).matmul(g);
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(&da, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(&db, T::one());
            }
            Op::ConcatRows(a, b) => {
                let (ra, ca) = self.value(*a).as_2d();
                let (rb, _) = self.value(*b).as_2d();
                let ga = NdArray::from_vec(&[ra, ca], g.data()[..ra * ca].to_vec()).unwrap();
                let gb = NdArray::from_vec(&[rb, ca], g.data()[ra * ca..].to_vec()).unwrap();
                Self::bump(grads, a.0, self.value(*a).shape()).add_scaled(&ga, T::one());
                Self::bump(grads, b.0, self.value(*b).shape()).add_scaled(&gb, T::one());
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let (_, cols) = xv.as_2d();
                let gx = Self::bump(grads, x.0, xv.shape());
                for r in 0..*len {
                    let dst = &mut gx.data_mut()[(start + r) * cols..(start + r + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let (_, cols) = xv.as_2d();
                let gx = Self::bump(grads, x.0, xv.shape());
                for (k, &i_src) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i_src * cols..(i_src + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let (rows, _) = xv.as_2d();
                let gx = Self::bump(grads, x.0, xv.shape());
                for r in 0..rows {
                    let gr = g.row(r);
                    let dst = gx.row_mut(r);
                    for c in 0..*len {
                        dst[start + c] += gr[c];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (rows, ca) = av.as_2d();
                let (_, cb) = bv.as_2d();
                {
                    let ga = Self::bump(grads, a.0, av.shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let dst = ga.row_mut(r);
                        for c in 0..ca {
                            dst[c] += gr[c];
                        }
                    }
                }
                let gb = Self::bump(grads, b.0, bv.shape());
                for r in 0..rows {
                    let gr = g.row(r);
                    let dst = gb.row_mut(r);
                    for c in 0..cb {
                        dst[c] += gr[ca + c];
                    }
                }
            }
            Op::ReplaceMaskedRows { x, mask, fill } => {
                let xv = self.value(*x);
                let (_, cols) = xv.as_2d();
                {
                    let gx = Self::bump(grads, x.0, xv.shape());
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            let dst = gx.row_mut(r);
                            for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                    }
                }
                let gf = Self::bump(grads, fill.0, self.value(*fill).shape());
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (d, &s) in gf.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                let xv = self.value(*x);
                let gx = Self::bump(grads, x.0, xv.shape());
                for d in gx.data_mut() {
                    *d += s;
                }
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.as_2d();
                let gx = Self::bump(grads, x.0, xv.shape());
                for r in 0..rows {
                    let s = g.data()[r];
                    for d in gx.row_mut(r) {
                        *d += s;
                    }
                }
            }
            Op::DotConst { x, w } => {
                let s = g.data()[0];
                let xv = self.value(*x);
                let gx = Self::bump(grads, x.0, xv.shape());
                for (d, &wv) in gx.data_mut().iter_mut().zip(w.data()) {
                    *d += s * wv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar tape program against its
    /// recorded gradient, perturbing every input component.
    fn fd_check(build: impl Fn(&mut Tape<f64>, &[NdArray<f64>]) -> Var, inputs: &[NdArray<f64>], tol: f64) {
        let eps = 1e-6;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, inputs);
        let grads = tape.backward(loss);

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(*leaf);
            for comp in 0..inputs[li].len() {
                let mut plus = inputs.to_vec();
                plus[li].data_mut()[comp] += eps;
                let mut tp = Tape::new();
                for x in &plus {
                    tp.leaf(x.clone());
                }
                let lp = build(&mut tp, &plus);
                let fp = tp.scalar_value(lp);

                let mut minus = inputs.to_vec();
                minus[li].data_mut()[comp] -= eps;
                let mut tm = Tape::new();
                for x in &minus {
                    tm.leaf(x.clone());
                }
                let lm = build(&mut tm, &minus);
                let fm = tm.scalar_value(lm);

                let fd = (fp - fm) / (2.0 * eps);
                let an = analytic.data()[comp];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "leaf {li} comp {comp}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn arr(shape: &[usize], vals: &[f64]) -> NdArray<f64> {
        NdArray::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_matches_fd() {
        let x = arr(&[1], &[3.0]);
        fd_check(
            |t, _| {
                let x = Var(0);
                let y = t.mul_elem(x, x);
                t.sum_all(y)
            },
            &[x],
            1e-8,
        );
        // f(x) = x^2 at x = 3 has gradient 6
        let mut t = Tape::new();
        let x = t.leaf(arr(&[1], &[3.0]));
        let y = t.mul_elem(x, x);
        let l = t.sum_all(y);
        let g = t.backward(l);
        assert!((g.get(x).data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_chain_gradient_matches_fd() {
        let a = arr(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let b = arr(&[3, 2], &[1.0, 0.5, -0.5, 2.0, 0.75, -1.25]);
        fd_check(
            |t, _| {
                let y = t.matmul(Var(0), Var(1));
                let z = t.gelu(y);
                t.sum_all(z)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn transposed_matmuls_gradient_matches_fd() {
        let a = arr(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let b = arr(&[4, 3], &[1.0, 0.5, -0.5, 2.0, 0.75, -1.25, 0.1, -0.2, 0.3, 0.4, -0.6, 0.9]);
        fd_check(
            |t, _| {
                let y = t.matmul_nt(Var(0), Var(1)); // [2,4]
                let z = t.matmul_tn(y, y); // [4,4]
                t.sum_all(z)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn softmax_log_chain_gradient_matches_fd() {
        let x = arr(&[2, 4], &[0.3, -1.2, 0.7, 0.1, 2.0, -0.5, 0.0, 1.1]);
        fd_check(
            |t, _| {
                let s = t.scale(Var(0), 2.5);
                let p = t.softmax_rows(s);
                let lp = t.log_floor(p, 1e-12);
                let q = NdArray::from_vec(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]).unwrap();
                let w = t.mul_const(lp, q);
                t.sum_all(w)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn l2norm_gradient_matches_fd() {
        let x = arr(&[2, 3], &[0.3, -1.2, 0.7, 2.0, -0.5, 0.4]);
        fd_check(
            |t, _| {
                let y = t.l2norm_rows(Var(0), 1e-8);
                let z = t.mul_elem(y, y);
                let w = t.gelu(z);
                t.sum_all(w)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn layernorm_gradient_matches_fd() {
        let x = arr(&[2, 4], &[0.3, -1.2, 0.7, 0.1, 2.0, -0.5, 0.0, 1.1]);
        let gain = arr(&[4], &[1.1, 0.9, 1.05, 0.8]);
        let bias = arr(&[4], &[0.0, 0.1, -0.1, 0.2]);
        fd_check(
            |t, _| {
                let y = t.layernorm_rows(Var(0), Var(1), Var(2), 1e-6);
                let z = t.gelu(y);
                t.sum_all(z)
            },
            &[x, gain, bias],
            1e-5,
        );
    }

    #[test]
    fn structural_ops_gradient_matches_fd() {
        let x = arr(&[3, 4], &[0.3, -1.2, 0.7, 0.1, 2.0, -0.5, 0.0, 1.1, -0.4, 0.8, 1.3, -0.9]);
        let fill = arr(&[4], &[0.5, -0.25, 0.75, 0.1]);
        fd_check(
            |t, _| {
                let masked = t.replace_masked_rows(Var(0), &[false, true, false], Var(1));
                let sel = t.select_rows(masked, vec![2, 0, 2]);
                let left = t.slice_cols(sel, 0, 2);
                let right = t.slice_cols(sel, 2, 2);
                let cat = t.concat_cols(left, right);
                let top = t.slice_rows(cat, 0, 2);
                let rowsum = t.sum_rows(top);
                t.dot_const(rowsum, NdArray::from_vec(&[2], vec![0.7, -1.3]).unwrap())
            },
            &[x, fill],
            1e-6,
        );
    }

    #[test]
    fn concat_and_row_vec_gradient_matches_fd() {
        let a = arr(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let b = arr(&[1, 3], &[0.2, 0.4, -0.6]);
        let v = arr(&[3], &[0.1, -0.2, 0.3]);
        fd_check(
            |t, _| {
                let cat = t.concat_rows(Var(0), Var(1));
                let shifted = t.add_row_vec(cat, Var(2));
                let sq = t.mul_elem(shifted, shifted);
                t.sum_all(sq)
            },
            &[a, b, v],
            1e-6,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]));
        let c = t.constant(arr(&[2], &[3.0, 4.0]));
        let y = t.mul_elem(x, c);
        let l = t.sum_all(y);
        let g = t.backward(l);
        assert!(t.is_constant(c));
        assert_eq!(g.get(x).data(), &[3.0, 4.0]);
        // the constant is structurally reachable but its gradient is never used;
        // by convention callers must not read grads of constants
    }

    #[test]
    fn unreachable_nodes_report_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]));
        let unused = t.leaf(arr(&[3], &[5.0, 6.0, 7.0]));
        let y = t.mul_elem(x, x);
        let l = t.sum_all(y);
        let g = t.backward(l);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }
}
