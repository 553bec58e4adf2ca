//! Define-by-run gradient tape.
//!
//! Every primitive application is appended to an ordered record, so the node
//! list is topologically sorted by construction: inputs of record `i` were
//! produced by records `< i`. A tape is rebuilt for each forward pass, which
//! keeps the curriculum loop (whose loss slice changes shape over training)
//! trivially correct. Tapes are confined to one thread; the tensors they hand
//! out are plain values and safe to share read-only.

use super::{axpy, matmul_kernel, Real, Tensor, TensorError};

/// Denominators with absolute value below this are treated as zero by
/// [`Tape::safe_div`], which defines x/0 := 0 (used for zero-degree graph
/// rows and dead-sensor cosine rows).
pub const DIV_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding behaviour of the dilated causal convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Left zero-padding of (K-1)·d so output length equals input length.
    Causal,
    /// No padding; output length shrinks by (K-1)·d.
    Valid,
}

/// A recorded primitive. Input operands are identified by their position on
/// the tape; values needed by the backward pass are read back from the nodes.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// (m,k)·(k,n) matrix product.
    Matmul { a: Var, b: Var },
    /// g:(M,M) applied to every slice of x:(B,M,C): out[b] = g·x[b].
    GraphMatmul { g: Var, x: Var },
    /// Dilated causal 1-D convolution. x:(N,C_in,L), w:(C_out,C_in,K),
    /// bias:(C_out).
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        dilation: usize,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// Elementwise Hadamard product.
    Mul { a: Var, b: Var },
    /// Elementwise a/b with b treated as zero below [`DIV_EPS`].
    SafeDiv { a: Var, b: Var },
    /// (m,n) plus a length-n vector added to every row.
    AddRowVec { a: Var, v: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Abs { a: Var },
    /// Elementwise square root; negative inputs clamp to zero.
    Sqrt { a: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var, c: f64 },
    /// Elementwise min(a, c); the gradient passes where a ≤ c.
    MinScalar { a: Var, c: f64 },
    /// Sum of all elements, producing a scalar.
    Sum { a: Var },
    /// Mean of all elements, producing a scalar.
    Mean { a: Var },
    /// Row sums of a rank-2 tensor: (m,n) -> (m).
    SumAxis1 { a: Var },
    /// Rank-2 transpose.
    Transpose { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    SliceAxis {
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`]. Only leaves
/// created with `requires_grad` (and intermediates on a path to one) carry a
/// gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, or zeros of the leaf's shape if no path from the
    /// loss reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Ordered record of primitive applications for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Record a non-differentiable leaf (data, masks, fixed graphs).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::DetachedVar(v.0))
        }
    }

    // ---- primitive operations ------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::MatmulShape {
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_kernel(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.record(Op::Matmul { a, b }, out, &[a, b]))
    }

    /// out[s] = g · x[s] for every leading slice of x:(B,M,C).
    pub fn graph_matmul(&mut self, g: Var, x: Var) -> Result<Var, TensorError> {
        let (sg, sx) = (self.value(g).shape(), self.value(x).shape());
        if sg.len() != 2 || sg[0] != sg[1] {
            return Err(TensorError::RankMismatch {
                op: "graph_matmul (graph)",
                expected: 2,
                shape: sg.to_vec(),
            });
        }
        if sx.len() != 3 || sx[1] != sg[0] {
            return Err(TensorError::ShapeMismatch {
                op: "graph_matmul",
                left: sg.to_vec(),
                right: sx.to_vec(),
            });
        }
        let (bsz, m, c) = (sx[0], sx[1], sx[2]);
        let mut out = Tensor::zeros(&[bsz, m, c]);
        let gd = self.value(g).data().to_vec();
        let xd = self.value(x).data();
        for s in 0..bsz {
            matmul_kernel(
                &gd,
                &xd[s * m * c..(s + 1) * m * c],
                &mut out.data_mut()[s * m * c..(s + 1) * m * c],
                m,
                m,
                c,
            );
        }
        Ok(self.record(Op::GraphMatmul { g, x }, out, &[g, x]))
    }

    /// Strictly causal dilated convolution with left zero-padding, so the
    /// output has the same length as the input and no future index is read.
    pub fn conv1d_causal(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(bias).shape(),
        );
        if sx.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "conv1d (input)",
                expected: 3,
                shape: sx.to_vec(),
            });
        }
        if sw.len() != 3 || sw[1] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d (kernel)",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d (bias)",
                left: sw.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (nb, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, _, taps) = (sw[0], sw[1], sw[2]);
        let mut out = Tensor::zeros(&[nb, c_out, len]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(bias).data();
            let od = out.data_mut();
            for n in 0..nb {
                for o in 0..c_out {
                    let orow = &mut od[(n * c_out + o) * len..(n * c_out + o + 1) * len];
                    orow.fill(bd[o]);
                    for c in 0..c_in {
                        let xrow = &xd[(n * c_in + c) * len..(n * c_in + c + 1) * len];
                        for i in 0..taps {
                            let off = dilation * i;
                            if off >= len {
                                break;
                            }
                            let wv = wd[(o * c_in + c) * taps + i];
                            axpy(wv, &xrow[..len - off], &mut orow[off..]);
                        }
                    }
                }
            }
        }
        Ok(self.record(
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
            },
            out,
            &[x, w, bias],
        ))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += bv;
        }
        Ok(self.record(Op::Add { a, b }, out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= bv;
        }
        Ok(self.record(Op::Sub { a, b }, out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("hadamard", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= bv;
        }
        Ok(self.record(Op::Mul { a, b }, out, &[a, b]))
    }

    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("safe_div", a, b)?;
        let eps = T::from_f64(DIV_EPS);
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = if bv.abs() < eps { T::zero() } else { *o / bv };
        }
        Ok(self.record(Op::SafeDiv { a, b }, out, &[a, b]))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (sa, sv) = (self.value(a).shape(), self.value(v).shape());
        if sa.len() != 2 || sv.len() != 1 || sv[0] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vec",
                left: sa.to_vec(),
                right: sv.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut out = self.value(a).clone();
        let vd = self.value(v).data().to_vec();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &vj) in row.iter_mut().zip(&vd) {
                *o += vj;
            }
        }
        Ok(self.record(Op::AddRowVec { a, v }, out, &[a, v]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let out = self.value(a).map(|x| x.max(T::zero()));
        Ok(self.record(Op::Relu { a }, out, &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let out = self.value(a).map(|x| x.tanh());
        Ok(self.record(Op::Tanh { a }, out, &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let out = self.value(a).map(sigmoid_stable);
        Ok(self.record(Op::Sigmoid { a }, out, &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let out = self.value(a).map(|x| x.abs());
        Ok(self.record(Op::Abs { a }, out, &[a]))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let out = self.value(a).map(|x| x.max(T::zero()).sqrt());
        Ok(self.record(Op::Sqrt { a }, out, &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let cv = T::from_f64(c);
        let out = self.value(a).map(|x| x * cv);
        Ok(self.record(Op::Scale { a, c }, out, &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let cv = T::from_f64(c);
        let out = self.value(a).map(|x| x + cv);
        Ok(self.record(Op::AddScalar { a, c }, out, &[a]))
    }

    pub fn min_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let cv = T::from_f64(c);
        let out = self.value(a).map(|x| x.min(cv));
        Ok(self.record(Op::MinScalar { a, c }, out, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        Ok(self.record(Op::Sum { a }, Tensor::scalar(s), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let n = self.value(a).numel();
        let s: T = self.value(a).data().iter().copied().sum();
        let out = Tensor::scalar(s / T::from_f64(n as f64));
        Ok(self.record(Op::Mean { a }, out, &[a]))
    }

    pub fn sum_axis1(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "sum_axis1",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            out.data_mut()[i] = self.value(a).data()[i * n..(i + 1) * n]
                .iter()
                .copied()
                .sum();
        }
        Ok(self.record(Op::SumAxis1 { a }, out, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let out = self.value(a).transpose2();
        Ok(self.record(Op::Transpose { a }, out, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check(a)?;
        let numel = self.value(a).numel();
        let target: usize = shape.iter().product();
        if numel != target {
            return Err(TensorError::ReshapeSize {
                from: self.value(a).shape().to_vec(),
                from_len: numel,
                to: shape.to_vec(),
                to_len: target,
            });
        }
        let out = Tensor::from_vec(shape.to_vec(), self.value(a).data().to_vec()).unwrap();
        Ok(self.record(Op::Reshape { a }, out, &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sa = self.value(a).shape().to_vec();
        let out = permute_tensor(self.value(a), perm)?;
        let _ = sa;
        Ok(self.record(
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            out,
            &[a],
        ))
    }

    pub fn slice_axis(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        self.check(a)?;
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::SliceOutOfBounds {
                axis,
                start,
                len,
                shape,
            });
        }
        let out = slice_axis_copy(self.value(a), axis, start, len);
        Ok(self.record(
            Op::SliceAxis {
                a,
                axis,
                start,
                len,
            },
            out,
            &[a],
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate additively when
    /// a value feeds several consumers. Leaves without `requires_grad` are
    /// skipped entirely.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    // dA = g · Bᵀ
                    let bt = bv.transpose2();
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_kernel(g.data(), bt.data(), da.data_mut(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · g
                    let at = av.transpose2();
                    let mut db = Tensor::zeros(&[k, n]);
                    matmul_kernel(at.data(), g.data(), db.data_mut(), k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GraphMatmul { g: gm, x } => {
                let gv = self.value(*gm);
                let xv = self.value(*x);
                let (bsz, m, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                if self.requires_grad(*gm) {
                    // dG = Σ_s dY[s] · X[s]ᵀ
                    let mut dg = Tensor::zeros(&[m, m]);
                    let mut xt = vec![T::zero(); c * m];
                    for s in 0..bsz {
                        let xs = &xv.data()[s * m * c..(s + 1) * m * c];
                        for i in 0..m {
                            for j in 0..c {
                                xt[j * m + i] = xs[i * c + j];
                            }
                        }
                        matmul_kernel(
                            &g.data()[s * m * c..(s + 1) * m * c],
                            &xt,
                            dg.data_mut(),
                            m,
                            c,
                            m,
                        );
                    }
                    self.accumulate(grads, *gm, dg);
                }
                if self.requires_grad(*x) {
                    // dX[s] = Gᵀ · dY[s]
                    let gt = gv.transpose2();
                    let mut dx = Tensor::zeros(&[bsz, m, c]);
                    for s in 0..bsz {
                        matmul_kernel(
                            gt.data(),
                            &g.data()[s * m * c..(s + 1) * m * c],
                            &mut dx.data_mut()[s * m * c..(s + 1) * m * c],
                            m,
                            m,
                            c,
                        );
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (nb, c_in, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, taps) = (wv.shape()[0], wv.shape()[2]);
                let d = *dilation;
                if self.requires_grad(*bias) {
                    let mut db = Tensor::zeros(&[c_out]);
                    for n in 0..nb {
                        for o in 0..c_out {
                            db.data_mut()[o] += g.data()
                                [(n * c_out + o) * len..(n * c_out + o + 1) * len]
                                .iter()
                                .copied()
                                .sum();
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*w) {
                    let mut dw = Tensor::zeros(&[c_out, c_in, taps]);
                    for n in 0..nb {
                        for o in 0..c_out {
                            let grow = &g.data()[(n * c_out + o) * len..(n * c_out + o + 1) * len];
                            for c in 0..c_in {
                                let xrow =
                                    &xv.data()[(n * c_in + c) * len..(n * c_in + c + 1) * len];
                                for i in 0..taps {
                                    let off = d * i;
                                    if off >= len {
                                        break;
                                    }
                                    let mut acc = T::zero();
                                    for t in off..len {
                                        acc += grow[t] * xrow[t - off];
                                    }
                                    dw.data_mut()[(o * c_in + c) * taps + i] += acc;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(&[nb, c_in, len]);
                    for n in 0..nb {
                        for o in 0..c_out {
                            let grow = &g.data()[(n * c_out + o) * len..(n * c_out + o + 1) * len];
                            for c in 0..c_in {
                                let dxrow = &mut dx.data_mut()
                                    [(n * c_in + c) * len..(n * c_in + c + 1) * len];
                                for i in 0..taps {
                                    let off = d * i;
                                    if off >= len {
                                        break;
                                    }
                                    let wv_oci = wv.data()[(o * c_in + c) * taps + i];
                                    axpy(wv_oci, &grow[off..], &mut dxrow[..len - off]);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for (d, &bv) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= bv;
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = g.clone();
                    for (d, &av) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= av;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SafeDiv { a, b } => {
                let eps = T::from_f64(DIV_EPS);
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for (d, &bx) in da.data_mut().iter_mut().zip(bv.data()) {
                        *d = if bx.abs() < eps { T::zero() } else { *d / bx };
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = g.clone();
                    for ((d, &ax), &bx) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *d = if bx.abs() < eps {
                            T::zero()
                        } else {
                            -*d * ax / (bx * bx)
                        };
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRowVec { a, v } => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*v) {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let mut dv = Tensor::zeros(&[n]);
                    for i in 0..m {
                        axpy(T::one(), &g.data()[i * n..(i + 1) * n], dv.data_mut());
                    }
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::Relu { a } => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Tanh { a } => {
                let yv = &self.nodes[idx].value;
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(yv.data()) {
                    *d *= T::one() - y * y;
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid { a } => {
                let yv = &self.nodes[idx].value;
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(yv.data()) {
                    *d *= y * (T::one() - y);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Abs { a } => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d = if x > T::zero() {
                        *d
                    } else if x < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    };
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sqrt { a } => {
                let yv = &self.nodes[idx].value;
                let tiny = T::from_f64(DIV_EPS);
                let mut da = g.clone();
                let half = T::from_f64(0.5);
                for (d, &y) in da.data_mut().iter_mut().zip(yv.data()) {
                    *d = if y > tiny { *d * half / y } else { T::zero() };
                }
                self.accumulate(grads, *a, da);
            }
            Op::Scale { a, c } => {
                let cv = T::from_f64(*c);
                self.accumulate(grads, *a, g.map(|x| x * cv));
            }
            Op::AddScalar { a, .. } => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::MinScalar { a, c } => {
                let cv = T::from_f64(*c);
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x > cv {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum { a } => {
                let gv = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gv));
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let gv = g.item() / T::from_f64(n as f64);
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gv));
            }
            Op::SumAxis1 { a } => {
                let sa = self.value(*a).shape();
                let (m, n) = (sa[0], sa[1]);
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..n {
                        da.data_mut()[i * n + j] = gi;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Transpose { a } => {
                self.accumulate(grads, *a, g.transpose2());
            }
            Op::Reshape { a } => {
                let shape = self.value(*a).shape().to_vec();
                let da = Tensor::from_vec(shape, g.data().to_vec()).unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Permute { a, perm } => {
                let inv = invert_perm(perm);
                let da = permute_tensor(g, &inv).expect("inverse permutation is valid");
                self.accumulate(grads, *a, da);
            }
            Op::SliceAxis {
                a,
                axis,
                start,
                len,
            } => {
                let full_shape = self.value(*a).shape().to_vec();
                let mut da = Tensor::zeros(&full_shape);
                scatter_slice_axis(&mut da, g, *axis, *start, *len);
                self.accumulate(grads, *a, da);
            }
        }
    }
}

fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_tensor<T: Real>(
    t: &Tensor<T>,
    perm: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let shape = t.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(TensorError::BadPermutation {
            perm: perm.to_vec(),
            shape: shape.to_vec(),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.data_mut().iter_mut() {
        *o = t.data()[src];
        // odometer increment over the output index space
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(out)
}

fn slice_axis_copy<T: Real>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = t.shape();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        for a in 0..len {
            let src = (o * shape[axis] + start + a) * inner;
            let dst = (o * len + a) * inner;
            out.data_mut()[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    out
}

fn scatter_slice_axis<T: Real>(
    full: &mut Tensor<T>,
    g: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) {
    let shape = full.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for a in 0..len {
            let dst = (o * shape[axis] + start + a) * inner;
            let src = (o * len + a) * inner;
            full.data_mut()[dst..dst + inner].copy_from_slice(&g.data()[src..src + inner]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn hadamard_scalar_oracle() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t64(&[2], &[3.0, 4.0]));
        let y = tape.mul(a, b).unwrap();
        // by-hand elementwise products: 1*3, 2*4
        assert_eq!(tape.value(y).data(), &[3.0, 8.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0f64));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(x ⊙ x) at x = [3] has gradient 2x = 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_accumulates_reuse() {
        // y = a + a must give grad 2 for a.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.5f64));
        let y = tape.add(a, a).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(7.0f64));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            tape.backward(Var(3)),
            Err(TensorError::DetachedVar(3))
        ));
    }

    #[test]
    fn conv_causal_fixtures() {
        // x=[1,2,3,4], f=[1,1]: d=1 -> [1,3,5,7]; d=2 -> [1,2,4,6].
        for (d, expected) in [(1usize, [1.0, 3.0, 5.0, 7.0]), (2, [1.0, 2.0, 4.0, 6.0])] {
            let mut tape = Tape::new();
            let x = tape.leaf(t64(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
            let w = tape.leaf(t64(&[1, 1, 2], &[1.0, 1.0]));
            let b = tape.leaf(Tensor::zeros(&[1]));
            let y = tape.conv1d_causal(x, w, b, d).unwrap();
            assert_eq!(tape.value(y).data(), &expected);
        }
    }

    #[test]
    fn conv_single_tap_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 1, 4], &[4.0, -1.0, 0.5, 2.0]));
        let w = tape.leaf(t64(&[1, 1, 1], &[1.0]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv1d_causal(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|x| x as f64).collect()).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_tensor(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, t);
        // spot-check one element: p[k=1, i=1, j=2] == t[i=1, j=2, k=1]
        let (i, j, k) = (1usize, 2usize, 1usize);
        assert_eq!(p.data()[k * 6 + i * 3 + j], t.data()[i * 12 + j * 4 + k]);
    }

    #[test]
    fn slice_axis_middle() {
        let t = Tensor::from_vec(vec![2, 4, 3], (0..24).map(|x| x as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let s = tape.slice_axis(v, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 2, 3]);
        assert_eq!(&tape.value(s).data()[0..3], &[3.0, 4.0, 5.0]);
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gv = grads.get(v).unwrap();
        // gradient is 1 inside the slice, 0 outside
        assert_eq!(gv.data()[0..3], [0.0, 0.0, 0.0]);
        assert_eq!(gv.data()[3..9], [1.0; 6]);
        assert_eq!(gv.data()[9..12], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn safe_div_zero_denominator_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(t64(&[3], &[2.0, 0.0, 1e-15]));
        let y = tape.safe_div(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().all_finite());
        assert!(grads.get(b).unwrap().all_finite());
    }

    #[test]
    fn determinism_same_ops_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t64(&[2, 2], &[0.3, -0.7, 1.1, 0.2]));
            let w = tape.leaf(t64(&[2, 2], &[0.5, 0.1, -0.4, 0.9]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h).unwrap();
            let loss = tape.mean(a).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                grads.get(w).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1
            .iter()
            .zip(&g2)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
