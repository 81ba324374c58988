//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded as they are evaluated (define-by-run); a
//! single reverse sweep over the tape accumulates gradients of a
//! scalar loss with respect to every leaf. The op set is exactly what
//! the detection pipeline needs: matrix products, convolution,
//! max/mean reductions, softmax, sigmoid, elementwise arithmetic and a
//! fused binary-cross-entropy loss.
//!
//! All forward evaluation is pure: identical inputs give bit-identical
//! outputs. Max-family reductions break ties toward the lowest index
//! and record the winner/runner-up gap so the gradient checker can
//! flag subgradient-ambiguous points; ReLU records its smallest |x|
//! for the same reason.

#![allow(clippy::needless_range_loop)]

use super::tensor::Tensor;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error(transparent)]
    Tensor(#[from] super::tensor::TensorError),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    /// Tensor plus scalar node, broadcast over all elements.
    AddScalar(VarId, VarId),
    /// Matrix plus row vector, broadcast over rows.
    AddRow(VarId, VarId),
    MatMul(VarId, VarId),
    MatVec(VarId, VarId),
    VecMat(VarId, VarId),
    Dot(VarId, VarId),
    Sigmoid(VarId),
    Relu(VarId),
    Sqrt(VarId),
    SoftmaxVec(VarId),
    MaxVec(VarId, usize),
    MeanVec(VarId),
    /// Columnwise max over rows of a matrix; saves per-column argmax.
    MaxAxis0(VarId, Vec<usize>),
    MeanAxis0(VarId),
    /// First-k-columns slice of a matrix.
    SliceCols(VarId, usize),
    StackScalars(Vec<VarId>),
    Reshape(VarId),
    /// Same-padded 2D convolution, input (in,T,F), kernel (out,in,kh,kw).
    Conv2d(VarId, VarId),
    AddChannel(VarId, VarId),
    MulChannel(VarId, VarId),
    SubChannel(VarId, VarId),
    DivChannel(VarId, VarId),
    MeanPerChannel(VarId),
    /// Max pooling along the last (frequency) axis; saves argmaxes.
    MaxPoolFreq(VarId, Vec<usize>),
    /// (ch,T,F) -> (T, ch*F) frame-major layout.
    FramesFromChannels(VarId),
    /// Fused mean binary cross entropy with clamped probabilities.
    BceLoss(VarId, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar loss with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zero tensor when the node does
    /// not influence the loss.
    pub fn wrt(&self, id: VarId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

/// Probability clamp used by the fused BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

/// Recording tape. Values are evaluated eagerly as ops are recorded.
pub struct Tape {
    nodes: Vec<Node>,
    /// Smallest winner/runner-up gap over all max-family reductions,
    /// and smallest |x| over all ReLU inputs, seen during forward.
    /// `None` until a max/relu op with at least two candidates runs.
    min_kink_gap: Option<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            min_kink_gap: None,
        }
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest subgradient-ambiguity gap observed during forward, if
    /// any max/ReLU op ran. Used to flag unreliable finite differences.
    pub fn min_kink_gap(&self) -> Option<f64> {
        self.min_kink_gap
    }

    fn note_gap(&mut self, gap: f64) {
        self.min_kink_gap = Some(match self.min_kink_gap {
            Some(g) => g.min(gap),
            None => gap,
        });
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Registers an input tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    fn require_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<(), NumericsError> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    fn require_rank(&self, op: &'static str, a: VarId, rank: usize) -> Result<(), NumericsError> {
        if self.value(a).shape().len() != rank {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("expected rank {rank}, got shape {:?}", self.value(a).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> Result<VarId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, factor)))
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> Result<VarId, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddConst(a)))
    }

    pub fn add_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId, NumericsError> {
        if !self.value(s).is_scalar() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_scalar",
                detail: format!("second operand must be scalar, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).item();
        let data = self.value(a).data().iter().map(|x| x + sv).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddScalar(a, s)))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, m: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("add_row", m, 2)?;
        self.require_rank("add_row", b, 1)?;
        let (rows, cols) = (self.value(m).rows(), self.value(m).cols());
        if cols != self.value(b).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix cols {cols} vs row len {}", self.value(b).len()),
            });
        }
        let mut data = self.value(m).data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.value(b).data()[c];
            }
        }
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::AddRow(m, b)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("matmul", a, 2)?;
        self.require_rank("matmul", b, 2)?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = self.value(a).at(i, l);
                for j in 0..n {
                    data[i * n + j] += av * self.value(b).at(l, j);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b)))
    }

    pub fn matvec(&mut self, m: VarId, v: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("matvec", m, 2)?;
        self.require_rank("matvec", v, 1)?;
        let (rows, cols) = (self.value(m).rows(), self.value(m).cols());
        if cols != self.value(v).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                detail: format!("matrix cols {cols} vs vector len {}", self.value(v).len()),
            });
        }
        let mut data = vec![0.0; rows];
        for (i, out) in data.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += self.value(m).at(i, j) * self.value(v).data()[j];
            }
            *out = acc;
        }
        Ok(self.push(Tensor::new(vec![rows], data)?, Op::MatVec(m, v)))
    }

    pub fn vecmat(&mut self, v: VarId, m: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("vecmat", v, 1)?;
        self.require_rank("vecmat", m, 2)?;
        let (rows, cols) = (self.value(m).rows(), self.value(m).cols());
        if rows != self.value(v).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "vecmat",
                detail: format!("vector len {} vs matrix rows {rows}", self.value(v).len()),
            });
        }
        let mut data = vec![0.0; cols];
        for i in 0..rows {
            let vi = self.value(v).data()[i];
            for (j, out) in data.iter_mut().enumerate() {
                *out += vi * self.value(m).at(i, j);
            }
        }
        Ok(self.push(Tensor::new(vec![cols], data)?, Op::VecMat(v, m)))
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("dot", a, 1)?;
        self.require_same_shape("dot", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sigmoid(a)))
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let mut min_abs = f64::INFINITY;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                min_abs = min_abs.min(x.abs());
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            })
            .collect();
        if min_abs.is_finite() && !self.value(a).is_empty() {
            self.note_gap(min_abs);
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Relu(a)))
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(NumericsError::Invalid {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        let data = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sqrt(a)))
    }

    /// Numerically stable softmax of a vector (max subtraction).
    pub fn softmax_vec(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("softmax_vec", a, 1)?;
        if self.value(a).is_empty() {
            return Err(NumericsError::EmptyInput { op: "softmax_vec" });
        }
        let xs = self.value(a).data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / z).collect();
        Ok(self.push(Tensor::vector(data), Op::SoftmaxVec(a)))
    }

    pub fn max_vec(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("max_vec", a, 1)?;
        if self.value(a).is_empty() {
            return Err(NumericsError::EmptyInput { op: "max_vec" });
        }
        let (idx, gap) = argmax_with_gap(self.value(a).data());
        if let Some(g) = gap {
            self.note_gap(g);
        }
        let v = self.value(a).data()[idx];
        Ok(self.push(Tensor::scalar(v), Op::MaxVec(a, idx)))
    }

    pub fn mean_vec(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("mean_vec", a, 1)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumericsError::EmptyInput { op: "mean_vec" });
        }
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MeanVec(a)))
    }

    /// Coordinatewise max over rows: (T,d) -> (d).
    pub fn max_axis0(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("max_axis0", a, 2)?;
        let (t, d) = (self.value(a).rows(), self.value(a).cols());
        if t == 0 {
            return Err(NumericsError::EmptyInput { op: "max_axis0" });
        }
        let mut data = vec![0.0; d];
        let mut arg = vec![0usize; d];
        for j in 0..d {
            let col: Vec<f64> = (0..t).map(|i| self.value(a).at(i, j)).collect();
            let (idx, gap) = argmax_with_gap(&col);
            if let Some(g) = gap {
                self.note_gap(g);
            }
            arg[j] = idx;
            data[j] = col[idx];
        }
        Ok(self.push(Tensor::vector(data), Op::MaxAxis0(a, arg)))
    }

    pub fn mean_axis0(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("mean_axis0", a, 2)?;
        let (t, d) = (self.value(a).rows(), self.value(a).cols());
        if t == 0 {
            return Err(NumericsError::EmptyInput { op: "mean_axis0" });
        }
        let mut data = vec![0.0; d];
        for i in 0..t {
            for (j, out) in data.iter_mut().enumerate() {
                *out += self.value(a).at(i, j);
            }
        }
        for out in &mut data {
            *out /= t as f64;
        }
        Ok(self.push(Tensor::vector(data), Op::MeanAxis0(a)))
    }

    /// First `k` columns of a matrix: (T,d) -> (T,k).
    pub fn slice_cols(&mut self, a: VarId, k: usize) -> Result<VarId, NumericsError> {
        self.require_rank("slice_cols", a, 2)?;
        let (t, d) = (self.value(a).rows(), self.value(a).cols());
        if k == 0 || k > d {
            return Err(NumericsError::Invalid {
                op: "slice_cols",
                detail: format!("k={k} out of 1..={d}"),
            });
        }
        let mut data = Vec::with_capacity(t * k);
        for i in 0..t {
            data.extend_from_slice(&self.value(a).row(i)[..k]);
        }
        Ok(self.push(Tensor::new(vec![t, k], data)?, Op::SliceCols(a, k)))
    }

    /// Gathers scalar nodes into a vector.
    pub fn stack_scalars(&mut self, ids: &[VarId]) -> Result<VarId, NumericsError> {
        if ids.is_empty() {
            return Err(NumericsError::EmptyInput { op: "stack_scalars" });
        }
        let mut data = Vec::with_capacity(ids.len());
        for &id in ids {
            if !self.value(id).is_scalar() {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_scalars",
                    detail: format!("non-scalar input of shape {:?}", self.value(id).shape()),
                });
            }
            data.push(self.value(id).item());
        }
        Ok(self.push(Tensor::vector(data), Op::StackScalars(ids.to_vec())))
    }

    /// Same data, new shape (row-major layouts agree).
    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(a).shape(), shape),
            });
        }
        let data = self.value(a).data().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(a)))
    }

    /// Same-padded stride-1 convolution: x (in,T,F), w (out,in,kh,kw)
    /// with odd kernel dims.
    pub fn conv2d_same(&mut self, x: VarId, w: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("conv2d_same", x, 3)?;
        if self.value(w).shape().len() != 4 {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d_same",
                detail: format!("kernel must be rank 4, got {:?}", self.value(w).shape()),
            });
        }
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, t, f) = (xs[0], xs[1], xs[2]);
        let (cout, cin2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != cin2 {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d_same",
                detail: format!("input channels {cin} vs kernel channels {cin2}"),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NumericsError::Invalid {
                op: "conv2d_same",
                detail: format!("kernel dims must be odd, got {kh}x{kw}"),
            });
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut data = vec![0.0; cout * t * f];
        for o in 0..cout {
            for i in 0..cin {
                for a in 0..kh {
                    for b in 0..kw {
                        let wv = self.value(w).data()[((o * cin + i) * kh + a) * kw + b];
                        if wv == 0.0 {
                            continue;
                        }
                        for tt in 0..t {
                            let ti = tt as isize + a as isize - ph as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            for ff in 0..f {
                                let fi = ff as isize + b as isize - pw as isize;
                                if fi < 0 || fi >= f as isize {
                                    continue;
                                }
                                data[(o * t + tt) * f + ff] +=
                                    wv * self.value(x).at3(i, ti as usize, fi as usize);
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![cout, t, f], data)?, Op::Conv2d(x, w)))
    }

    fn channel_op_check(
        &self,
        op: &'static str,
        x: VarId,
        v: VarId,
    ) -> Result<(usize, usize, usize), NumericsError> {
        self.require_rank(op, x, 3)?;
        self.require_rank(op, v, 1)?;
        let s = self.value(x).shape();
        let (ch, t, f) = (s[0], s[1], s[2]);
        if self.value(v).len() != ch {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("channels {ch} vs vector len {}", self.value(v).len()),
            });
        }
        Ok((ch, t, f))
    }

    pub fn add_channel(&mut self, x: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ch, t, f) = self.channel_op_check("add_channel", x, b)?;
        let mut data = self.value(x).data().to_vec();
        for c in 0..ch {
            let bv = self.value(b).data()[c];
            for item in data.iter_mut().skip(c * t * f).take(t * f) {
                *item += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![ch, t, f], data)?, Op::AddChannel(x, b)))
    }

    pub fn mul_channel(&mut self, x: VarId, g: VarId) -> Result<VarId, NumericsError> {
        let (ch, t, f) = self.channel_op_check("mul_channel", x, g)?;
        let mut data = self.value(x).data().to_vec();
        for c in 0..ch {
            let gv = self.value(g).data()[c];
            for item in data.iter_mut().skip(c * t * f).take(t * f) {
                *item *= gv;
            }
        }
        Ok(self.push(Tensor::new(vec![ch, t, f], data)?, Op::MulChannel(x, g)))
    }

    pub fn sub_channel(&mut self, x: VarId, m: VarId) -> Result<VarId, NumericsError> {
        let (ch, t, f) = self.channel_op_check("sub_channel", x, m)?;
        let mut data = self.value(x).data().to_vec();
        for c in 0..ch {
            let mv = self.value(m).data()[c];
            for item in data.iter_mut().skip(c * t * f).take(t * f) {
                *item -= mv;
            }
        }
        Ok(self.push(Tensor::new(vec![ch, t, f], data)?, Op::SubChannel(x, m)))
    }

    pub fn div_channel(&mut self, x: VarId, s: VarId) -> Result<VarId, NumericsError> {
        let (ch, t, f) = self.channel_op_check("div_channel", x, s)?;
        if self.value(s).data().contains(&0.0) {
            return Err(NumericsError::Invalid {
                op: "div_channel",
                detail: "zero divisor".into(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        for c in 0..ch {
            let sv = self.value(s).data()[c];
            for item in data.iter_mut().skip(c * t * f).take(t * f) {
                *item /= sv;
            }
        }
        Ok(self.push(Tensor::new(vec![ch, t, f], data)?, Op::DivChannel(x, s)))
    }

    pub fn mean_per_channel(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("mean_per_channel", x, 3)?;
        let s = self.value(x).shape();
        let (ch, t, f) = (s[0], s[1], s[2]);
        if t * f == 0 {
            return Err(NumericsError::EmptyInput { op: "mean_per_channel" });
        }
        let mut data = vec![0.0; ch];
        for (c, out) in data.iter_mut().enumerate() {
            let slice = &self.value(x).data()[c * t * f..(c + 1) * t * f];
            *out = slice.iter().sum::<f64>() / (t * f) as f64;
        }
        Ok(self.push(Tensor::vector(data), Op::MeanPerChannel(x)))
    }

    /// Max pooling along the frequency axis with factor `k`; F must be
    /// divisible by `k`.
    pub fn max_pool_freq(&mut self, x: VarId, k: usize) -> Result<VarId, NumericsError> {
        self.require_rank("max_pool_freq", x, 3)?;
        let s = self.value(x).shape();
        let (ch, t, f) = (s[0], s[1], s[2]);
        if k == 0 || f % k != 0 {
            return Err(NumericsError::Invalid {
                op: "max_pool_freq",
                detail: format!("pool factor {k} does not divide {f} frequency bands"),
            });
        }
        let fo = f / k;
        let mut data = vec![0.0; ch * t * fo];
        let mut args = vec![0usize; ch * t * fo];
        for c in 0..ch {
            for tt in 0..t {
                for u in 0..fo {
                    let window: Vec<f64> =
                        (0..k).map(|j| self.value(x).at3(c, tt, u * k + j)).collect();
                    let (idx, gap) = argmax_with_gap(&window);
                    if let Some(g) = gap {
                        self.note_gap(g);
                    }
                    data[(c * t + tt) * fo + u] = window[idx];
                    args[(c * t + tt) * fo + u] = u * k + idx;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![ch, t, fo], data)?,
            Op::MaxPoolFreq(x, args),
        ))
    }

    /// Re-layout (ch,T,F) as a (T, ch*F) matrix of per-frame features.
    pub fn frames_from_channels(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        self.require_rank("frames_from_channels", x, 3)?;
        let s = self.value(x).shape();
        let (ch, t, f) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; t * ch * f];
        for c in 0..ch {
            for tt in 0..t {
                for ff in 0..f {
                    data[tt * ch * f + c * f + ff] = self.value(x).at3(c, tt, ff);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![t, ch * f], data)?,
            Op::FramesFromChannels(x),
        ))
    }

    /// Mean binary cross entropy of probabilities against fixed 0/1
    /// targets; probabilities are clamped [`BCE_CLAMP`] from each
    /// boundary before the logs.
    pub fn bce_loss(&mut self, probs: VarId, targets: &[f64]) -> Result<VarId, NumericsError> {
        self.require_rank("bce_loss", probs, 1)?;
        let n = self.value(probs).len();
        if n == 0 {
            return Err(NumericsError::EmptyInput { op: "bce_loss" });
        }
        if n != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("{n} probabilities vs {} targets", targets.len()),
            });
        }
        let mut acc = 0.0;
        for (p, y) in self.value(probs).data().iter().zip(targets) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        Ok(self.push(
            Tensor::scalar(acc / n as f64),
            Op::BceLoss(probs, targets.to_vec()),
        ))
    }

    /// Reverse sweep: gradients of the scalar `loss` with respect to
    /// every node. Nodes that do not influence the loss get `None`
    /// (reported as zeros by [`Gradients::wrt`]).
    pub fn backward(&self, loss: VarId) -> Result<Gradients, NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_inputs(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let add_into = |grads: &mut [Option<Tensor>], id: VarId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.clone());
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| -x).collect(),
                )?;
                add_into(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect(),
                )?;
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::Scale(a, f) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| x * f).collect(),
                )?;
                add_into(grads, *a, da);
            }
            Op::AddConst(a) => add_into(grads, *a, g.clone()),
            Op::AddScalar(a, s) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *s, Tensor::scalar(g.data().iter().sum()));
            }
            Op::AddRow(m, b) => {
                let (rows, cols) = (self.value(*m).rows(), self.value(*m).cols());
                add_into(grads, *m, g.clone());
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for (c, out) in db.iter_mut().enumerate() {
                        *out += g.at(r, c);
                    }
                }
                add_into(grads, *b, Tensor::vector(db));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.at(i, j);
                        for l in 0..k {
                            da[i * k + l] += gv * self.value(*b).at(l, j);
                            db[l * n + j] += gv * self.value(*a).at(i, l);
                        }
                    }
                }
                add_into(grads, *a, Tensor::new(vec![m, k], da)?);
                add_into(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::MatVec(m, v) => {
                let (rows, cols) = (self.value(*m).rows(), self.value(*m).cols());
                let mut dm = vec![0.0; rows * cols];
                let mut dv = vec![0.0; cols];
                for i in 0..rows {
                    let gv = g.data()[i];
                    for j in 0..cols {
                        dm[i * cols + j] += gv * self.value(*v).data()[j];
                        dv[j] += gv * self.value(*m).at(i, j);
                    }
                }
                add_into(grads, *m, Tensor::new(vec![rows, cols], dm)?);
                add_into(grads, *v, Tensor::vector(dv));
            }
            Op::VecMat(v, m) => {
                let (rows, cols) = (self.value(*m).rows(), self.value(*m).cols());
                let mut dv = vec![0.0; rows];
                let mut dm = vec![0.0; rows * cols];
                for i in 0..rows {
                    let vi = self.value(*v).data()[i];
                    for j in 0..cols {
                        let gv = g.data()[j];
                        dv[i] += gv * self.value(*m).at(i, j);
                        dm[i * cols + j] += gv * vi;
                    }
                }
                add_into(grads, *v, Tensor::vector(dv));
                add_into(grads, *m, Tensor::new(vec![rows, cols], dm)?);
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                let da: Vec<f64> = self.value(*b).data().iter().map(|x| gv * x).collect();
                let db: Vec<f64> = self.value(*a).data().iter().map(|x| gv * x).collect();
                add_into(grads, *a, Tensor::vector(da));
                add_into(grads, *b, Tensor::vector(db));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )?;
                add_into(grads, *a, da);
            }
            Op::Relu(a) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )?;
                add_into(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv / (2.0 * yv))
                        .collect(),
                )?;
                add_into(grads, *a, da);
            }
            Op::SoftmaxVec(a) => {
                let y = self.nodes[idx].value.data();
                let dot: f64 = g.data().iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| yv * (gv - dot))
                    .collect();
                add_into(grads, *a, Tensor::vector(da));
            }
            Op::MaxVec(a, arg) => {
                let mut da = vec![0.0; self.value(*a).len()];
                da[*arg] = g.item();
                add_into(grads, *a, Tensor::vector(da));
            }
            Op::MeanVec(a) => {
                let n = self.value(*a).len() as f64;
                let da = vec![g.item() / n; self.value(*a).len()];
                add_into(grads, *a, Tensor::vector(da));
            }
            Op::MaxAxis0(a, args) => {
                let (t, d) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; t * d];
                for (j, &arg) in args.iter().enumerate() {
                    da[arg * d + j] = g.data()[j];
                }
                add_into(grads, *a, Tensor::new(vec![t, d], da)?);
            }
            Op::MeanAxis0(a) => {
                let (t, d) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; t * d];
                for i in 0..t {
                    for j in 0..d {
                        da[i * d + j] = g.data()[j] / t as f64;
                    }
                }
                add_into(grads, *a, Tensor::new(vec![t, d], da)?);
            }
            Op::SliceCols(a, k) => {
                let (t, d) = (self.value(*a).rows(), self.value(*a).cols());
                let mut da = vec![0.0; t * d];
                for i in 0..t {
                    for j in 0..*k {
                        da[i * d + j] = g.at(i, j);
                    }
                }
                add_into(grads, *a, Tensor::new(vec![t, d], da)?);
            }
            Op::StackScalars(ids) => {
                for (i, id) in ids.iter().enumerate() {
                    add_into(grads, *id, Tensor::scalar(g.data()[i]));
                }
            }
            Op::Reshape(a) => {
                let da = Tensor::new(self.value(*a).shape().to_vec(), g.data().to_vec())?;
                add_into(grads, *a, da);
            }
            Op::Conv2d(x, w) => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (cin, t, f) = (xs[0], xs[1], xs[2]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let mut dx = vec![0.0; cin * t * f];
                let mut dw = vec![0.0; cout * cin * kh * kw];
                for o in 0..cout {
                    for i in 0..cin {
                        for a in 0..kh {
                            for b in 0..kw {
                                let widx = ((o * cin + i) * kh + a) * kw + b;
                                let wv = self.value(*w).data()[widx];
                                for tt in 0..t {
                                    let ti = tt as isize + a as isize - ph as isize;
                                    if ti < 0 || ti >= t as isize {
                                        continue;
                                    }
                                    for ff in 0..f {
                                        let fi = ff as isize + b as isize - pw as isize;
                                        if fi < 0 || fi >= f as isize {
                                            continue;
                                        }
                                        let gv = g.at3(o, tt, ff);
                                        dx[(i * t + ti as usize) * f + fi as usize] += gv * wv;
                                        dw[widx] +=
                                            gv * self.value(*x).at3(i, ti as usize, fi as usize);
                                    }
                                }
                            }
                        }
                    }
                }
                add_into(grads, *x, Tensor::new(vec![cin, t, f], dx)?);
                add_into(grads, *w, Tensor::new(vec![cout, cin, kh, kw], dw)?);
            }
            Op::AddChannel(x, b) => {
                let s = self.value(*x).shape().to_vec();
                let (ch, tf) = (s[0], s[1] * s[2]);
                add_into(grads, *x, g.clone());
                let mut db = vec![0.0; ch];
                for c in 0..ch {
                    db[c] = g.data()[c * tf..(c + 1) * tf].iter().sum();
                }
                add_into(grads, *b, Tensor::vector(db));
            }
            Op::MulChannel(x, gain) => {
                let s = self.value(*x).shape().to_vec();
                let (ch, tf) = (s[0], s[1] * s[2]);
                let mut dx = g.data().to_vec();
                let mut dgain = vec![0.0; ch];
                for c in 0..ch {
                    let gv = self.value(*gain).data()[c];
                    for i in c * tf..(c + 1) * tf {
                        dgain[c] += g.data()[i] * self.value(*x).data()[i];
                        dx[i] *= gv;
                    }
                }
                add_into(grads, *x, Tensor::new(s, dx)?);
                add_into(grads, *gain, Tensor::vector(dgain));
            }
            Op::SubChannel(x, m) => {
                let s = self.value(*x).shape().to_vec();
                let (ch, tf) = (s[0], s[1] * s[2]);
                add_into(grads, *x, g.clone());
                let mut dm = vec![0.0; ch];
                for c in 0..ch {
                    dm[c] = -g.data()[c * tf..(c + 1) * tf].iter().sum::<f64>();
                }
                add_into(grads, *m, Tensor::vector(dm));
            }
            Op::DivChannel(x, sdiv) => {
                let shp = self.value(*x).shape().to_vec();
                let (ch, tf) = (shp[0], shp[1] * shp[2]);
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; ch];
                for c in 0..ch {
                    let sv = self.value(*sdiv).data()[c];
                    for i in c * tf..(c + 1) * tf {
                        ds[c] -= g.data()[i] * self.value(*x).data()[i] / (sv * sv);
                        dx[i] /= sv;
                    }
                }
                add_into(grads, *x, Tensor::new(shp, dx)?);
                add_into(grads, *sdiv, Tensor::vector(ds));
            }
            Op::MeanPerChannel(x) => {
                let s = self.value(*x).shape().to_vec();
                let (ch, tf) = (s[0], s[1] * s[2]);
                let mut dx = vec![0.0; ch * tf];
                for c in 0..ch {
                    let gv = g.data()[c] / tf as f64;
                    for item in dx.iter_mut().skip(c * tf).take(tf) {
                        *item = gv;
                    }
                }
                add_into(grads, *x, Tensor::new(s, dx)?);
            }
            Op::MaxPoolFreq(x, args) => {
                let s = self.value(*x).shape().to_vec();
                let (ch, t, f) = (s[0], s[1], s[2]);
                let fo = self.nodes[idx].value.shape()[2];
                let mut dx = vec![0.0; ch * t * f];
                for c in 0..ch {
                    for tt in 0..t {
                        for u in 0..fo {
                            let src = (c * t + tt) * fo + u;
                            dx[(c * t + tt) * f + args[src]] += g.data()[src];
                        }
                    }
                }
                add_into(grads, *x, Tensor::new(vec![ch, t, f], dx)?);
            }
            Op::FramesFromChannels(x) => {
                let s = self.value(*x).shape().to_vec();
                let (ch, t, f) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; ch * t * f];
                for c in 0..ch {
                    for tt in 0..t {
                        for ff in 0..f {
                            dx[(c * t + tt) * f + ff] = g.data()[tt * ch * f + c * f + ff];
                        }
                    }
                }
                add_into(grads, *x, Tensor::new(vec![ch, t, f], dx)?);
            }
            Op::BceLoss(p, targets) => {
                let n = targets.len() as f64;
                let gv = g.item();
                let dp: Vec<f64> = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &yv)| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            gv * (-yv / pv + (1.0 - yv) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                add_into(grads, *p, Tensor::vector(dp));
            }
        }
        Ok(())
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lowest-index argmax plus the winner/runner-up gap (None for a
/// single-element slice, where no tie is possible).
fn argmax_with_gap(xs: &[f64]) -> (usize, Option<f64>) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    let runner_up = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap = if xs.len() > 1 {
        Some(xs[best] - runner_up)
    } else {
        None
    };
    (best, gap)
}
