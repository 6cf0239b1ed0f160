use crate::backward::GradSink;
use crate::gemm::{gemm, Layout};
use crate::tensor::{strides, Tensor};

/// Sentinel gather index that reads as zero.
pub(crate) const ZERO_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Sqrt,
    SqrtClamped,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    LogSigmoid,
    Square,
    Clamp(f64, f64),
    Tanh,
}

pub(crate) enum Op {
    Binary {
        kind: BinaryKind,
        lhs: Tensor,
        rhs: Tensor,
    },
    Unary {
        kind: UnaryKind,
        input: Tensor,
    },
    SumAll {
        input: Tensor,
    },
    SumAxis {
        input: Tensor,
        axis: usize,
    },
    L2Norm {
        input: Tensor,
    },
    MatMul {
        lhs: Tensor,
        rhs: Tensor,
        trans_lhs: bool,
        trans_rhs: bool,
    },
    Softmax {
        input: Tensor,
    },
    Reshape {
        input: Tensor,
    },
    /// `out[i] = input[index[i]]`, or zero for [`ZERO_INDEX`].
    Gather {
        input: Tensor,
        index: Vec<usize>,
    },
    /// `out[i] = Σ_j w_ij · input[idx_ij]` with a fixed tap count per output.
    WeightedGather {
        input: Tensor,
        taps: Vec<(usize, f64)>,
        per_out: usize,
    },
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        kernel: (usize, usize),
        cols: Option<Vec<f64>>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Binary { lhs, rhs, .. } | Op::MatMul { lhs, rhs, .. } => vec![lhs, rhs],
            Op::Unary { input, .. }
            | Op::SumAll { input }
            | Op::SumAxis { input, .. }
            | Op::L2Norm { input }
            | Op::Softmax { input }
            | Op::Reshape { input }
            | Op::Gather { input, .. }
            | Op::WeightedGather { input, .. } => vec![input],
            Op::Concat { inputs, .. } => inputs.iter().collect(),
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, grad: &[f64], sink: &mut GradSink) {
        match self {
            Op::Binary { kind, lhs, rhs } => {
                let (a, b) = (lhs.data(), rhs.data());
                if let Some(ga) = sink.slot(lhs) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => add_into(ga, grad),
                        BinaryKind::Mul => ga.iter_mut().zip(grad).zip(b).for_each(|((d, g), y)| *d += g * y),
                        BinaryKind::Div => ga.iter_mut().zip(grad).zip(b).for_each(|((d, g), y)| *d += g / y),
                    }
                }
                if let Some(gb) = sink.slot(rhs) {
                    match kind {
                        BinaryKind::Add => add_into(gb, grad),
                        BinaryKind::Sub => gb.iter_mut().zip(grad).for_each(|(d, g)| *d -= g),
                        BinaryKind::Mul => gb.iter_mut().zip(grad).zip(a).for_each(|((d, g), x)| *d += g * x),
                        BinaryKind::Div => {
                            for i in 0..grad.len() {
                                gb[i] -= grad[i] * a[i] / (b[i] * b[i]);
                            }
                        }
                    }
                }
            }
            Op::Unary { kind, input } => {
                let Some(gx) = sink.slot(input) else { return };
                let (x, y) = (input.data(), out.data());
                for i in 0..grad.len() {
                    let g = grad[i];
                    gx[i] += match *kind {
                        UnaryKind::Neg => -g,
                        UnaryKind::Scale(c) => c * g,
                        UnaryKind::AddScalar(_) => g,
                        UnaryKind::Exp => g * y[i],
                        UnaryKind::Ln => g / x[i],
                        UnaryKind::Sqrt => g * 0.5 / y[i],
                        UnaryKind::SqrtClamped => {
                            if x[i] > 0.0 {
                                g * 0.5 / y[i]
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Relu => {
                            if x[i] > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::LeakyRelu(a) => {
                            if x[i] > 0.0 {
                                g
                            } else {
                                a * g
                            }
                        }
                        UnaryKind::Sigmoid => g * y[i] * (1.0 - y[i]),
                        UnaryKind::LogSigmoid => g * sigmoid(-x[i]),
                        UnaryKind::Square => 2.0 * x[i] * g,
                        UnaryKind::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                g
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Tanh => g * (1.0 - y[i] * y[i]),
                    };
                }
            }
            Op::SumAll { input } => {
                if let Some(gx) = sink.slot(input) {
                    gx.iter_mut().for_each(|d| *d += grad[0]);
                }
            }
            Op::SumAxis { input, axis } => {
                let Some(gx) = sink.slot(input) else { return };
                let (outer, len, inner) = split_axis(input.shape(), *axis);
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            gx[base + i] += grad[gbase + i];
                        }
                    }
                }
            }
            Op::L2Norm { input } => {
                let norm = out.data()[0];
                let Some(gx) = sink.slot(input) else { return };
                if norm > 0.0 {
                    let s = grad[0] / norm;
                    gx.iter_mut().zip(input.data()).for_each(|(d, x)| *d += s * x);
                }
            }
            Op::MatMul {
                lhs,
                rhs,
                trans_lhs,
                trans_rhs,
            } => matmul_backward(lhs, rhs, *trans_lhs, *trans_rhs, grad, sink),
            Op::Softmax { input } => {
                let Some(gx) = sink.slot(input) else { return };
                let cols = *input.shape().last().unwrap();
                let y = out.data();
                for (row, (yr, gr)) in y.chunks(cols).zip(grad.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let base = row * cols;
                    for j in 0..cols {
                        gx[base + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(gx) = sink.slot(input) {
                    add_into(gx, grad);
                }
            }
            Op::Gather { input, index } => {
                if let Some(gx) = sink.slot(input) {
                    for (g, &i) in grad.iter().zip(index) {
                        if i != ZERO_INDEX {
                            gx[i] += g;
                        }
                    }
                }
            }
            Op::WeightedGather {
                input,
                taps,
                per_out,
            } => {
                if let Some(gx) = sink.slot(input) {
                    for (g, row) in grad.iter().zip(taps.chunks(*per_out)) {
                        for &(i, w) in row {
                            gx[i] += g * w;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = out.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for t in inputs {
                    let len = t.shape()[*axis];
                    if let Some(gx) = sink.slot(t) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gx[dst..dst + len * inner], &grad[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                kernel,
                cols,
            } => crate::spatial::conv2d_backward(
                input,
                weight,
                bias.as_ref(),
                *stride,
                *kernel,
                cols.as_deref(),
                out.shape(),
                grad,
                sink,
            ),
        }
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `(outer, len, inner)` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} are not broadcast-compatible"),
        };
    }
    out
}

fn matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        r => panic!("matmul expects rank 2 or 3 operands, got rank {r}"),
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    lhs_batched: bool,
    rhs_batched: bool,
    la: Layout,
    lb: Layout,
    lhs_stride: usize,
    rhs_stride: usize,
}

fn plan_matmul(lhs: &[usize], rhs: &[usize], ta: bool, tb: bool) -> MatMulPlan {
    let (ba, ar, ac) = matrix_dims(lhs);
    let (bb, br, bc) = matrix_dims(rhs);
    let lhs_batched = lhs.len() == 3;
    let rhs_batched = rhs.len() == 3;
    if lhs_batched && rhs_batched {
        assert_eq!(ba, bb, "matmul batch mismatch {lhs:?} vs {rhs:?}");
    }
    let batch = ba.max(bb);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch {lhs:?} x {rhs:?} (ta={ta}, tb={tb})");
    let la = if ta { Layout::row_major(ac).t() } else { Layout::row_major(ac) };
    let lb = if tb { Layout::row_major(bc).t() } else { Layout::row_major(bc) };
    MatMulPlan {
        batch,
        m,
        k,
        n,
        lhs_batched,
        rhs_batched,
        la,
        lb,
        lhs_stride: ar * ac,
        rhs_stride: br * bc,
    }
}

fn matmul_backward(lhs: &Tensor, rhs: &Tensor, ta: bool, tb: bool, grad: &[f64], sink: &mut GradSink) {
    let p = plan_matmul(lhs.shape(), rhs.shape(), ta, tb);
    let lg = Layout::row_major(p.n);
    if let Some(ga) = sink.slot(lhs) {
        // d op(A) = G · op(B)ᵀ, written straight into A's storage layout.
        let out_layout = if ta { Layout::row_major(p.m).t() } else { Layout::row_major(p.k) };
        for bi in 0..p.batch {
            let a_off = if p.lhs_batched { bi * p.lhs_stride } else { 0 };
            let b_off = if p.rhs_batched { bi * p.rhs_stride } else { 0 };
            gemm(
                p.m,
                p.n,
                p.k,
                &grad[bi * p.m * p.n..],
                lg,
                &rhs.data()[b_off..],
                p.lb.t(),
                1.0,
                &mut ga[a_off..],
                out_layout,
            );
        }
    }
    if let Some(gb) = sink.slot(rhs) {
        let out_layout = if tb { Layout::row_major(p.k).t() } else { Layout::row_major(p.n) };
        for bi in 0..p.batch {
            let a_off = if p.lhs_batched { bi * p.lhs_stride } else { 0 };
            let b_off = if p.rhs_batched { bi * p.rhs_stride } else { 0 };
            gemm(
                p.k,
                p.m,
                p.n,
                &lhs.data()[a_off..],
                p.la.t(),
                &grad[bi * p.m * p.n..],
                lg,
                1.0,
                &mut gb[b_off..],
                out_layout,
            );
        }
    }
}

impl Tensor {
    fn unary(&self, kind: UnaryKind) -> Tensor {
        let x = self.data();
        let data: Vec<f64> = match kind {
            UnaryKind::Neg => x.iter().map(|v| -v).collect(),
            UnaryKind::Scale(c) => x.iter().map(|v| c * v).collect(),
            UnaryKind::AddScalar(c) => x.iter().map(|v| v + c).collect(),
            UnaryKind::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryKind::Ln => x.iter().map(|v| v.ln()).collect(),
            UnaryKind::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
            UnaryKind::SqrtClamped => x.iter().map(|v| v.max(0.0).sqrt()).collect(),
            UnaryKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            UnaryKind::LeakyRelu(a) => x.iter().map(|&v| if v > 0.0 { v } else { a * v }).collect(),
            UnaryKind::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::LogSigmoid => x.iter().map(|&v| log_sigmoid(v)).collect(),
            UnaryKind::Square => x.iter().map(|v| v * v).collect(),
            UnaryKind::Clamp(lo, hi) => x.iter().map(|v| v.clamp(lo, hi)).collect(),
            UnaryKind::Tanh => x.iter().map(|v| v.tanh()).collect(),
        };
        Tensor::from_op(data, self.shape().to_vec(), Op::Unary { kind, input: self.clone() })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(UnaryKind::Ln)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryKind::Sqrt)
    }

    /// `sqrt(max(0, x))` with a zero subgradient wherever `x ≤ 0`.
    pub fn sqrt_clamped(&self) -> Tensor {
        self.unary(UnaryKind::SqrtClamped)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::Sigmoid)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::LogSigmoid)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryKind::Square)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh)
    }

    fn binary(&self, rhs: &Tensor, kind: BinaryKind) -> Tensor {
        if self.shape() != rhs.shape() {
            let shape = broadcast_shape(self.shape(), rhs.shape());
            return self.broadcast_to(&shape).binary(&rhs.broadcast_to(&shape), kind);
        }
        let (a, b) = (self.data(), rhs.data());
        let data: Vec<f64> = match kind {
            BinaryKind::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul => a.iter().zip(b).map(|(x, y)| x * y).collect(),
            BinaryKind::Div => a.iter().zip(b).map(|(x, y)| x / y).collect(),
        };
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Binary {
                kind,
                lhs: self.clone(),
                rhs: rhs.clone(),
            },
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Div)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let rank = shape.len();
        let src = self.shape();
        assert!(src.len() <= rank, "cannot broadcast {src:?} to {shape:?}");
        let src_strides = strides(src);
        let mut eff = vec![0usize; rank];
        for (i, d) in src.iter().enumerate() {
            let j = i + rank - src.len();
            assert!(*d == shape[j] || *d == 1, "cannot broadcast {src:?} to {shape:?}");
            if *d == shape[j] {
                eff[j] = src_strides[i];
            }
        }
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        for _ in 0..total {
            index.push(counter.iter().zip(&eff).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(index, shape.to_vec())
    }

    pub(crate) fn gather(&self, index: Vec<usize>, shape: Vec<usize>) -> Tensor {
        let x = self.data();
        let data = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { x[i] })
            .collect();
        Tensor::from_op(data, shape, Op::Gather { input: self.clone(), index })
    }

    pub(crate) fn weighted_gather(&self, taps: Vec<(usize, f64)>, per_out: usize, shape: Vec<usize>) -> Tensor {
        let x = self.data();
        let data = taps
            .chunks(per_out)
            .map(|row| row.iter().map(|&(i, w)| w * x[i]).sum())
            .collect();
        Tensor::from_op(
            data,
            shape,
            Op::WeightedGather {
                input: self.clone(),
                taps,
                per_out,
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], Op::SumAll { input: self.clone() })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(data, shape, Op::SumAxis { input: self.clone(), axis })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let len = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / len)
    }

    /// Sum over `axis`, keeping it with length one.
    pub fn sum_keepdim(&self, axis: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_axis(axis).reshape(&shape)
    }

    pub fn mean_keepdim(&self, axis: usize) -> Tensor {
        let len = self.shape()[axis] as f64;
        self.sum_keepdim(axis).scale(1.0 / len)
    }

    /// Euclidean norm of all elements, with a zero subgradient at the origin.
    pub fn l2_norm(&self) -> Tensor {
        let n = self.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_op(vec![n], vec![], Op::L2Norm { input: self.clone() })
    }

    fn matmul_impl(&self, rhs: &Tensor, ta: bool, tb: bool) -> Tensor {
        let p = plan_matmul(self.shape(), rhs.shape(), ta, tb);
        let mut out = vec![0.0; p.batch * p.m * p.n];
        for bi in 0..p.batch {
            let a_off = if p.lhs_batched { bi * p.lhs_stride } else { 0 };
            let b_off = if p.rhs_batched { bi * p.rhs_stride } else { 0 };
            gemm(
                p.m,
                p.k,
                p.n,
                &self.data()[a_off..],
                p.la,
                &rhs.data()[b_off..],
                p.lb,
                0.0,
                &mut out[bi * p.m * p.n..],
                Layout::row_major(p.n),
            );
        }
        let shape = if p.lhs_batched || p.rhs_batched {
            vec![p.batch, p.m, p.n]
        } else {
            vec![p.m, p.n]
        };
        Tensor::from_op(
            out,
            shape,
            Op::MatMul {
                lhs: self.clone(),
                rhs: rhs.clone(),
                trans_lhs: ta,
                trans_rhs: tb,
            },
        )
    }

    /// Matrix product over the last two axes; a rank-3 operand is a batch.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.matmul_impl(rhs, false, false)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        self.matmul_impl(rhs, false, true)
    }

    /// `selfᵀ · rhs`.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Tensor {
        self.matmul_impl(rhs, true, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let cols = *self.shape().last().expect("softmax of a scalar");
        let mut data = self.to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::Softmax { input: self.clone() })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "cannot reshape {:?} to {shape:?}",
            self.shape()
        );
        self.share(shape.to_vec(), Op::Reshape { input: self.clone() })
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let src = self.shape();
        assert_eq!(perm.len(), src.len(), "permutation rank mismatch");
        let src_strides = strides(src);
        let shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let total = self.numel();
        let rank = shape.len();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        for _ in 0..total {
            index.push(counter.iter().zip(&eff).map(|(c, s)| c * s).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(index, shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2, "transpose needs rank ≥ 2");
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Rows of axis 0 picked by `indices` (repeats allowed).
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let rows = self.shape()[0];
        let inner: usize = self.shape()[1..].iter().product();
        let mut index = Vec::with_capacity(indices.len() * inner);
        for &r in indices {
            assert!(r < rows, "index {r} out of range for axis of length {rows}");
            index.extend(r * inner..(r + 1) * inner);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        self.gather(index, shape)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, total, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= total, "narrow out of range");
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        self.gather(index, shape)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty(), "concat of nothing");
        let first = tensors[0].shape();
        let mut shape = first.to_vec();
        shape[axis] = 0;
        for t in tensors {
            assert_eq!(t.rank(), first.len(), "concat rank mismatch");
            for (d, (a, b)) in t.shape().iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {first:?}", t.shape());
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for t in tensors {
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        Tensor::from_op(
            data,
            shape,
            Op::Concat {
                inputs: tensors.to_vec(),
                axis,
            },
        )
    }
}
