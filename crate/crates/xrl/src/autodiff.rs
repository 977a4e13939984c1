//! Reverse-mode automatic differentiation over shaped f64 tensors.
//!
//! Graphs are built eagerly: every operation computes its value on
//! construction and records provenance (a tape in graph form). The backward
//! pass expresses each vector-Jacobian product as graph operations, so a
//! gradient produced with `create_graph = true` is itself differentiable —
//! this is what makes second-order and mixed input/weight derivatives work.
//!
//! A graph is confined to one thread (nodes are `Rc`-shared); distinct graphs
//! over shared read-only tensors may be evaluated concurrently.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A node in a differentiable computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

// each variant stores its full construction parameters, even where the vjp
// can recover them from saved values, so the tape reads as the op signature
#[allow(dead_code)]
#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    ScalarMul(Var, f64),
    ScalarAdd(Var, f64),
    /// Elementwise multiply by a scalar-shaped Var.
    MulScalarVar(Var, Var),
    /// Elementwise divide by a scalar-shaped Var.
    DivScalarVar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Relu(Var),
    Softplus(Var, f64),
    Sigmoid(Var, f64),
    /// Softplus whose backward pass zeroes negative upstream gradient
    /// components (guided backpropagation).
    GuidedSoftplus(Var, f64),
    Sum(Var),
    BroadcastScalar(Var),
    SumPerImage(Var),
    BroadcastPerImage(Var),
    SumDim0(Var),
    BroadcastDim0(Var),
    SumNhw(Var),
    BroadcastChan(Var),
    SumOverC(Var),
    BroadcastOverC(Var),
    SelectClasses(Var, Rc<Vec<usize>>),
    ScatterClasses(Var, Rc<Vec<usize>>, usize),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
        kernel: usize,
    },
    AvgPool(Var, usize),
    AvgPoolGrad {
        g: Var,
        k: usize,
        in_shape: Vec<usize>,
    },
    MaxPool {
        x: Var,
        k: usize,
        indices: Rc<Vec<usize>>,
    },
    ScatterIdx {
        g: Var,
        indices: Rc<Vec<usize>>,
        out_shape: Vec<usize>,
    },
    GatherIdx(Var, Rc<Vec<usize>>),
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Var {
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op: Op::Leaf,
        }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    fn from_op(value: Tensor, op: Op) -> Var {
        let requires_grad = parents_of(&op).iter().any(|p| p.requires_grad());
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    /// Deterministic evaluation of the recorded graph: values are computed
    /// eagerly at construction, so this simply returns the root's tensor.
    pub fn forward_eval(&self) -> Tensor {
        self.0.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Cut provenance: same value, no history, no gradient.
    pub fn detach(&self) -> Var {
        Var::leaf(self.0.value.clone(), false)
    }

    fn same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Ok(Var::from_op(value, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a - b)
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Ok(Var::from_op(value, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Ok(Var::from_op(value, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "div")?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a / b)
            .collect();
        let value = Tensor::new(self.shape().to_vec(), data)?;
        Ok(Var::from_op(value, Op::Div(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|x| -x), Op::Neg(self.clone()))
    }

    pub fn scalar_mul(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|x| x * c), Op::ScalarMul(self.clone(), c))
    }

    pub fn scalar_add(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|x| x + c), Op::ScalarAdd(self.clone(), c))
    }

    pub fn mul_scalar_var(&self, s: &Var) -> Result<Var> {
        if !s.value().is_scalar() {
            return Err(mismatch("mul_scalar_var", format!("scale has shape {:?}", s.shape())));
        }
        let c = s.item();
        Ok(Var::from_op(
            self.value().map(|x| x * c),
            Op::MulScalarVar(self.clone(), s.clone()),
        ))
    }

    pub fn div_scalar_var(&self, s: &Var) -> Result<Var> {
        if !s.value().is_scalar() {
            return Err(mismatch("div_scalar_var", format!("scale has shape {:?}", s.shape())));
        }
        let c = s.item();
        Ok(Var::from_op(
            self.value().map(|x| x / c),
            Op::DivScalarVar(self.clone(), s.clone()),
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value().data(), other.value().data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(Var::from_op(value, Op::Matmul(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value().data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Var::from_op(
            Tensor::new(vec![n, m], data)?,
            Op::Transpose(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshaped(shape.to_vec()).map_err(|_| {
            mismatch(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            )
        })?;
        Ok(Var::from_op(value, Op::Reshape(self.clone())))
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f64::ln), Op::Ln(self.clone()))
    }

    pub fn abs(&self) -> Var {
        Var::from_op(self.value().map(f64::abs), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Var {
        Var::from_op(
            self.value().map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Relu(self.clone()),
        )
    }

    /// Overflow-safe softplus: (1/beta) * ln(1 + exp(beta * x)).
    pub fn softplus(&self, beta: f64) -> Var {
        let value = self.value().map(|x| softplus_scalar(x, beta));
        Var::from_op(value, Op::Softplus(self.clone(), beta))
    }

    pub fn sigmoid(&self, beta: f64) -> Var {
        let value = self.value().map(|x| sigmoid_scalar(beta * x));
        Var::from_op(value, Op::Sigmoid(self.clone(), beta))
    }

    pub fn guided_softplus(&self, beta: f64) -> Var {
        let value = self.value().map(|x| softplus_scalar(x, beta));
        Var::from_op(value, Op::GuidedSoftplus(self.clone(), beta))
    }

    pub fn sum(&self) -> Var {
        let total: f64 = self.value().data().iter().sum();
        Var::from_op(Tensor::scalar(total), Op::Sum(self.clone()))
    }

    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Var> {
        if !self.value().is_scalar() {
            return Err(mismatch("broadcast_scalar", format!("{:?}", self.shape())));
        }
        Ok(Var::from_op(
            Tensor::full(shape, self.item()),
            Op::BroadcastScalar(self.clone()),
        ))
    }

    /// [N, rest..] -> [N]: sum over everything but the leading axis.
    pub fn sum_per_image(&self) -> Result<Var> {
        let s = self.shape();
        if s.is_empty() {
            return Err(mismatch("sum_per_image", "scalar input".into()));
        }
        let n = s[0];
        let per: usize = s[1..].iter().product();
        let src = self.value().data();
        let data: Vec<f64> = (0..n)
            .map(|i| src[i * per..(i + 1) * per].iter().sum())
            .collect();
        Ok(Var::from_op(
            Tensor::new(vec![n], data)?,
            Op::SumPerImage(self.clone()),
        ))
    }

    /// [N] -> [N, rest..]: replicate each row value.
    pub fn broadcast_per_image(&self, shape: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 || shape.is_empty() || shape[0] != s[0] {
            return Err(mismatch(
                "broadcast_per_image",
                format!("{:?} -> {:?}", s, shape),
            ));
        }
        let n = s[0];
        let per: usize = shape[1..].iter().product();
        let src = self.value().data();
        let mut data = vec![0.0; n * per];
        for i in 0..n {
            data[i * per..(i + 1) * per].fill(src[i]);
        }
        Ok(Var::from_op(
            Tensor::new(shape.to_vec(), data)?,
            Op::BroadcastPerImage(self.clone()),
        ))
    }

    /// [N,K] -> [K].
    pub fn sum_dim0(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("sum_dim0", format!("{:?}", s)));
        }
        let (n, k) = (s[0], s[1]);
        let src = self.value().data();
        let mut data = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                data[j] += src[i * k + j];
            }
        }
        Ok(Var::from_op(
            Tensor::new(vec![k], data)?,
            Op::SumDim0(self.clone()),
        ))
    }

    /// [K] -> [N,K].
    pub fn broadcast_dim0(&self, n: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(mismatch("broadcast_dim0", format!("{:?}", s)));
        }
        let k = s[0];
        let src = self.value().data();
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        Ok(Var::from_op(
            Tensor::new(vec![n, k], data)?,
            Op::BroadcastDim0(self.clone()),
        ))
    }

    /// [N,C,H,W] -> [C].
    pub fn sum_nhw(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(mismatch("sum_nhw", format!("{:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value().data();
        let mut data = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                data[ci] += src[base..base + h * w].iter().sum::<f64>();
            }
        }
        Ok(Var::from_op(
            Tensor::new(vec![c], data)?,
            Op::SumNhw(self.clone()),
        ))
    }

    /// [C] -> [N,C,H,W].
    pub fn broadcast_chan(&self, shape: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 || shape.len() != 4 || shape[1] != s[0] {
            return Err(mismatch(
                "broadcast_chan",
                format!("{:?} -> {:?}", s, shape),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value().data();
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                data[base..base + h * w].fill(src[ci]);
            }
        }
        Ok(Var::from_op(
            Tensor::new(shape.to_vec(), data)?,
            Op::BroadcastChan(self.clone()),
        ))
    }

    /// [N,C,H,W] -> [N,1,H,W].
    pub fn sum_over_c(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(mismatch("sum_over_c", format!("{:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value().data();
        let mut data = vec![0.0; n * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let dst = ni * h * w;
                for p in 0..h * w {
                    data[dst + p] += src[base + p];
                }
            }
        }
        Ok(Var::from_op(
            Tensor::new(vec![n, 1, h, w], data)?,
            Op::SumOverC(self.clone()),
        ))
    }

    /// [N,1,H,W] -> [N,C,H,W].
    pub fn broadcast_over_c(&self, c: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(mismatch("broadcast_over_c", format!("{:?}", s)));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let src = self.value().data();
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            let row = &src[ni * h * w..(ni + 1) * h * w];
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                data[base..base + h * w].copy_from_slice(row);
            }
        }
        Ok(Var::from_op(
            Tensor::new(vec![n, c, h, w], data)?,
            Op::BroadcastOverC(self.clone()),
        ))
    }

    /// [N,K] with labels -> [N]: pick one logit per row.
    pub fn select_classes(&self, idx: &Rc<Vec<usize>>) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(mismatch(
                "select_classes",
                format!("{:?} with {} indices", s, idx.len()),
            ));
        }
        let k = s[1];
        for (row, &j) in idx.iter().enumerate() {
            if j >= k {
                return Err(Error::LabelOutOfRange {
                    label: j,
                    classes: k,
                });
            }
            let _ = row;
        }
        let src = self.value().data();
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| src[i * k + j]).collect();
        Ok(Var::from_op(
            Tensor::new(vec![s[0]], data)?,
            Op::SelectClasses(self.clone(), idx.clone()),
        ))
    }

    /// [N] -> [N,K]: scatter each row value to its class column, zero elsewhere.
    pub fn scatter_classes(&self, idx: &Rc<Vec<usize>>, k: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 || idx.len() != s[0] {
            return Err(mismatch(
                "scatter_classes",
                format!("{:?} with {} indices", s, idx.len()),
            ));
        }
        let n = s[0];
        let src = self.value().data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            data[i * k + idx[i]] = src[i];
        }
        Ok(Var::from_op(
            Tensor::new(vec![n, k], data)?,
            Op::ScatterClasses(self.clone(), idx.clone(), k),
        ))
    }

    /// 2-D cross-correlation: x [N,Cin,H,W] * w [Cout,Cin,k,k] -> [N,Cout,Ho,Wo].
    pub fn conv2d(&self, w: &Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(), w.value(), stride, pad)?;
        Ok(Var::from_op(
            value,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    fn conv_input_grad(g: &Var, w: &Var, stride: usize, pad: usize, x_shape: &[usize]) -> Result<Var> {
        let value = conv2d_input_grad(g.value(), w.value(), stride, pad, x_shape)?;
        Ok(Var::from_op(
            value,
            Op::ConvInputGrad {
                g: g.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    fn conv_weight_grad(x: &Var, g: &Var, stride: usize, pad: usize, kernel: usize) -> Result<Var> {
        let value = conv2d_weight_grad(x.value(), g.value(), stride, pad, kernel)?;
        Ok(Var::from_op(
            value,
            Op::ConvWeightGrad {
                x: x.clone(),
                g: g.clone(),
                stride,
                pad,
                kernel,
            },
        ))
    }

    /// Non-overlapping average pooling with window `k`; trailing rows/columns
    /// that do not fill a window are dropped.
    pub fn avg_pool(&self, k: usize) -> Result<Var> {
        let value = avg_pool_forward(self.value(), k)?;
        Ok(Var::from_op(value, Op::AvgPool(self.clone(), k)))
    }

    fn avg_pool_grad(g: &Var, k: usize, in_shape: &[usize]) -> Result<Var> {
        let value = avg_pool_backward(g.value(), k, in_shape)?;
        Ok(Var::from_op(
            value,
            Op::AvgPoolGrad {
                g: g.clone(),
                k,
                in_shape: in_shape.to_vec(),
            },
        ))
    }

    /// Non-overlapping max pooling; ties break toward the lowest flat index.
    pub fn max_pool(&self, k: usize) -> Result<Var> {
        let (value, indices) = max_pool_forward(self.value(), k)?;
        Ok(Var::from_op(
            value,
            Op::MaxPool {
                x: self.clone(),
                k,
                indices: Rc::new(indices),
            },
        ))
    }

    fn scatter_idx(&self, indices: &Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        if indices.len() != self.numel() {
            return Err(mismatch(
                "scatter_idx",
                format!("{} values, {} indices", self.numel(), indices.len()),
            ));
        }
        let mut data = vec![0.0; out_shape.iter().product()];
        for (v, &i) in self.value().data().iter().zip(indices.iter()) {
            data[i] += v;
        }
        Ok(Var::from_op(
            Tensor::new(out_shape.to_vec(), data)?,
            Op::ScatterIdx {
                g: self.clone(),
                indices: indices.clone(),
                out_shape: out_shape.to_vec(),
            },
        ))
    }

    fn gather_idx(&self, indices: &Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let src = self.value().data();
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        Ok(Var::from_op(
            Tensor::new(out_shape.to_vec(), data)?,
            Op::GatherIdx(self.clone(), indices.clone()),
        ))
    }

    /// Mean over all entries.
    pub fn mean(&self) -> Var {
        let n = self.numel() as f64;
        self.sum().scalar_mul(1.0 / n)
    }

    /// x^2 as x*x.
    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }
}

fn softplus_scalar(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        // ln(1+e^bx) = bx + ln(1+e^-bx) ~ bx for large bx
        x + (-bx).exp().ln_1p() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn parents_of(op: &Op) -> Vec<&Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MulScalarVar(a, b)
        | Op::DivScalarVar(a, b)
        | Op::Matmul(a, b) => vec![a, b],
        Op::Neg(a)
        | Op::ScalarMul(a, _)
        | Op::ScalarAdd(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::Softplus(a, _)
        | Op::Sigmoid(a, _)
        | Op::GuidedSoftplus(a, _)
        | Op::Sum(a)
        | Op::BroadcastScalar(a)
        | Op::SumPerImage(a)
        | Op::BroadcastPerImage(a)
        | Op::SumDim0(a)
        | Op::BroadcastDim0(a)
        | Op::SumNhw(a)
        | Op::BroadcastChan(a)
        | Op::SumOverC(a)
        | Op::BroadcastOverC(a)
        | Op::SelectClasses(a, _)
        | Op::ScatterClasses(a, _, _)
        | Op::AvgPool(a, _)
        | Op::GatherIdx(a, _) => vec![a],
        Op::Conv2d { x, w, .. } => vec![x, w],
        Op::ConvInputGrad { g, w, .. } => vec![g, w],
        Op::ConvWeightGrad { x, g, .. } => vec![x, g],
        Op::AvgPoolGrad { g, .. } => vec![g],
        Op::MaxPool { x, .. } => vec![x],
        Op::ScatterIdx { g, .. } => vec![g],
    }
}

/// Vector-Jacobian products, expressed as graph operations so the results are
/// themselves differentiable.
fn vjp(node: &Var, g: &Var) -> Result<Vec<(Var, Var)>> {
    let out = match &node.0.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
        Op::Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.neg())],
        Op::Mul(a, b) => vec![(a.clone(), g.mul(b)?), (b.clone(), g.mul(a)?)],
        Op::Div(a, b) => {
            let ga = g.div(b)?;
            let gb = g.mul(node)?.div(b)?.neg();
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Neg(a) => vec![(a.clone(), g.neg())],
        Op::ScalarMul(a, c) => vec![(a.clone(), g.scalar_mul(*c))],
        Op::ScalarAdd(a, _) => vec![(a.clone(), g.clone())],
        Op::MulScalarVar(a, s) => vec![
            (a.clone(), g.mul_scalar_var(s)?),
            (s.clone(), g.mul(a)?.sum()),
        ],
        Op::DivScalarVar(a, s) => {
            let gs = g.mul(a)?.sum().neg().div(&s.mul(s)?)?;
            vec![(a.clone(), g.div_scalar_var(s)?), (s.clone(), gs)]
        }
        Op::Matmul(a, b) => vec![
            (a.clone(), g.matmul(&b.transpose()?)?),
            (b.clone(), a.transpose()?.matmul(g)?),
        ],
        Op::Transpose(a) => vec![(a.clone(), g.transpose()?)],
        Op::Reshape(a) => vec![(a.clone(), g.reshape(a.shape())?)],
        Op::Exp(a) => vec![(a.clone(), g.mul(node)?)],
        Op::Ln(a) => vec![(a.clone(), g.div(a)?)],
        Op::Abs(a) => {
            let sign = Var::constant(a.value().map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }));
            vec![(a.clone(), g.mul(&sign)?)]
        }
        Op::Relu(a) => {
            let mask = Var::constant(a.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            vec![(a.clone(), g.mul(&mask)?)]
        }
        Op::Softplus(a, beta) => vec![(a.clone(), g.mul(&a.sigmoid(*beta))?)],
        Op::Sigmoid(a, beta) => {
            // d/dx sigmoid(beta x) = beta * s * (1 - s)
            let one_minus = node.scalar_mul(-1.0).scalar_add(1.0);
            let d = node.mul(&one_minus)?.scalar_mul(*beta);
            vec![(a.clone(), g.mul(&d)?)]
        }
        Op::GuidedSoftplus(a, beta) => {
            // Guided rule: clamp negative upstream components before the
            // ordinary softplus derivative.
            vec![(a.clone(), g.relu().mul(&a.sigmoid(*beta))?)]
        }
        Op::Sum(a) => vec![(a.clone(), g.broadcast_scalar(a.shape())?)],
        Op::BroadcastScalar(a) => vec![(a.clone(), g.sum())],
        Op::SumPerImage(a) => vec![(a.clone(), g.broadcast_per_image(a.shape())?)],
        Op::BroadcastPerImage(a) => vec![(a.clone(), g.sum_per_image()?)],
        Op::SumDim0(a) => vec![(a.clone(), g.broadcast_dim0(a.shape()[0])?)],
        Op::BroadcastDim0(a) => vec![(a.clone(), g.sum_dim0()?)],
        Op::SumNhw(a) => vec![(a.clone(), g.broadcast_chan(a.shape())?)],
        Op::BroadcastChan(a) => vec![(a.clone(), g.sum_nhw()?)],
        Op::SumOverC(a) => vec![(a.clone(), g.broadcast_over_c(a.shape()[1])?)],
        Op::BroadcastOverC(a) => vec![(a.clone(), g.sum_over_c()?)],
        Op::SelectClasses(a, idx) => vec![(a.clone(), g.scatter_classes(idx, a.shape()[1])?)],
        Op::ScatterClasses(a, idx, _) => vec![(a.clone(), g.select_classes(idx)?)],
        Op::Conv2d { x, w, stride, pad } => vec![
            (
                x.clone(),
                Var::conv_input_grad(g, w, *stride, *pad, x.shape())?,
            ),
            (
                w.clone(),
                Var::conv_weight_grad(x, g, *stride, *pad, w.shape()[2])?,
            ),
        ],
        Op::ConvInputGrad { g: g0, w, stride, pad } => vec![
            (g0.clone(), g.conv2d(w, *stride, *pad)?),
            (
                w.clone(),
                Var::conv_weight_grad(g, g0, *stride, *pad, w.shape()[2])?,
            ),
        ],
        Op::ConvWeightGrad {
            x,
            g: g0,
            stride,
            pad,
            ..
        } => vec![
            (
                x.clone(),
                Var::conv_input_grad(g0, g, *stride, *pad, x.shape())?,
            ),
            (g0.clone(), x.conv2d(g, *stride, *pad)?),
        ],
        Op::AvgPool(a, k) => vec![(a.clone(), Var::avg_pool_grad(g, *k, a.shape())?)],
        Op::AvgPoolGrad { g: g0, k, .. } => vec![(g0.clone(), g.avg_pool(*k)?)],
        Op::MaxPool { x, indices, .. } => {
            vec![(x.clone(), g.scatter_idx(indices, x.shape())?)]
        }
        Op::ScatterIdx { g: g0, indices, .. } => {
            vec![(g0.clone(), g.gather_idx(indices, g0.shape())?)]
        }
        Op::GatherIdx(a, indices) => vec![(a.clone(), g.scatter_idx(indices, a.shape())?)],
    };
    Ok(out)
}

/// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
///
/// With `create_graph`, results retain provenance and can be differentiated
/// again. Variables unreachable from `output` get an all-zeros gradient.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    if output.numel() != 1 {
        return Err(Error::NonScalarOutput {
            shape: output.shape().to_vec(),
        });
    }
    // Topological order over the requires_grad-reachable subgraph; parents
    // appear before children.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in parents_of(&v.0.op) {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push(((*p).clone(), false));
            }
        }
    }

    let mut adjoints: HashMap<u64, Var> = HashMap::new();
    adjoints.insert(
        output.id(),
        Var::constant(Tensor::full(output.shape(), 1.0)),
    );
    for node in order.iter().rev() {
        let Some(g) = adjoints.get(&node.id()).cloned() else {
            continue;
        };
        for (parent, contrib) in vjp(node, &g)? {
            if !parent.requires_grad() {
                continue;
            }
            let id = parent.id();
            let acc = match adjoints.remove(&id) {
                Some(prev) => prev.add(&contrib)?,
                None => contrib,
            };
            adjoints.insert(id, acc);
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for v in wrt {
        let g = adjoints
            .get(&v.id())
            .cloned()
            .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())));
        out.push(if create_graph { g } else { g.detach() });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution / pooling kernels
// ---------------------------------------------------------------------------

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (h + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// im2col in [Cin*k*k, Ho*Wo] layout (rows stream over output positions).
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; c_in * k * k * ho * wo];
    for ci in 0..c_in {
        for u in 0..k {
            for v in 0..k {
                let r = (ci * k + u) * k + v;
                let dst = &mut col[r * ho * wo..(r + 1) * ho * wo];
                for i in 0..ho {
                    let src_i = (i * stride + u) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    let row = (ci * h + src_i as usize) * w;
                    for j in 0..wo {
                        let src_j = (j * stride + v) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        dst[i * wo + j] = x[row + src_j as usize];
                    }
                }
            }
        }
    }
    col
}

fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if x_shape.len() != 4 || w_shape.len() != 4 || w_shape[2] != w_shape[3] {
        return Err(mismatch(
            "conv2d",
            format!("input {:?}, weight {:?}", x_shape, w_shape),
        ));
    }
    let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, wc_in, k) = (w_shape[0], w_shape[1], w_shape[2]);
    if wc_in != c_in {
        return Err(mismatch(
            "conv2d",
            format!("input has {} channels, weight expects {}", c_in, wc_in),
        ));
    }
    let (Some(ho), Some(wo)) = (
        conv_out_dim(h, k, stride, pad),
        conv_out_dim(w, k, stride, pad),
    ) else {
        return Err(mismatch(
            "conv2d",
            format!("kernel {} larger than padded input {}x{}", k, h, w),
        ));
    };
    Ok((n, c_in, h, w, c_out, k, ho, wo))
}

fn conv2d_forward(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c_in, h, w, c_out, k, ho, wo) = conv_dims(x.shape(), wt.shape(), stride, pad)?;
    let ckk = c_in * k * k;
    let per_in = c_in * h * w;
    let per_out = c_out * ho * wo;
    let xs = x.data();
    let ws = wt.data();
    let mut out = vec![0.0; n * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(ni, dst)| {
        let col = im2col(
            &xs[ni * per_in..(ni + 1) * per_in],
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        );
        let res = matmul_raw(ws, &col, c_out, ckk, ho * wo);
        dst.copy_from_slice(&res);
    });
    Tensor::new(vec![n, c_out, ho, wo], out)
}

fn conv2d_input_grad(
    g: &Tensor,
    wt: &Tensor,
    stride: usize,
    pad: usize,
    x_shape: &[usize],
) -> Result<Tensor> {
    let (n, c_in, h, w, c_out, k, ho, wo) = conv_dims(x_shape, wt.shape(), stride, pad)?;
    if g.shape() != [n, c_out, ho, wo] {
        return Err(mismatch(
            "conv2d_input_grad",
            format!("grad shape {:?}, expected {:?}", g.shape(), [n, c_out, ho, wo]),
        ));
    }
    let ckk = c_in * k * k;
    let per_in = c_in * h * w;
    let per_out = c_out * ho * wo;
    // W^T in [ckk, c_out] layout
    let ws = wt.data();
    let mut wt_t = vec![0.0; ckk * c_out];
    for co in 0..c_out {
        for r in 0..ckk {
            wt_t[r * c_out + co] = ws[co * ckk + r];
        }
    }
    let gs = g.data();
    let mut dx = vec![0.0; n * per_in];
    dx.par_chunks_mut(per_in).enumerate().for_each(|(ni, dst)| {
        let colgrad = matmul_raw(&wt_t, &gs[ni * per_out..(ni + 1) * per_out], ckk, c_out, ho * wo);
        // col2im scatter-add
        for ci in 0..c_in {
            for u in 0..k {
                for v in 0..k {
                    let r = (ci * k + u) * k + v;
                    let src = &colgrad[r * ho * wo..(r + 1) * ho * wo];
                    for i in 0..ho {
                        let xi = (i * stride + u) as isize - pad as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        let row = (ci * h + xi as usize) * w;
                        for j in 0..wo {
                            let xj = (j * stride + v) as isize - pad as isize;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            dst[row + xj as usize] += src[i * wo + j];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape.to_vec(), dx)
}

fn conv2d_weight_grad(
    x: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    kernel: usize,
) -> Result<Tensor> {
    let xs_shape = x.shape();
    if xs_shape.len() != 4 || g.shape().len() != 4 || g.shape()[0] != xs_shape[0] {
        return Err(mismatch(
            "conv2d_weight_grad",
            format!("input {:?}, grad {:?}", xs_shape, g.shape()),
        ));
    }
    let (n, c_in, h, w) = (xs_shape[0], xs_shape[1], xs_shape[2], xs_shape[3]);
    let (c_out, ho, wo) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let k = kernel;
    let ckk = c_in * k * k;
    let per_in = c_in * h * w;
    let per_out = c_out * ho * wo;
    let xs = x.data();
    let gs = g.data();
    // Per-image partials summed in index order, so the result is independent
    // of thread count.
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let col = im2col(
                &xs[ni * per_in..(ni + 1) * per_in],
                c_in,
                h,
                w,
                k,
                stride,
                pad,
                ho,
                wo,
            );
            // colT [ho*wo, ckk]
            let hw = ho * wo;
            let mut col_t = vec![0.0; hw * ckk];
            for r in 0..ckk {
                for q in 0..hw {
                    col_t[q * ckk + r] = col[r * hw + q];
                }
            }
            matmul_raw(&gs[ni * per_out..(ni + 1) * per_out], &col_t, c_out, hw, ckk)
        })
        .collect();
    let mut dw = vec![0.0; c_out * ckk];
    for p in partials {
        for (d, s) in dw.iter_mut().zip(p) {
            *d += s;
        }
    }
    Tensor::new(vec![c_out, c_in, k, k], dw)
}

fn pool_dims(shape: &[usize], k: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if shape.len() != 4 || k == 0 {
        return Err(mismatch("pool", format!("{:?}, window {}", shape, k)));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    Ok((n, c, h, w, h / k, w / k))
}

fn avg_pool_forward(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w, ho, wo) = pool_dims(x.shape(), k)?;
    let src = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for u in 0..k {
                    let row = base + (i * k + u) * w + j * k;
                    for v in 0..k {
                        s += src[row + v];
                    }
                }
                out[obase + i * wo + j] = s * inv;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

fn avg_pool_backward(g: &Tensor, k: usize, in_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w, ho, wo) = pool_dims(in_shape, k)?;
    if g.shape() != [n, c, ho, wo] {
        return Err(mismatch(
            "avg_pool_grad",
            format!("grad {:?}, expected {:?}", g.shape(), [n, c, ho, wo]),
        ));
    }
    let src = g.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let base = nc * h * w;
        let gbase = nc * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let gv = src[gbase + i * wo + j] * inv;
                for u in 0..k {
                    let row = base + (i * k + u) * w + j * k;
                    for v in 0..k {
                        out[row + v] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

fn max_pool_forward(x: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w, ho, wo) = pool_dims(x.shape(), k)?;
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut idx = vec![0usize; n * c * ho * wo];
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + (i * k) * w + j * k;
                for u in 0..k {
                    let row = base + (i * k + u) * w + j * k;
                    for v in 0..k {
                        if src[row + v] > src[best] {
                            best = row + v;
                        }
                    }
                }
                out[obase + i * wo + j] = src[best];
                idx[obase + i * wo + j] = best;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, idx))
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Max relative error between the analytic gradient of `f` at `point` and
/// central differences with the given step.
pub fn finite_diff_check(
    f: &dyn Fn(&Var) -> Result<Var>,
    point: &Tensor,
    step: f64,
) -> Result<f64> {
    let x = Var::leaf(point.clone(), true);
    let y = f(&x)?;
    if !y.value().all_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check: f(point)".into(),
        });
    }
    let analytic = grad(&y, &[&x], false)?.remove(0);
    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = f(&Var::leaf(plus, false))?.item();
        let fm = f(&Var::leaf(minus, false))?.item();
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff_check: coordinate {}", i),
            });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.value().data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn leaf_forward_is_identity() {
        let v = Var::leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), false);
        assert_eq!(v.forward_eval().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn add_forward() {
        let a = Var::leaf(Tensor::from_vec(vec![1.0]), false);
        let b = Var::leaf(Tensor::from_vec(vec![2.0]), false);
        assert_eq!(a.add(&b).unwrap().value().data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_structured() {
        let a = Var::leaf(Tensor::zeros(&[2, 3]), false);
        let b = Var::leaf(Tensor::zeros(&[4, 5]), false);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {:?}", other.map(|v| v.shape().to_vec())),
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Var::leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let y = x.square().unwrap().sum();
        let g = grad(&y, &[&x], false).unwrap();
        assert_eq!(g[0].value().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_softplus_at_zero_is_half() {
        let x = Var::leaf(Tensor::scalar(0.0), true);
        let y = x.softplus(1.0).sum();
        let g = grad(&y, &[&x], false).unwrap();
        assert!((g[0].value().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn second_derivative_of_cube() {
        // s = sum(x^3); g = 3x^2; grad(sum(g)) = 6x
        let x = Var::leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let s = x.square().unwrap().mul(&x).unwrap().sum();
        let g = grad(&s, &[&x], true).unwrap().remove(0);
        let g2 = grad(&g.sum(), &[&x], false).unwrap().remove(0);
        assert_eq!(g2.value().data(), &[6.0, 12.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Var::leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(
            grad(&x, &[&x], false),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let x = Var::leaf(Tensor::from_vec(vec![1.0]), true);
        let z = Var::leaf(Tensor::from_vec(vec![5.0, 6.0]), true);
        let y = x.square().unwrap().sum();
        let g = grad(&y, &[&z], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let p = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = finite_diff_check(&|x| Ok(x.square()?.sum()), &p, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn fd_check_constant_zero() {
        let p = Tensor::from_vec(vec![0.3, -0.7]);
        let err = finite_diff_check(&|x| Ok(x.scalar_mul(0.0).sum()), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_primitive_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let x = randn(&mut rng, &[6]);
            let checks: Vec<(&str, Box<dyn Fn(&Var) -> Result<Var>>)> = vec![
                ("mul", Box::new(|v: &Var| Ok(v.mul(&v.scalar_add(1.5))?.sum()))),
                ("softplus", Box::new(|v: &Var| Ok(v.softplus(2.0).sum()))),
                ("sigmoid", Box::new(|v: &Var| Ok(v.sigmoid(1.0).sum()))),
                ("exp", Box::new(|v: &Var| Ok(v.exp().sum()))),
                ("div", Box::new(|v: &Var| Ok(v.div(&v.square()?.scalar_add(1.0))?.sum()))),
                (
                    "matmul",
                    Box::new(|v: &Var| {
                        let m = v.reshape(&[2, 3])?;
                        Ok(m.matmul(&m.transpose()?)?.square()?.sum())
                    }),
                ),
                (
                    "logsumexp-ish",
                    Box::new(|v: &Var| Ok(v.exp().sum().ln())),
                ),
            ];
            let _ = trial;
            for (name, f) in &checks {
                let err = finite_diff_check(f.as_ref(), &x, 1e-5).unwrap();
                assert!(err < 1e-6, "{}: rel err {}", name, err);
            }
        }
    }

    #[test]
    fn fd_conv_and_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[1, 2, 5, 5]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let wv = Var::constant(w.clone());
        let err = finite_diff_check(
            &|v| Ok(v.conv2d(&wv, 1, 1)?.square()?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv wrt input: {}", err);

        let xv = Var::constant(x.clone());
        let err_w = finite_diff_check(
            &|v| Ok(xv.conv2d(v, 1, 1)?.square()?.sum()),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err_w < 1e-6, "conv wrt weight: {}", err_w);

        let err_pool = finite_diff_check(
            &|v| Ok(v.avg_pool(2)?.square()?.sum()),
            &randn(&mut rng, &[1, 2, 4, 4]),
            1e-5,
        )
        .unwrap();
        assert!(err_pool < 1e-6, "avg_pool: {}", err_pool);

        let err_max = finite_diff_check(
            &|v| Ok(v.max_pool(2)?.square()?.sum()),
            &randn(&mut rng, &[1, 1, 4, 4]),
            1e-5,
        )
        .unwrap();
        assert!(err_max < 1e-6, "max_pool: {}", err_max);
    }

    #[test]
    fn hessian_vector_product_matches_finite_differences() {
        // s(x) = sum(softplus(x)^3); HVP against finite differences of the gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[5]);
        let v = randn(&mut rng, &[5]);
        let s = |x: &Var| -> Result<Var> {
            let sp = x.softplus(1.0);
            Ok(sp.square()?.mul(&sp)?.sum())
        };
        let x = Var::leaf(x0.clone(), true);
        let y = s(&x).unwrap();
        let g = grad(&y, &[&x], true).unwrap().remove(0);
        let gv = g.mul(&Var::constant(v.clone())).unwrap().sum();
        let hvp = grad(&gv, &[&x], false).unwrap().remove(0);

        let h = 1e-5;
        let grad_at = |p: &Tensor| -> Vec<f64> {
            let xv = Var::leaf(p.clone(), true);
            let y = s(&xv).unwrap();
            grad(&y, &[&xv], false).unwrap()[0].value().data().to_vec()
        };
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        for i in 0..5 {
            plus.data_mut()[i] += h * v.data()[i];
            minus.data_mut()[i] -= h * v.data()[i];
        }
        let gp = grad_at(&plus);
        let gm = grad_at(&minus);
        for i in 0..5 {
            let numeric = (gp[i] - gm[i]) / (2.0 * h);
            let a = hvp.value().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-4, "coordinate {}: rel {}", i, rel);
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = randn(&mut rng, &[2, 2, 6, 6]);
        let w = randn(&mut rng, &[4, 2, 3, 3]);
        let run = || {
            let xv = Var::leaf(x.clone(), true);
            let wv = Var::leaf(w.clone(), true);
            let y = xv.conv2d(&wv, 1, 1).unwrap().softplus(1.0).avg_pool(2).unwrap().square().unwrap().sum();
            let g = grad(&y, &[&xv, &wv], false).unwrap();
            (
                y.item(),
                g[0].value().data().to_vec(),
                g[1].value().data().to_vec(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn softplus_large_input_no_overflow() {
        let x = Var::leaf(Tensor::scalar(1000.0), false);
        let y = x.softplus(1.0);
        assert!((y.item() - 1000.0).abs() < 1e-9);
        assert!(y.value().all_finite());
    }
}
