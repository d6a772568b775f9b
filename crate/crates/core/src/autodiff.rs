//! Minimal reverse-mode automatic differentiation over [`Tensor`].
//!
//! Graphs are built eagerly (define-by-run) as reference-counted DAGs and
//! differentiated by a reverse topological sweep. The op set is scoped to
//! exactly what the models in this crate need; every node records its
//! [`OpKind`] so tests can walk a graph and assert which primitives a
//! computation used.

use crate::error::{Error, Result};
use crate::tensor::{reduce_to_shape, Tensor};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Operation tag carried by every graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    MatMulT,
    Scale,
    AddScalar,
    SumLast,
    MeanPoolRows,
    SliceCols,
    ConcatCols,
    Exp,
    Ln,
    Sqrt,
    GeluExact,
}

impl OpKind {
    /// True for operations expressible with additions and multiplications
    /// only (affine data movement included).
    pub fn is_polynomial(self) -> bool {
        !matches!(
            self,
            OpKind::Div | OpKind::Exp | OpKind::Ln | OpKind::Sqrt | OpKind::GeluExact
        )
    }
}

enum Payload {
    None,
    Scalar(f64),
    PoolGroup(usize),
    Slice { lo: usize, hi: usize, width: usize },
    Widths(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: OpKind,
    payload: Payload,
    parents: Vec<Var>,
    grad: RefCell<Option<Tensor>>,
    trainable: bool,
}

/// Handle to a node in the computation graph. Cloning is cheap and shares
/// the underlying node.
#[derive(Clone)]
pub struct Var {
    node: Rc<Node>,
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu_exact_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_exact_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

impl Var {
    fn wrap(value: Tensor, op: OpKind, payload: Payload, parents: Vec<Var>) -> Var {
        Var {
            node: Rc::new(Node {
                value,
                op,
                payload,
                parents,
                grad: RefCell::new(None),
                trainable: false,
            }),
        }
    }

    /// Constant leaf; gradients are computed for it but it is not flagged
    /// as a parameter.
    pub fn constant(value: Tensor) -> Var {
        Var::wrap(value, OpKind::Leaf, Payload::None, vec![])
    }

    /// Trainable leaf.
    pub fn param(value: Tensor) -> Var {
        Var {
            node: Rc::new(Node {
                value,
                op: OpKind::Leaf,
                payload: Payload::None,
                parents: vec![],
                grad: RefCell::new(None),
                trainable: true,
            }),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn is_trainable(&self) -> bool {
        self.node.trainable
    }

    /// Gradient accumulated by the last `backward` sweep that reached this
    /// node, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.node.grad.borrow().clone()
    }

    pub fn op(&self) -> OpKind {
        self.node.op
    }

    // ---- arithmetic ----

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().add(rhs.value())?;
        Ok(Var::wrap(value, OpKind::Add, Payload::None, vec![self.clone(), rhs.clone()]))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().sub(rhs.value())?;
        Ok(Var::wrap(value, OpKind::Sub, Payload::None, vec![self.clone(), rhs.clone()]))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().mul(rhs.value())?;
        Ok(Var::wrap(value, OpKind::Mul, Payload::None, vec![self.clone(), rhs.clone()]))
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().div(rhs.value())?;
        Ok(Var::wrap(value, OpKind::Div, Payload::None, vec![self.clone(), rhs.clone()]))
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().matmul(rhs.value())?;
        Ok(Var::wrap(value, OpKind::MatMul, Payload::None, vec![self.clone(), rhs.clone()]))
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().matmul_t(rhs.value())?;
        Ok(Var::wrap(value, OpKind::MatMulT, Payload::None, vec![self.clone(), rhs.clone()]))
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::wrap(
            self.value().mul_scalar(c),
            OpKind::Scale,
            Payload::Scalar(c),
            vec![self.clone()],
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::wrap(
            self.value().add_scalar(c),
            OpKind::AddScalar,
            Payload::Scalar(c),
            vec![self.clone()],
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn sum_last(&self) -> Var {
        Var::wrap(self.value().sum_last(), OpKind::SumLast, Payload::None, vec![self.clone()])
    }

    pub fn mean_last(&self) -> Var {
        let n = self.value().cols() as f64;
        self.sum_last().scale(1.0 / n)
    }

    pub fn mean_pool_rows(&self, group: usize) -> Result<Var> {
        let value = self.value().mean_pool_rows(group)?;
        Ok(Var::wrap(
            value,
            OpKind::MeanPoolRows,
            Payload::PoolGroup(group),
            vec![self.clone()],
        ))
    }

    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Var> {
        let width = self.value().cols();
        let value = self.value().slice_cols(lo, hi)?;
        Ok(Var::wrap(
            value,
            OpKind::SliceCols,
            Payload::Slice { lo, hi, width },
            vec![self.clone()],
        ))
    }

    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|p| p.value().clone()).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let widths = tensors.iter().map(|t| t.cols()).collect();
        Ok(Var::wrap(value, OpKind::ConcatCols, Payload::Widths(widths), parts.to_vec()))
    }

    pub fn exp(&self) -> Var {
        Var::wrap(self.value().map(f64::exp), OpKind::Exp, Payload::None, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::wrap(self.value().map(f64::ln), OpKind::Ln, Payload::None, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::wrap(self.value().map(f64::sqrt), OpKind::Sqrt, Payload::None, vec![self.clone()])
    }

    pub fn gelu_exact(&self) -> Var {
        Var::wrap(
            self.value().map(gelu_exact_scalar),
            OpKind::GeluExact,
            Payload::None,
            vec![self.clone()],
        )
    }

    /// Scalar total of all entries, shape (1,).
    pub fn sum_all(&self) -> Result<Var> {
        let flat = Var::wrap(
            self.value().reshape(vec![1, self.value().len()])?,
            OpKind::SliceCols,
            Payload::Slice { lo: 0, hi: self.value().len(), width: self.value().len() },
            vec![self.clone()],
        );
        Ok(flat.sum_last())
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.value().len(), 1);
        self.value().data()[0]
    }

    // ---- backward ----

    /// Reverse sweep seeding this node's gradient with all ones.
    pub fn backward(&self) -> Result<()> {
        self.backward_with(Tensor::ones(self.shape()))
    }

    pub fn backward_with(&self, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape() {
            return Err(Error::ShapeMismatch(format!(
                "backward seed {:?} vs value {:?}",
                seed.shape(),
                self.shape()
            )));
        }
        let order = self.topo_order();
        for v in &order {
            *v.node.grad.borrow_mut() = None;
        }
        *self.node.grad.borrow_mut() = Some(seed);
        for v in order.iter().rev() {
            let grad = match v.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            v.push_to_parents(&grad)?;
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        // Iterative DFS with an explicit post-visit marker to avoid
        // recursion depth limits on long chains.
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&v.node) as usize;
            if expanded {
                order.push(v);
                continue;
            }
            if seen.contains_key(&key) {
                continue;
            }
            seen.insert(key, ());
            stack.push((v.clone(), true));
            for p in &v.node.parents {
                stack.push((p.clone(), false));
            }
        }
        order
    }

    fn accumulate(target: &Var, delta: Tensor) {
        let mut slot = target.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => *g = g.add(&delta).expect("grad accumulate"),
            None => *slot = Some(delta),
        }
    }

    fn push_to_parents(&self, grad: &Tensor) -> Result<()> {
        let ps = &self.node.parents;
        match self.node.op {
            OpKind::Leaf => {}
            OpKind::Add => {
                Self::accumulate(&ps[0], reduce_to_shape(grad, ps[0].shape()));
                Self::accumulate(&ps[1], reduce_to_shape(grad, ps[1].shape()));
            }
            OpKind::Sub => {
                Self::accumulate(&ps[0], reduce_to_shape(grad, ps[0].shape()));
                Self::accumulate(&ps[1], reduce_to_shape(&grad.neg(), ps[1].shape()));
            }
            OpKind::Mul => {
                let ga = grad.mul(ps[1].value())?;
                let gb = grad.mul(ps[0].value())?;
                Self::accumulate(&ps[0], reduce_to_shape(&ga, ps[0].shape()));
                Self::accumulate(&ps[1], reduce_to_shape(&gb, ps[1].shape()));
            }
            OpKind::Div => {
                let ga = grad.div(ps[1].value())?;
                let b_sq = ps[1].value().mul(ps[1].value())?;
                let gb = grad.mul(ps[0].value())?.div(&b_sq)?.neg();
                Self::accumulate(&ps[0], reduce_to_shape(&ga, ps[0].shape()));
                Self::accumulate(&ps[1], reduce_to_shape(&gb, ps[1].shape()));
            }
            OpKind::MatMul => {
                Self::accumulate(&ps[0], grad.matmul_t(ps[1].value())?);
                Self::accumulate(&ps[1], ps[0].value().transpose()?.matmul(grad)?);
            }
            OpKind::MatMulT => {
                // c = a · bᵀ with a (m,k), b (n,k), grad (m,n)
                Self::accumulate(&ps[0], grad.matmul(ps[1].value())?);
                Self::accumulate(&ps[1], grad.transpose()?.matmul(ps[0].value())?);
            }
            OpKind::Scale => {
                let c = match self.node.payload {
                    Payload::Scalar(c) => c,
                    _ => unreachable!(),
                };
                Self::accumulate(&ps[0], grad.mul_scalar(c));
            }
            OpKind::AddScalar => Self::accumulate(&ps[0], grad.clone()),
            OpKind::SumLast => {
                let expanded = Tensor::zeros(ps[0].shape()).add(grad)?;
                Self::accumulate(&ps[0], expanded);
            }
            OpKind::MeanPoolRows => {
                let group = match self.node.payload {
                    Payload::PoolGroup(g) => g,
                    _ => unreachable!(),
                };
                let (k, n) = (grad.shape()[0], grad.shape()[1]);
                let mut out = vec![0.0; k * group * n];
                for i in 0..k * group {
                    let src = (i / group) * n;
                    for j in 0..n {
                        out[i * n + j] = grad.data()[src + j] / group as f64;
                    }
                }
                Self::accumulate(&ps[0], Tensor::new(vec![k * group, n], out)?);
            }
            OpKind::SliceCols => {
                let (lo, hi, width) = match self.node.payload {
                    Payload::Slice { lo, hi, width } => (lo, hi, width),
                    _ => unreachable!(),
                };
                if ps[0].value().len() == grad.len() && width == grad.len() {
                    // flatten case from sum_all
                    Self::accumulate(&ps[0], Tensor::new(ps[0].shape().to_vec(), grad.data().to_vec())?);
                } else {
                    let rows = ps[0].shape()[0];
                    let mut out = vec![0.0; rows * width];
                    let w = hi - lo;
                    for i in 0..rows {
                        for j in 0..w {
                            out[i * width + lo + j] = grad.data()[i * w + j];
                        }
                    }
                    Self::accumulate(&ps[0], Tensor::new(vec![rows, width], out)?);
                }
            }
            OpKind::ConcatCols => {
                let widths = match &self.node.payload {
                    Payload::Widths(w) => w.clone(),
                    _ => unreachable!(),
                };
                let mut lo = 0;
                for (p, w) in ps.iter().zip(widths) {
                    Self::accumulate(p, grad.slice_cols(lo, lo + w)?);
                    lo += w;
                }
            }
            OpKind::Exp => {
                Self::accumulate(&ps[0], grad.mul(&self.node.value)?);
            }
            OpKind::Ln => {
                Self::accumulate(&ps[0], grad.div(ps[0].value())?);
            }
            OpKind::Sqrt => {
                let half_inv = self.node.value.map(|y| 0.5 / y);
                Self::accumulate(&ps[0], grad.mul(&half_inv)?);
            }
            OpKind::GeluExact => {
                let d = ps[0].value().map(gelu_exact_grad_scalar);
                Self::accumulate(&ps[0], grad.mul(&d)?);
            }
        }
        Ok(())
    }

    /// All op kinds appearing in the graph rooted at this node.
    pub fn collect_ops(&self) -> Vec<OpKind> {
        self.topo_order().iter().map(|v| v.node.op).collect()
    }
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, at: &Tensor, eps: f64) -> Tensor {
    let mut out = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += eps;
        let mut minus = at.clone();
        minus.data_mut()[i] -= eps;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    out
}

/// Relative deviation between an analytic gradient and its finite-difference
/// estimate, normalized by the larger magnitude (floored at 1).
pub fn grad_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0f64, f64::max)
}
