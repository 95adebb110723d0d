//! Dense n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer of `f64` values in
//! row-major order. Every operation whose inputs require gradients records a
//! backward rule on the result, so the set of tensors reachable from a loss
//! forms a DAG. [`Tensor::backward`] linearizes that DAG into a [`Tape`]
//! (topological order, inputs first) and replays it in reverse, accumulating
//! gradients into every leaf created with `requires_grad = true`.
//!
//! Leaves accumulate across calls to `backward` until [`Tensor::zero_grad`]
//! is called; this is how a tensor used twice receives the sum of its
//! per-use gradients.

mod blob;
pub mod nn;

pub use blob::{read_blob, read_blob_from, write_blob, write_blob_to, BlobDtype};

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Reference-counted n-dimensional array participating in the gradient tape.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.name);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape.to_vec(), false)
    }

    /// Trainable leaf: gradients accumulate into it during `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape.to_vec(), true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; numel_of(shape)], shape)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::build(data, vec![n], false).expect("vector shape")
    }

    /// Records an operation result. `backward` maps the output gradient to one
    /// optional gradient per input. Nothing is recorded when no input needs
    /// gradients.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "{name}");
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the recording operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Same values cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), false).expect("valid shape")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Backpropagates from a single-element loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract("loss is not on the tape".into()));
        }
        let tape = Tape::record(self);
        tape.run(self, vec![1.0]);
        Ok(())
    }
}

/// Operations reachable from a root, in topological order (inputs first).
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // iterative post-order DFS over nodes requiring gradients
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        seen.insert(root.key());
        while let Some((node, next)) = stack.pop() {
            let inputs = node
                .0
                .grad_fn
                .as_ref()
                .map(|g| &g.inputs[..])
                .unwrap_or(&[]);
            if next < inputs.len() {
                let child = inputs[next].clone();
                stack.push((node, next + 1));
                if child.requires_grad() && seen.insert(child.key()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recorded order; leaves appear as `"leaf"`.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.op_name().unwrap_or("leaf"))
            .collect()
    }

    /// True when every node appears after all of its inputs.
    pub fn is_topological(&self) -> bool {
        let pos: HashMap<*const Node, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, t)| (t.key(), i))
            .collect();
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, t)| match &t.0.grad_fn {
                None => true,
                Some(g) => g
                    .inputs
                    .iter()
                    .filter(|x| x.requires_grad())
                    .all(|x| pos.get(&x.key()).is_some_and(|&p| p < i)),
            })
    }

    fn run(&self, root: &Tensor, seed: Vec<f64>) {
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(root.key(), seed);
        for node in self.nodes.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(f) => {
                    let input_grads = (f.backward)(&g);
                    debug_assert_eq!(input_grads.len(), f.inputs.len(), "{}", f.name);
                    for (input, ig) in f.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}", f.name);
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.key(), ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }
}

/// Elementwise operations. Binary ops accept equal shapes or a single-element
/// operand broadcast against the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Silu,
    Exp,
    Log,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op.is_binary(), b) {
        (true, Some(b)) => binary(op, a, b),
        (true, None) => Err(Error::Contract(format!("{op:?} needs two operands"))),
        (false, None) => Ok(unary(op, a)),
        (false, Some(_)) => Err(Error::Contract(format!("{op:?} takes one operand"))),
    }
}

fn unary(op: Elementwise, a: &Tensor) -> Tensor {
    let x = a.data();
    let out: Vec<f64> = match op {
        Elementwise::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Elementwise::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
        Elementwise::Exp => x.iter().map(|v| v.exp()).collect(),
        Elementwise::Log => x.iter().map(|v| v.ln()).collect(),
        _ => unreachable!(),
    };
    let src = a.clone();
    let name = match op {
        Elementwise::Relu => "relu",
        Elementwise::Silu => "silu",
        Elementwise::Exp => "exp",
        _ => "log",
    };
    let result_data = if op == Elementwise::Exp {
        Some(out.clone())
    } else {
        None
    };
    Tensor::from_op(name, out, a.shape().to_vec(), &[a], move |g| {
        let x = src.data();
        let dx: Vec<f64> = match op {
            Elementwise::Relu => g
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
            Elementwise::Silu => g
                .iter()
                .zip(x)
                .map(|(g, &v)| {
                    let s = sigmoid(v);
                    g * (s * (1.0 + v * (1.0 - s)))
                })
                .collect(),
            Elementwise::Exp => {
                let y = result_data.as_ref().expect("exp output");
                g.iter().zip(y).map(|(g, y)| g * y).collect()
            }
            _ => g.iter().zip(x).map(|(g, v)| g / v).collect(),
        };
        vec![Some(dx)]
    })
}

fn binary(op: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (shape, a_scalar, b_scalar) = if a.shape() == b.shape() {
        (a.shape().to_vec(), false, false)
    } else if b.numel() == 1 {
        (a.shape().to_vec(), false, true)
    } else if a.numel() == 1 {
        (b.shape().to_vec(), true, false)
    } else {
        return Err(Error::Dimension(format!(
            "{op:?}: shapes {:?} and {:?} are incompatible",
            a.shape(),
            b.shape()
        )));
    };
    let n = numel_of(&shape);
    let av = |i: usize| if a_scalar { a.data()[0] } else { a.data()[i] };
    let bv = |i: usize| if b_scalar { b.data()[0] } else { b.data()[i] };
    let out: Vec<f64> = (0..n)
        .map(|i| match op {
            Elementwise::Add => av(i) + bv(i),
            Elementwise::Sub => av(i) - bv(i),
            _ => av(i) * bv(i),
        })
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    let name = match op {
        Elementwise::Add => "add",
        Elementwise::Sub => "sub",
        _ => "mul",
    };
    Ok(Tensor::from_op(name, out, shape, &[a, b], move |g| {
        let reduce = |v: Vec<f64>, scalar: bool| -> Vec<f64> {
            if scalar {
                vec![v.iter().sum()]
            } else {
                v
            }
        };
        let ga = ac.requires_grad().then(|| {
            let v: Vec<f64> = match op {
                Elementwise::Add | Elementwise::Sub => g.to_vec(),
                _ => g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * if b_scalar { bc.data()[0] } else { bc.data()[i] })
                    .collect(),
            };
            reduce(v, a_scalar)
        });
        let gb = bc.requires_grad().then(|| {
            let v: Vec<f64> = match op {
                Elementwise::Add => g.to_vec(),
                Elementwise::Sub => g.iter().map(|g| -g).collect(),
                _ => g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * if a_scalar { ac.data()[0] } else { ac.data()[i] })
                    .collect(),
            };
            reduce(v, b_scalar)
        });
        vec![ga, gb]
    }))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(Elementwise::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(Elementwise::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(Elementwise::Mul, self, other)
    }

    pub fn relu(&self) -> Tensor {
        unary(Elementwise::Relu, self)
    }

    pub fn silu(&self) -> Tensor {
        unary(Elementwise::Silu, self)
    }

    pub fn exp(&self) -> Tensor {
        unary(Elementwise::Exp, self)
    }

    pub fn ln(&self) -> Tensor {
        unary(Elementwise::Log, self)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        binary(Elementwise::Mul, self, &Tensor::scalar(c)).expect("scalar broadcast")
    }

    /// Sum of all entries as a single-element tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![], &[self], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            &[self],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = gemm(a.data(), b.data(), m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        out,
        vec![m, n],
        &[a, b],
        move |g| {
            // dA = G·Bᵀ, dB = Aᵀ·G
            let ga = ac
                .requires_grad()
                .then(|| gemm(g, &transpose(bc.data(), k, n), m, n, k));
            let gb = bc
                .requires_grad()
                .then(|| gemm(&transpose(ac.data(), m, k), g, k, m, n));
            vec![ga, gb]
        },
    ))
}
