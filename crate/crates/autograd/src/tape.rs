use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::coupling::{self, CouplingTerms};
use crate::error::{AutogradError, Result};
use crate::shape::{broadcast_values, numel, sum_to_values};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sqrt,
    Sin,
    Cos,
    Exp,
    Ln,
    Sigmoid,
    Silu,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Unary(Var, Unary),
    Powf(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Broadcast(Var),
    SumTo(Var),
    Concat { parts: Rc<[Var]>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Rc<[usize]> },
    ScatterAdd { x: Var, index: Rc<[usize]> },
    Couple { a: Var, b: Var, terms: Rc<CouplingTerms> },
    Contract { x: Var, y: Var, terms: Rc<CouplingTerms> },
    Huber(Var, f64),
    Clamp(Var, f64, f64),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(_, u) => match u {
                Unary::Sqrt => "sqrt",
                Unary::Sin => "sin",
                Unary::Cos => "cos",
                Unary::Exp => "exp",
                Unary::Ln => "ln",
                Unary::Sigmoid => "sigmoid",
                Unary::Silu => "silu",
            },
            Op::Powf(..) => "powf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Broadcast(..) => "broadcast",
            Op::SumTo(..) => "sum_to",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Couple { .. } => "couple",
            Op::Contract { .. } => "contract",
            Op::Huber(..) => "huber",
            Op::Clamp(..) => "clamp",
        }
    }

    pub(crate) fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                f(*a);
                f(*b);
            }
            Op::MatMul { a, b, .. } | Op::Couple { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Contract { x, y, .. } => {
                f(*x);
                f(*y);
            }
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Unary(x, _)
            | Op::Powf(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Broadcast(x)
            | Op::SumTo(x)
            | Op::Huber(x, _)
            | Op::Clamp(x, _, _) => f(*x),
            Op::Slice { x, .. } | Op::Pad { x, .. } | Op::Gather { x, .. } | Op::ScatterAdd { x, .. } => f(*x),
            Op::Concat { parts, .. } => parts.iter().copied().for_each(f),
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

/// A single-writer recording of primitive operations and their values.
///
/// Every operation is evaluated eagerly when recorded. Gradients produced by
/// [`Tape::backward`] are themselves recorded, so they can be differentiated again.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_value(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sqrt => x.sqrt(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Silu => x * sigmoid(x),
    }
}

fn powf_value(x: f64, c: f64) -> f64 {
    if c == c.trunc() && c.abs() <= 64.0 {
        x.powi(c as i32)
    } else {
        x.powf(c)
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.iter().map(|&x| f(x)).collect()
}

fn matmul_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> (usize, usize, usize, usize) {
    let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
    let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
    (m, k, k2, n)
}

/// Evaluates `op` given a value lookup for its inputs. Shared by recording and replay.
pub(crate) fn evaluate(
    op: &Op,
    out_shape: &[usize],
    shape_of: &dyn Fn(Var) -> Vec<usize>,
    value_of: &dyn Fn(Var) -> Rc<Vec<f64>>,
) -> Rc<Vec<f64>> {
    let v = |x: Var| value_of(x);
    let out = match op {
        Op::Leaf | Op::Constant => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => zip_with(&v(*a), &v(*b), |x, y| x + y),
        Op::Sub(a, b) => zip_with(&v(*a), &v(*b), |x, y| x - y),
        Op::Mul(a, b) => zip_with(&v(*a), &v(*b), |x, y| x * y),
        Op::Div(a, b) => zip_with(&v(*a), &v(*b), |x, y| x / y),
        Op::Neg(a) => map(&v(*a), |x| -x),
        Op::Scale(a, c) => {
            let c = *c;
            map(&v(*a), |x| c * x)
        }
        Op::Offset(a, c) => {
            let c = *c;
            map(&v(*a), |x| x + c)
        }
        Op::Unary(a, kind) => {
            let kind = *kind;
            map(&v(*a), |x| unary_value(kind, x))
        }
        Op::Powf(a, c) => {
            let c = *c;
            map(&v(*a), |x| powf_value(x, c))
        }
        Op::MatMul { a, b, ta, tb } => {
            let sa = shape_of(*a);
            let sb = shape_of(*b);
            let (m, k, _, n) = matmul_dims(&sa, &sb, *ta, *tb);
            let av = v(*a);
            let bv = v(*b);
            let mut c = vec![0.0; m * n];
            // Row-major storage; transposition is expressed through strides.
            let (rsa, csa) = if *ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
            let (rsb, csb) = if *tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
            if m > 0 && n > 0 && k > 0 {
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        k,
                        n,
                        1.0,
                        av.as_ptr(),
                        rsa,
                        csa,
                        bv.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            c
        }
        Op::Transpose(a) => {
            let s = shape_of(*a);
            let av = v(*a);
            let (r, c) = (s[0], s[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = av[i * c + j];
                }
            }
            out
        }
        Op::Reshape(a) => return v(*a),
        Op::Broadcast(a) => broadcast_values(&v(*a), &shape_of(*a), out_shape),
        Op::SumTo(a) => sum_to_values(&v(*a), &shape_of(*a), out_shape),
        Op::Concat { parts, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(numel(out_shape));
            let vals: Vec<(Rc<Vec<f64>>, usize)> =
                parts.iter().map(|p| (v(*p), shape_of(*p)[*axis] * inner)).collect();
            for o in 0..outer {
                for (pv, block) in &vals {
                    out.extend_from_slice(&pv[o * block..(o + 1) * block]);
                }
            }
            out
        }
        Op::Slice { x, axis, start } => {
            let s = shape_of(*x);
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = out_shape[*axis];
            let xv = v(*x);
            let mut out = Vec::with_capacity(numel(out_shape));
            for o in 0..outer {
                let base = o * s[*axis] * inner + start * inner;
                out.extend_from_slice(&xv[base..base + len * inner]);
            }
            out
        }
        Op::Pad { x, axis, start } => {
            let s = shape_of(*x);
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let full = out_shape[*axis];
            let xv = v(*x);
            let mut out = vec![0.0; numel(out_shape)];
            let block = s[*axis] * inner;
            for o in 0..outer {
                let base = o * full * inner + start * inner;
                out[base..base + block].copy_from_slice(&xv[o * block..(o + 1) * block]);
            }
            out
        }
        Op::Gather { x, index } => {
            let s = shape_of(*x);
            let row: usize = s[1..].iter().product();
            let xv = v(*x);
            let mut out = Vec::with_capacity(index.len() * row);
            for &i in index.iter() {
                out.extend_from_slice(&xv[i * row..(i + 1) * row]);
            }
            out
        }
        Op::ScatterAdd { x, index } => {
            let row: usize = out_shape[1..].iter().product();
            let xv = v(*x);
            let mut out = vec![0.0; numel(out_shape)];
            for (r, &i) in index.iter().enumerate() {
                for (o, s) in out[i * row..(i + 1) * row].iter_mut().zip(&xv[r * row..(r + 1) * row]) {
                    *o += *s;
                }
            }
            out
        }
        Op::Couple { a, b, terms } => {
            let sa = shape_of(*a);
            coupling::couple(terms, &v(*a), &v(*b), sa[0], sa[2])
        }
        Op::Contract { x, y, terms } => {
            let sx = shape_of(*x);
            coupling::contract(terms, &v(*x), &v(*y), sx[0], sx[2])
        }
        Op::Huber(a, delta) => {
            let d = *delta;
            map(&v(*a), |e| {
                if e.abs() <= d {
                    0.5 * e * e
                } else {
                    d * (e.abs() - 0.5 * d)
                }
            })
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            map(&v(*a), |x| x.clamp(lo, hi))
        }
    };
    Rc::new(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.nodes.borrow()[x.0].shape.clone()
    }

    pub fn value(&self, x: Var) -> Rc<Vec<f64>> {
        self.nodes.borrow()[x.0].value.clone()
    }

    pub fn to_vec(&self, x: Var) -> Vec<f64> {
        self.nodes.borrow()[x.0].value.as_ref().clone()
    }

    /// First element of `x`; meant for scalars.
    pub fn item(&self, x: Var) -> f64 {
        self.nodes.borrow()[x.0].value[0]
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes.borrow()[x.0].requires_grad
    }

    /// Histogram of recorded primitive kinds, for introspection.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in self.nodes.borrow().iter() {
            *counts.entry(node.op.name()).or_insert(0) += 1;
        }
        counts
    }

    fn push_leaf(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(AutogradError::ValueLength {
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: if requires_grad { Op::Leaf } else { Op::Constant },
            value: Rc::new(values),
            shape: shape.to_vec(),
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn var(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.push_leaf(values, shape, true)
    }

    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.push_leaf(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.push_leaf(vec![value], &[], false).expect("scalar shape")
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.push_leaf(vec![0.0; numel(shape)], shape, false)
            .expect("consistent shape")
    }

    pub fn ones(&self, shape: &[usize]) -> Var {
        self.push_leaf(vec![1.0; numel(shape)], shape, false)
            .expect("consistent shape")
    }

    pub(crate) fn push(&self, op: Op, shape: Vec<usize>) -> Var {
        let value;
        let requires_grad;
        {
            let nodes = self.nodes.borrow();
            let shape_of = |x: Var| nodes[x.0].shape.clone();
            let value_of = |x: Var| nodes[x.0].value.clone();
            value = evaluate(&op, &shape, &shape_of, &value_of);
            let mut rg = false;
            op.for_each_input(|x| rg |= nodes[x.0].requires_grad);
            requires_grad = rg;
        }
        debug_assert_eq!(value.len(), numel(&shape), "{} produced wrong length", op.name());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            shape,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Recomputes every recorded value from the leaves and checks bit-exact agreement.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        let mut fresh: Vec<Rc<Vec<f64>>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    let shape_of = |x: Var| nodes[x.0].shape.clone();
                    let value_of = |x: Var| fresh[x.0].clone();
                    evaluate(&node.op, &node.shape, &shape_of, &value_of)
                }
            };
            let same = value.len() == node.value.len()
                && value
                    .iter()
                    .zip(node.value.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return false;
            }
            fresh.push(value);
        }
        true
    }
}
