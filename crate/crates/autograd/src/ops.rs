use std::rc::Rc;

use crate::coupling::CouplingTerms;
use crate::error::{AutogradError, Result};
use crate::shape::{broadcast_shapes, broadcastable, numel};
use crate::tape::{Op, Tape, Unary, Var};

fn mismatch(op: &'static str, lhs: Vec<usize>, rhs: Vec<usize>) -> AutogradError {
    AutogradError::ShapeMismatch { op, lhs, rhs }
}

fn invalid(op: &'static str, message: impl Into<String>) -> AutogradError {
    AutogradError::InvalidArgument {
        op,
        message: message.into(),
    }
}

impl Tape {
    /// Aligns two operands to a common shape, inserting broadcast nodes as needed.
    fn align(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((a, b, sa));
        }
        let target = broadcast_shapes(&sa, &sb).ok_or_else(|| mismatch(op, sa.clone(), sb.clone()))?;
        let a = if sa == target { a } else { self.broadcast(a, &target)? };
        let b = if sb == target { b } else { self.broadcast(b, &target)? };
        Ok((a, b, target))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape) = self.align("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape) = self.align("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape) = self.align("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape) = self.align("div", a, b)?;
        Ok(self.push(Op::Div(a, b), shape))
    }

    pub fn neg(&self, x: Var) -> Var {
        let shape = self.shape(x);
        self.push(Op::Neg(x), shape)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let shape = self.shape(x);
        self.push(Op::Scale(x, c), shape)
    }

    pub fn offset(&self, x: Var, c: f64) -> Var {
        let shape = self.shape(x);
        self.push(Op::Offset(x, c), shape)
    }

    fn unary(&self, x: Var, kind: Unary) -> Var {
        let shape = self.shape(x);
        self.push(Op::Unary(x, kind), shape)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }

    pub fn cos(&self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn powf(&self, x: Var, c: f64) -> Var {
        let shape = self.shape(x);
        self.push(Op::Powf(x, c), shape)
    }

    pub fn square(&self, x: Var) -> Var {
        self.powf(x, 2.0)
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&self, x: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(invalid("huber", "delta must be positive"));
        }
        let shape = self.shape(x);
        Ok(self.push(Op::Huber(x, delta), shape))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let shape = self.shape(x);
        self.push(Op::Clamp(x, lo, hi), shape)
    }

    /// `op(a) @ op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        Ok(self.push(Op::Transpose(x), vec![s[1], s[0]]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(&s) != numel(shape) {
            return Err(mismatch("reshape", s, shape.to_vec()));
        }
        if s == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn broadcast(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if !broadcastable(&s, shape) {
            return Err(mismatch("broadcast", s, shape.to_vec()));
        }
        if s == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Broadcast(x), shape.to_vec()))
    }

    /// Sums `x` down to a shape it could be broadcast from.
    pub fn sum_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if !broadcastable(shape, &s) {
            return Err(mismatch("sum_to", s, shape.to_vec()));
        }
        if s == shape {
            return Ok(x);
        }
        Ok(self.push(Op::SumTo(x), shape.to_vec()))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.shape(x);
        if s.is_empty() {
            return x;
        }
        self.push(Op::SumTo(x), vec![])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let mut keep = s.clone();
        keep[axis] = 1;
        let summed = self.sum_to(x, &keep)?;
        let mut dropped = s;
        dropped.remove(axis);
        self.reshape(summed, &dropped)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = numel(&self.shape(x)).max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|p| self.shape(*p))
            .ok_or_else(|| invalid("concat", "no operands"))?;
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, s));
            }
            out[axis] += s[axis];
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.into(),
                axis,
            },
            out,
        ))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        if start == 0 && len == s[axis] {
            return Ok(x);
        }
        let mut out = s;
        out[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, out))
    }

    /// Embeds `x` into zeros of extent `full` along `axis`, starting at `start`.
    pub fn pad(&self, x: Var, axis: usize, start: usize, full: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start + s[axis] > full {
            return Err(invalid("pad", format!("cannot place {s:?} at {start} within {full}")));
        }
        if start == 0 && s[axis] == full {
            return Ok(x);
        }
        let mut out = s;
        out[axis] = full;
        Ok(self.push(Op::Pad { x, axis, start }, out))
    }

    /// Row gather along axis 0.
    pub fn gather(&self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(invalid("gather", "cannot gather from a scalar"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(AutogradError::IndexOutOfBounds {
                op: "gather",
                index: bad,
                len: s[0],
            });
        }
        let mut out = s;
        out[0] = index.len();
        Ok(self.push(Op::Gather { x, index }, out))
    }

    /// Adds row `r` of `x` into row `index[r]` of a zero array with `size` rows.
    /// Accumulation runs in row order, so results are reproducible.
    pub fn scatter_add(&self, x: Var, index: Rc<[usize]>, size: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || s[0] != index.len() {
            return Err(mismatch("scatter_add", s, vec![index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= size) {
            return Err(AutogradError::IndexOutOfBounds {
                op: "scatter_add",
                index: bad,
                len: size,
            });
        }
        let mut out = s;
        out[0] = size;
        Ok(self.push(Op::ScatterAdd { x, index }, out))
    }

    /// `out[e, k, c] = sum coef * a[e, i, c] * b[e, j]` over the table entries.
    pub fn couple(&self, a: Var, b: Var, terms: Rc<CouplingTerms>) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let [di, dj, dk] = terms.dims();
        if sa.len() != 3 || sb.len() != 2 || sa[0] != sb[0] || sa[1] != di || sb[1] != dj {
            return Err(mismatch("couple", sa, sb));
        }
        let shape = vec![sa[0], dk, sa[2]];
        Ok(self.push(Op::Couple { a, b, terms }, shape))
    }

    /// `out[e, k] = sum coef * <x[e, i, :], y[e, j, :]>` over the table entries.
    pub fn contract(&self, x: Var, y: Var, terms: Rc<CouplingTerms>) -> Result<Var> {
        let sx = self.shape(x);
        let sy = self.shape(y);
        let [di, dj, dk] = terms.dims();
        if sx.len() != 3 || sy.len() != 3 || sx[0] != sy[0] || sx[2] != sy[2] || sx[1] != di || sy[1] != dj {
            return Err(mismatch("contract", sx, sy));
        }
        let shape = vec![sx[0], dk];
        Ok(self.push(Op::Contract { x, y, terms }, shape))
    }
}
