use std::rc::Rc;

use crate::error::{AutogradError, Result};
use crate::tape::{Op, Tape, Unary, Var};

impl Tape {
    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// The adjoint computation is recorded on this tape, so every returned
    /// gradient is itself a differentiable node. Nodes in `wrt` that do not
    /// influence `output` receive a zero array.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out_shape = self.shape(output);
        if !out_shape.is_empty() {
            return Err(AutogradError::NonScalarOutput(out_shape));
        }
        let n = output.0 + 1;

        // Only nodes downstream of some `wrt` entry carry useful adjoints.
        let mut on_path = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.0 < n {
                    on_path[w.0] = true;
                }
            }
            for i in 0..n {
                if on_path[i] {
                    continue;
                }
                let mut hit = false;
                nodes[i].op.for_each_input(|x| hit |= on_path[x.0]);
                on_path[i] = hit;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        if on_path[output.0] {
            grads[output.0] = Some(self.scalar(1.0));
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let contribute = |x: Var, adj: Var, grads: &mut Vec<Option<Var>>| -> Result<()> {
                grads[x.0] = Some(match grads[x.0] {
                    Some(prev) => self.add(prev, adj)?,
                    None => adj,
                });
                Ok(())
            };
            let need = |x: Var| on_path[x.0];
            let this = Var(i);
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    if need(a) {
                        contribute(a, g, &mut grads)?;
                    }
                    if need(b) {
                        contribute(b, g, &mut grads)?;
                    }
                }
                Op::Sub(a, b) => {
                    if need(a) {
                        contribute(a, g, &mut grads)?;
                    }
                    if need(b) {
                        let adj = self.neg(g);
                        contribute(b, adj, &mut grads)?;
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        let adj = self.mul(g, b)?;
                        contribute(a, adj, &mut grads)?;
                    }
                    if need(b) {
                        let adj = self.mul(g, a)?;
                        contribute(b, adj, &mut grads)?;
                    }
                }
                Op::Div(a, b) => {
                    if need(a) {
                        let adj = self.div(g, b)?;
                        contribute(a, adj, &mut grads)?;
                    }
                    if need(b) {
                        let t = self.mul(g, this)?;
                        let t = self.div(t, b)?;
                        let adj = self.neg(t);
                        contribute(b, adj, &mut grads)?;
                    }
                }
                Op::Neg(x) => {
                    let adj = self.neg(g);
                    contribute(x, adj, &mut grads)?;
                }
                Op::Scale(x, c) => {
                    let adj = self.scale(g, c);
                    contribute(x, adj, &mut grads)?;
                }
                Op::Offset(x, _) => contribute(x, g, &mut grads)?,
                Op::Unary(x, kind) => {
                    let adj = match kind {
                        Unary::Sqrt => {
                            let h = self.scale(g, 0.5);
                            self.div(h, this)?
                        }
                        Unary::Sin => {
                            let c = self.cos(x);
                            self.mul(g, c)?
                        }
                        Unary::Cos => {
                            let s = self.sin(x);
                            let t = self.mul(g, s)?;
                            self.neg(t)
                        }
                        Unary::Exp => self.mul(g, this)?,
                        Unary::Ln => self.div(g, x)?,
                        Unary::Sigmoid => {
                            // s (1 - s)
                            let one_minus = self.offset(self.neg(this), 1.0);
                            let d = self.mul(this, one_minus)?;
                            self.mul(g, d)?
                        }
                        Unary::Silu => {
                            // s (1 + x (1 - s))
                            let s = self.sigmoid(x);
                            let one_minus = self.offset(self.neg(s), 1.0);
                            let t = self.mul(x, one_minus)?;
                            let t = self.offset(t, 1.0);
                            let d = self.mul(s, t)?;
                            self.mul(g, d)?
                        }
                    };
                    contribute(x, adj, &mut grads)?;
                }
                Op::Powf(x, c) => {
                    if c != 0.0 {
                        let p = self.powf(x, c - 1.0);
                        let t = self.mul(g, p)?;
                        let adj = self.scale(t, c);
                        contribute(x, adj, &mut grads)?;
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    if need(a) {
                        let adj = match (ta, tb) {
                            (false, false) => self.matmul_t(g, b, false, true)?,
                            (true, false) => self.matmul_t(b, g, false, true)?,
                            (false, true) => self.matmul_t(g, b, false, false)?,
                            (true, true) => self.matmul_t(b, g, true, true)?,
                        };
                        contribute(a, adj, &mut grads)?;
                    }
                    if need(b) {
                        let adj = match (ta, tb) {
                            (false, false) => self.matmul_t(a, g, true, false)?,
                            (true, false) => self.matmul_t(a, g, false, false)?,
                            (false, true) => self.matmul_t(g, a, true, false)?,
                            (true, true) => self.matmul_t(g, a, true, true)?,
                        };
                        contribute(b, adj, &mut grads)?;
                    }
                }
                Op::Transpose(x) => {
                    let adj = self.transpose(g)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Reshape(x) => {
                    let s = self.shape(x);
                    let adj = self.reshape(g, &s)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Broadcast(x) => {
                    let s = self.shape(x);
                    let adj = self.sum_to(g, &s)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::SumTo(x) => {
                    let s = self.shape(x);
                    let adj = self.broadcast(g, &s)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts.iter().copied() {
                        let len = self.shape(p)[axis];
                        if need(p) {
                            let adj = self.slice(g, axis, start, len)?;
                            contribute(p, adj, &mut grads)?;
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let full = self.shape(x)[axis];
                    let adj = self.pad(g, axis, start, full)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Pad { x, axis, start } => {
                    let len = self.shape(x)[axis];
                    let adj = self.slice(g, axis, start, len)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Gather { x, index } => {
                    let rows = self.shape(x)[0];
                    let adj = self.scatter_add(g, index, rows)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::ScatterAdd { x, index } => {
                    let adj = self.gather(g, index)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Couple { a, b, terms } => {
                    if need(a) {
                        let t = Rc::new(terms.permuted([2, 1, 0]));
                        let adj = self.couple(g, b, t)?;
                        contribute(a, adj, &mut grads)?;
                    }
                    if need(b) {
                        let t = Rc::new(terms.permuted([2, 0, 1]));
                        let adj = self.contract(g, a, t)?;
                        contribute(b, adj, &mut grads)?;
                    }
                }
                Op::Contract { x, y, terms } => {
                    if need(x) {
                        let t = Rc::new(terms.permuted([1, 2, 0]));
                        let adj = self.couple(y, g, t)?;
                        contribute(x, adj, &mut grads)?;
                    }
                    if need(y) {
                        let t = Rc::new(terms.permuted([0, 2, 1]));
                        let adj = self.couple(x, g, t)?;
                        contribute(y, adj, &mut grads)?;
                    }
                }
                Op::Huber(x, delta) => {
                    let c = self.clamp(x, -delta, delta);
                    let adj = self.mul(g, c)?;
                    contribute(x, adj, &mut grads)?;
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(x);
                    let mask: Vec<f64> = xv
                        .iter()
                        .map(|&v| if v >= lo && v <= hi { 1.0 } else { 0.0 })
                        .collect();
                    let m = self.constant(mask, &self.shape(x))?;
                    let adj = self.mul(g, m)?;
                    contribute(x, adj, &mut grads)?;
                }
            }
        }

        wrt.iter()
            .map(|w| {
                let found = if w.0 < n { grads[w.0] } else { None };
                Ok(found.unwrap_or_else(|| self.zeros(&self.shape(*w))))
            })
            .collect()
    }
}
