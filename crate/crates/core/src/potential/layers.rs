//! Message-passing layers on a tape.
//!
//! Node features are `(n, d)` for the invariant stack and per-order
//! `(n, 2l+1, mult)` blocks for the equivariant stack. Edge arrays are indexed
//! in graph order; `source` and `target` hold the node of each edge.

use std::collections::BTreeMap;
use std::rc::Rc;

use hienet_autograd::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::equivariant::{gate_on_tape, CgTable, IrrepsLayout, TensorProduct};
use crate::error::{Error, Result};

/// Named parameter nodes of one evaluation.
pub type ParamVars = BTreeMap<String, Var>;

pub(crate) fn param(params: &ParamVars, name: &str) -> Result<Var> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))
}

/// Random masks for training-time dropout.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
    pub attention_rate: f64,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &Tape, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(mask, &shape)?;
        Ok(tape.mul(x, mask)?)
    }
}

/// Graph connectivity and radial/angular edge features shared by all layers.
pub struct EdgeContext {
    pub num_nodes: usize,
    pub source: Rc<[usize]>,
    pub target: Rc<[usize]>,
    /// `(E, n_bessel)` Bessel features including the envelope.
    pub radial: Var,
    /// `(E, 1)` envelope values.
    pub envelope: Var,
    /// `Y^0..=Y^L` as `(E, 2l+1)`.
    pub harmonics: Vec<Var>,
    /// `(n, 1)`: one plus the envelope-weighted neighbor count.
    pub norm: Var,
}

fn linear(tape: &Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => Ok(tape.add(y, b)?),
        None => Ok(y),
    }
}

/// Attention-gated invariant update
/// `h' = φ(h) + (1 − φ(h)) ⊙ Σ_j f_env · v_ji ⊙ σ(q_ji ⊙ k_ji / √d)`,
/// with keys, queries and values read from `(h_i ‖ h_j ‖ h_ji)`.
pub fn invariant_layer(
    tape: &Tape,
    params: &ParamVars,
    prefix: &str,
    h: Var,
    edges: &EdgeContext,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let d = tape.shape(h)[1];
    let p = |s: &str| param(params, &format!("{prefix}.{s}"));
    let pair = tape.concat(
        &[
            tape.gather(h, edges.target.clone())?,
            tape.gather(h, edges.source.clone())?,
            edges.radial,
        ],
        1,
    )?;
    let k = tape.matmul(pair, p("key")?)?;
    let q = tape.matmul(pair, p("query")?)?;
    let v = tape.matmul(pair, p("value.w1")?)?;
    let mut att = tape.sigmoid(tape.scale(tape.mul(q, k)?, 1.0 / (d as f64).sqrt()));
    let mut hidden = tape.silu(tape.add(v, p("value.b1")?)?);
    if let Some(drop) = dropout.as_deref_mut() {
        hidden = drop.apply(tape, hidden, drop.rate)?;
        att = drop.apply(tape, att, drop.attention_rate)?;
    }
    let value = linear(tape, hidden, p("value.w2")?, Some(p("value.b2")?))?;
    let msg = tape.mul(tape.mul(value, att)?, edges.envelope)?;
    let agg = tape.scatter_add(msg, edges.target.clone(), edges.num_nodes)?;

    let mut g = tape.silu(linear(tape, h, p("gate.w1")?, Some(p("gate.b1")?))?);
    if let Some(drop) = dropout {
        g = drop.apply(tape, g, drop.rate)?;
    }
    let phi = tape.sigmoid(linear(tape, g, p("gate.w2")?, Some(p("gate.b2")?))?);
    let rest = tape.offset(tape.neg(phi), 1.0);
    Ok(tape.add(phi, tape.mul(rest, agg)?)?)
}

/// Shapes of one equivariant layer.
#[derive(Clone, Debug)]
pub struct EquivariantPlan {
    /// Input multiplicity per order (zero when absent).
    pub input: Vec<usize>,
    /// Output multiplicity per order after the gate.
    pub output: Vec<usize>,
    pub tensor_product: TensorProduct,
}

impl EquivariantPlan {
    pub fn new(input: Vec<usize>, output: Vec<usize>, filter_lmax: usize) -> Self {
        let layout = IrrepsLayout::from_multiplicities(&input);
        let tensor_product = TensorProduct::new(layout, filter_lmax, output.len() - 1);
        Self {
            input,
            output,
            tensor_product,
        }
    }

    /// Multiplicity per order before the gate: the scalar block carries one
    /// extra gate channel per non-scalar output channel.
    pub fn pre_gate(&self) -> Vec<usize> {
        let mut m = self.output.clone();
        m[0] += self.output.iter().skip(1).sum::<usize>();
        m
    }

    /// Channels entering the message map of order `l` (all paths concatenated).
    pub fn message_width(&self, l: usize) -> usize {
        self.tensor_product
            .paths
            .iter()
            .filter(|p| p.l_out == l)
            .map(|p| p.mult)
            .sum()
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn parameter_shapes(&self, prefix: &str, n_bessel: usize, radial: bool) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, &m) in self.input.iter().enumerate() {
            if m > 0 {
                out.push((format!("{prefix}.linear.l{l}"), vec![m, m]));
            }
        }
        let paths = self.tensor_product.num_paths();
        out.push((format!("{prefix}.path_weights"), vec![paths]));
        if radial {
            out.push((format!("{prefix}.radial"), vec![n_bessel, paths]));
        }
        let pre = self.pre_gate();
        for (l, &m_out) in pre.iter().enumerate() {
            let width = self.message_width(l);
            if width > 0 {
                out.push((format!("{prefix}.message.l{l}"), vec![width, m_out]));
            }
            if self.input.get(l).copied().unwrap_or(0) > 0 {
                out.push((format!("{prefix}.skip.l{l}"), vec![self.input[l], m_out]));
            }
        }
        out
    }
}

/// Per-order channel mixing of `(n, 2l+1, m_in)` blocks by an `(m_in, m_out)` matrix.
fn mix(tape: &Tape, x: Var, w: Var) -> Result<Var> {
    let s = tape.shape(x);
    let m_out = tape.shape(w)[1];
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = tape.matmul(flat, w)?;
    Ok(tape.reshape(y, &[s[0], s[1], m_out])?)
}

/// Tensor-product message passing with skip connection and gate:
/// `f' = ψ(W_skip f + W_E · (1/N_i) Σ_j TP(W f_j, Y(r_ji)))`.
/// `blocks[l]` is the input block of order `l` (or `None`).
pub fn equivariant_layer(
    tape: &Tape,
    table: &CgTable,
    params: &ParamVars,
    prefix: &str,
    plan: &EquivariantPlan,
    blocks: &[Option<Var>],
    edges: &EdgeContext,
) -> Result<Vec<Option<Var>>> {
    let p = |s: &str| param(params, &format!("{prefix}.{s}"));
    let n = edges.num_nodes;
    let mut gathered = Vec::new();
    for (l, &m) in plan.input.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let x = blocks
            .get(l)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Layout(format!("{prefix}: missing input block l={l}")))?;
        let y = mix(tape, x, p(&format!("linear.l{l}"))?)?;
        gathered.push(tape.gather(y, edges.source.clone())?);
    }

    // Per-edge path weights, faded out by the envelope at the cutoff.
    let mut weights = p("path_weights")?;
    if let Ok(radial) = p("radial") {
        weights = tape.add(tape.matmul(edges.radial, radial)?, weights)?;
    }
    let weights = tape.mul(weights, edges.envelope)?;

    let messages = plan
        .tensor_product
        .apply(tape, table, &gathered, &edges.harmonics, weights)?;
    let norm = tape.reshape(edges.norm, &[n, 1, 1])?;

    let pre = plan.pre_gate();
    let mut pre_blocks = Vec::with_capacity(pre.len());
    for (l, &m_out) in pre.iter().enumerate() {
        let mut acc: Option<Var> = None;
        if let Some(msg) = messages.get(l).copied().flatten() {
            let agg = tape.scatter_add(msg, edges.target.clone(), n)?;
            let agg = tape.div(agg, norm)?;
            acc = Some(mix(tape, agg, p(&format!("message.l{l}"))?)?);
        }
        if plan.input.get(l).copied().unwrap_or(0) > 0 {
            let x = blocks[l].expect("checked above");
            let skip = mix(tape, x, p(&format!("skip.l{l}"))?)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, skip)?,
                None => skip,
            });
        }
        pre_blocks.push(acc.unwrap_or_else(|| tape.zeros(&[n, 2 * l + 1, m_out])));
    }
    let gated = gate_on_tape(tape, &pre_blocks, &plan.output)?;
    Ok(gated.into_iter().map(Some).collect())
}
