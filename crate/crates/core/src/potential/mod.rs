//! The hybrid model: element embedding, invariant attention layers, equivariant
//! tensor-product layers, scaled/shifted energy readout, and forces and stress
//! obtained by differentiating the energy on the tape.

mod layers;

use std::collections::BTreeMap;
use std::rc::Rc;

use hienet_autograd::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use layers::{equivariant_layer, invariant_layer, Dropout, EdgeContext, EquivariantPlan, ParamVars};

use crate::crystal::{build_graph, CrystalGraph, CrystalStructure, Mat3, Vec3};
use crate::equivariant::CgTable;
use crate::error::{Error, Result};
use crate::featurize::{bessel_on_tape, embed_nodes_on_tape, envelope_on_tape, NUM_ELEMENTS};

/// eV/Å³ to kBar.
pub const EV_PER_A3_TO_KBAR: f64 = 1602.1766208;
/// eV/Å³ to GPa.
pub const EV_PER_A3_TO_GPA: f64 = 160.21766208;

pub const ENERGY_SCALE: &str = "energy_scale";
pub const ELEMENT_SHIFT: &str = "element_shift";
pub const ELEMENT_MASK: &str = "element_mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_invariant_layers: usize,
    pub num_equivariant_layers: usize,
    pub hidden_dim: usize,
    /// Channel multiplicity for each rotation order `0..=L_max`.
    pub irreps: Vec<usize>,
    pub n_bessel: usize,
    pub envelope_p: u32,
    pub cutoff: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub radial_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_invariant_layers: 1,
            num_equivariant_layers: 3,
            hidden_dim: 512,
            irreps: vec![512, 128, 64, 32],
            n_bessel: 8,
            envelope_p: 6,
            cutoff: 5.0,
            dropout: 0.06,
            attention_dropout: 0.1,
            radial_weights: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for tests and desk-scale training.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            irreps: vec![64, 16, 8, 4],
            ..Self::default()
        }
    }

    pub fn lmax(&self) -> usize {
        self.irreps.len().saturating_sub(1)
    }

    pub fn is_invariant_only(&self) -> bool {
        self.num_equivariant_layers == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_invariant_layers + self.num_equivariant_layers == 0 {
            return bad("model needs at least one message-passing layer");
        }
        if self.hidden_dim == 0 || self.n_bessel == 0 || self.envelope_p == 0 {
            return bad("hidden_dim, n_bessel and envelope_p must be positive");
        }
        if self.irreps.is_empty() || self.irreps.contains(&0) {
            return bad("irreps multiplicities must all be positive");
        }
        if self.lmax() > 3 {
            return bad("irreps support rotation orders up to 3");
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return bad("cutoff must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        Ok(())
    }

    /// Shapes of the equivariant layers in order.
    pub fn equivariant_plans(&self) -> Vec<EquivariantPlan> {
        let mut plans = Vec::new();
        let mut input = vec![self.hidden_dim];
        for k in 0..self.num_equivariant_layers {
            let output = if k + 1 == self.num_equivariant_layers {
                vec![self.irreps[0]]
            } else {
                self.irreps.clone()
            };
            plans.push(EquivariantPlan::new(input, output.clone(), self.lmax()));
            input = output;
        }
        plans
    }

    /// Width of the scalar features fed to the readout.
    pub fn readout_width(&self) -> usize {
        if self.is_invariant_only() {
            self.hidden_dim
        } else {
            self.irreps[0]
        }
    }

    /// Parameter names and shapes in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_dim;
        let nb = self.n_bessel;
        let mut out = vec![("embedding".to_string(), vec![d, NUM_ELEMENTS])];
        for k in 0..self.num_invariant_layers {
            let p = format!("inv{k}");
            let width = 2 * d + nb;
            out.push((format!("{p}.key"), vec![width, d]));
            out.push((format!("{p}.query"), vec![width, d]));
            out.push((format!("{p}.value.w1"), vec![width, d]));
            out.push((format!("{p}.value.b1"), vec![d]));
            out.push((format!("{p}.value.w2"), vec![d, d]));
            out.push((format!("{p}.value.b2"), vec![d]));
            out.push((format!("{p}.gate.w1"), vec![d, d]));
            out.push((format!("{p}.gate.b1"), vec![d]));
            out.push((format!("{p}.gate.w2"), vec![d, d]));
            out.push((format!("{p}.gate.b2"), vec![d]));
        }
        for (k, plan) in self.equivariant_plans().iter().enumerate() {
            out.extend(plan.parameter_shapes(&format!("eqv{k}"), nb, self.radial_weights));
        }
        out.push(("readout".to_string(), vec![self.readout_width(), 1]));
        out.push((ENERGY_SCALE.to_string(), vec![1]));
        out.push((ELEMENT_SHIFT.to_string(), vec![NUM_ELEMENTS]));
        out.push((ELEMENT_MASK.to_string(), vec![NUM_ELEMENTS]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    arrays: BTreeMap<String, Array>,
}

impl ModelParameters {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.insert(name.into(), array);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Energy scale and element shifts are fitted, not trained.
    pub fn is_trainable(name: &str) -> bool {
        !matches!(name, ENERGY_SCALE | ELEMENT_SHIFT | ELEMENT_MASK)
    }

    pub fn num_trainable(&self) -> usize {
        self.arrays
            .iter()
            .filter(|(k, _)| Self::is_trainable(k))
            .map(|(_, a)| a.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    /// Checks names and shapes against a configuration.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.parameter_shapes();
        if expected.len() != self.arrays.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                self.arrays.len()
            )));
        }
        for (name, shape) in expected {
            match self.arrays.get(&name) {
                Some(a) if a.shape == shape && a.data.len() == shape.iter().product::<usize>() => {}
                Some(a) => {
                    return Err(Error::Mismatch(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        a.shape
                    )))
                }
                None => return Err(Error::Mismatch(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

fn initial_array(name: &str, shape: &[usize], rng: &mut ChaCha8Rng, path_fan_in: &dyn Fn(&str) -> usize) -> Array {
    let mut a = Array::zeros(shape.to_vec());
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let normal = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    };
    match leaf {
        ENERGY_SCALE => a.data[0] = 1.0,
        ELEMENT_SHIFT | ELEMENT_MASK => {}
        // zero-initialized biases; the final gate layer starts at zero so the
        // gate opens at exactly one half
        "b1" | "b2" | "w2" if name.contains(".gate.") => {}
        "b1" | "b2" => {}
        "embedding" => a.data.iter_mut().for_each(|v| *v = normal(rng, 1.0)),
        "path_weights" => {
            let prefix = name.trim_end_matches(".path_weights");
            let shape_len = a.data.len();
            for p in 0..shape_len {
                let fan = path_fan_in(&format!("{prefix}:{p}")).max(1);
                a.data[p] = normal(rng, 1.0 / (fan as f64).sqrt());
            }
        }
        "radial" => {
            let std = 0.1 / (shape[0] as f64).sqrt();
            a.data.iter_mut().for_each(|v| *v = normal(rng, std));
        }
        _ => {
            let std = 1.0 / (shape[0] as f64).sqrt();
            a.data.iter_mut().for_each(|v| *v = normal(rng, std));
        }
    }
    a
}

/// Anything that maps a structure to energy, forces and stress.
pub trait Potential: Sync {
    fn predict(&self, structure: &CrystalStructure) -> Result<PredictionSet>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// eV
    pub energy: f64,
    /// eV/Å
    pub forces: Vec<Vec3>,
    /// eV/Å³, symmetric
    pub stress: Mat3,
}

impl PredictionSet {
    pub fn stress_kbar(&self) -> Mat3 {
        self.stress * EV_PER_A3_TO_KBAR
    }

    pub fn max_force(&self) -> f64 {
        self.forces.iter().map(|f| f.norm()).fold(0.0, f64::max)
    }
}

/// Tape nodes of one differentiable evaluation.
pub struct Evaluation {
    pub energy: Var,
    /// `(n, 3)`, `-dE/dP`
    pub forces: Var,
    /// `(3, 3)`, `(1/V) dE/dε`
    pub stress: Var,
    pub params: ParamVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plans = config.equivariant_plans();
        let fan_in = |key: &str| -> usize {
            // key = "eqv{k}:{path}"
            let (layer, path) = key.split_once(':').unwrap_or((key, "0"));
            let k: usize = layer.trim_start_matches("eqv").parse().unwrap_or(0);
            let p: usize = path.parse().unwrap_or(0);
            let tp = &plans[k].tensor_product;
            tp.fan_in(tp.paths[p].l_out)
        };
        let mut params = ModelParameters::default();
        for (name, shape) in config.parameter_shapes() {
            let a = initial_array(&name, &shape, &mut rng, &fan_in);
            params.insert(name, a);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    /// Elements with a fitted reference energy.
    pub fn known_elements(&self) -> Vec<u32> {
        let mask = &self.params.get(ELEMENT_MASK).expect("mask present").data;
        (0..NUM_ELEMENTS)
            .filter(|&z| mask[z] != 0.0)
            .map(|z| z as u32 + 1)
            .collect()
    }

    /// Fails when the structure contains elements without a reference energy,
    /// once any reference has been fitted.
    pub fn check_elements(&self, structure: &CrystalStructure) -> Result<()> {
        let known = self.known_elements();
        if known.is_empty() {
            return Ok(());
        }
        match structure.atomic_numbers.iter().find(|z| !known.contains(z)) {
            Some(z) => Err(Error::Mismatch(format!("element {z} has no reference energy in the model"))),
            None => Ok(()),
        }
    }

    /// Records parameters on the tape; trainable ones as variables when
    /// `trainable` is set, everything else as constants.
    pub fn record_params(&self, tape: &Tape, trainable: bool) -> Result<ParamVars> {
        self.params
            .iter()
            .map(|(name, a)| {
                let v = if trainable && ModelParameters::is_trainable(name) {
                    tape.var(a.data.clone(), &a.shape)?
                } else {
                    tape.constant(a.data.clone(), &a.shape)?
                };
                Ok((name.clone(), v))
            })
            .collect()
    }

    /// Builds edge features from positions and cell deformed by
    /// `I + sym(strain)`, all on the tape.
    pub fn edge_context(
        &self,
        tape: &Tape,
        graph: &CrystalGraph,
        positions: Var,
        lattice: Var,
        strain: Var,
    ) -> Result<EdgeContext> {
        let cfg = &self.config;
        let n = graph.num_nodes;
        let e = graph.len();
        let sym = tape.scale(tape.add(strain, tape.transpose(strain)?)?, 0.5);
        let deform = tape.add(sym, tape.constant(Mat3::identity().as_slice().to_vec(), &[3, 3])?)?;
        let pos = tape.matmul(positions, deform)?;
        let cell = tape.matmul(lattice, deform)?;
        let source: Rc<[usize]> = graph.sources().into();
        let target: Rc<[usize]> = graph.targets().into();
        let images: Vec<f64> = graph
            .images()
            .iter()
            .flat_map(|k| k.map(|v| v as f64))
            .collect();
        let images = tape.constant(images, &[e, 3])?;
        let r = tape.sub(tape.gather(pos, source.clone())?, tape.gather(pos, target.clone())?)?;
        let r = tape.add(r, tape.matmul(images, cell)?)?;
        let dist = tape.sqrt(tape.sum_axis(tape.square(r), 1)?);
        let dist = tape.reshape(dist, &[e, 1])?;
        let unit = tape.div(r, dist)?;
        let envelope = envelope_on_tape(tape, tape.scale(dist, 1.0 / cfg.cutoff), cfg.envelope_p)?;
        let radial = bessel_on_tape(tape, dist, envelope, cfg.cutoff, cfg.n_bessel)?;
        let harmonics = if cfg.is_invariant_only() {
            Vec::new()
        } else {
            CgTable::shared().harmonics_on_tape(tape, unit, cfg.lmax())?
        };
        let count = tape.scatter_add(envelope, target.clone(), n)?;
        let norm = tape.offset(count, 1.0);
        Ok(EdgeContext {
            num_nodes: n,
            source,
            target,
            radial,
            envelope,
            harmonics,
            norm,
        })
    }

    /// Energy of the structure described by `edges`.
    pub fn energy_on_tape(
        &self,
        tape: &Tape,
        params: &ParamVars,
        atomic_numbers: &[u32],
        edges: &EdgeContext,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = edges.num_nodes;
        let embedding = layers::param(params, "embedding")?;
        let mut h = embed_nodes_on_tape(tape, atomic_numbers, embedding)?;
        for k in 0..cfg.num_invariant_layers {
            h = invariant_layer(tape, params, &format!("inv{k}"), h, edges, dropout.as_deref_mut())?;
        }
        let scalars = if cfg.is_invariant_only() {
            h
        } else {
            let table = CgTable::shared();
            let mut blocks = vec![Some(tape.reshape(h, &[n, 1, cfg.hidden_dim])?)];
            for (k, plan) in cfg.equivariant_plans().iter().enumerate() {
                blocks = equivariant_layer(tape, table, params, &format!("eqv{k}"), plan, &blocks, edges)?;
            }
            let f0 = blocks[0].expect("scalar block");
            tape.reshape(f0, &[n, cfg.irreps[0]])?
        };
        let per_atom = tape.matmul(scalars, layers::param(params, "readout")?)?;
        let per_atom = tape.mul(per_atom, layers::param(params, ENERGY_SCALE)?)?;
        let shift = tape.gather(
            layers::param(params, ELEMENT_SHIFT)?,
            crate::featurize::element_indices(atomic_numbers)?,
        )?;
        let shift = tape.reshape(shift, &[n, 1])?;
        Ok(tape.sum(tape.add(per_atom, shift)?))
    }

    /// Energy, forces and stress as tape nodes. Forces and stress are
    /// gradients recorded on the same tape, so they can be differentiated
    /// again with respect to the parameters.
    pub fn evaluate(
        &self,
        tape: &Tape,
        structure: &CrystalStructure,
        trainable: bool,
        dropout: Option<&mut Dropout>,
    ) -> Result<Evaluation> {
        let graph = build_graph(structure, self.config.cutoff)?;
        self.evaluate_graph(tape, structure, &graph, trainable, dropout)
    }

    pub fn evaluate_graph(
        &self,
        tape: &Tape,
        structure: &CrystalStructure,
        graph: &CrystalGraph,
        trainable: bool,
        dropout: Option<&mut Dropout>,
    ) -> Result<Evaluation> {
        let n = structure.len();
        let params = self.record_params(tape, trainable)?;
        let flat: Vec<f64> = structure.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let positions = tape.var(flat, &[n, 3])?;
        let lattice: Vec<f64> = structure.lattice.transpose().as_slice().to_vec();
        let lattice = tape.constant(lattice, &[3, 3])?;
        let strain = tape.var(vec![0.0; 9], &[3, 3])?;
        let edges = self.edge_context(tape, graph, positions, lattice, strain)?;
        let energy = self.energy_on_tape(tape, &params, &structure.atomic_numbers, &edges, dropout)?;
        let grads = tape.backward(energy, &[positions, strain])?;
        let forces = tape.neg(grads[0]);
        let g = grads[1];
        let sym = tape.scale(tape.add(g, tape.transpose(g)?)?, 0.5);
        let stress = tape.scale(sym, 1.0 / structure.volume());
        Ok(Evaluation {
            energy,
            forces,
            stress,
            params,
        })
    }
}

impl Potential for Model {
    fn predict(&self, structure: &CrystalStructure) -> Result<PredictionSet> {
        self.check_elements(structure)?;
        let tape = Tape::new();
        let ev = self.evaluate(&tape, structure, false, None)?;
        let f = tape.to_vec(ev.forces);
        let s = tape.to_vec(ev.stress);
        Ok(PredictionSet {
            energy: tape.item(ev.energy),
            forces: f.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            stress: Mat3::from_row_slice(&s),
        })
    }
}
