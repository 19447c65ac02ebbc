//! Architecture ablation: hybrid, equivariant-only and invariant-only
//! variants compared on parameter count, training throughput, held-out loss
//! and per-layer forward time.

use std::fmt::Write as _;
use std::time::Instant;

use hienet_autograd::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crystal::{build_graph, CrystalStructure};
use crate::equivariant::CgTable;
use crate::error::{Error, Result};
use crate::io::config::BenchSection;
use crate::potential::{equivariant_layer, invariant_layer, Model, ModelConfig};
use crate::training::{
    evaluate_errors, fit_reference_energies, loss_and_gradients, loss_value, train, LabeledSample, TrainConfig,
};

/// Message-passing layers in every variant.
pub const NUM_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One invariant layer followed by equivariant layers.
    HIENet,
    /// Equivariant layers only.
    EqvNet,
    /// Invariant layers only.
    InvNet,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::HIENet, Variant::EqvNet, Variant::InvNet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::HIENet => "HIENet",
            Variant::EqvNet => "EqvNet",
            Variant::InvNet => "InvNet",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name}")))
    }

    /// Configuration with scalar width `width`; higher orders get a quarter,
    /// an eighth and a sixteenth of the channels.
    pub fn config(self, width: usize) -> ModelConfig {
        let irreps = [1, 4, 8, 16].iter().map(|&k| (width / k).max(1)).collect();
        let (inv, eqv) = match self {
            Variant::HIENet => (1, NUM_LAYERS - 1),
            Variant::EqvNet => (0, NUM_LAYERS),
            Variant::InvNet => (NUM_LAYERS, 0),
        };
        ModelConfig {
            hidden_dim: width,
            irreps,
            num_invariant_layers: inv,
            num_equivariant_layers: eqv,
            ..ModelConfig::desk()
        }
    }
}

/// Invariant-only configuration with `layers` layers whose trainable
/// parameter count is closest to `target`.
pub fn matched_invariant_config(target: usize, layers: usize) -> ModelConfig {
    let count = |d: usize| {
        let cfg = ModelConfig {
            hidden_dim: d,
            irreps: vec![d],
            num_invariant_layers: layers,
            num_equivariant_layers: 0,
            ..ModelConfig::desk()
        };
        let n = cfg
            .parameter_shapes()
            .iter()
            .filter(|(name, _)| crate::potential::ModelParameters::is_trainable(name))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>();
        (cfg, n)
    };
    (1..=4096)
        .map(count)
        .min_by_key(|(_, n)| n.abs_diff(target))
        .map(|(c, _)| c)
        .expect("non-empty search")
}

/// Number of tensor-product (`couple`/`contract`) nodes recorded by one
/// training-style evaluation of `model` on `structure`.
pub fn coupling_op_count(model: &Model, structure: &CrystalStructure) -> Result<usize> {
    let tape = Tape::new();
    let eval = model.evaluate(&tape, structure, true, None)?;
    let _ = tape.backward(eval.energy, &[eval.params.values().copied().next().expect("parameters")])?;
    let counts = tape.op_counts();
    Ok(counts.get("couple").copied().unwrap_or(0) + counts.get("contract").copied().unwrap_or(0))
}

/// Forward+backward training passes per second (loss including forces and
/// stress, differentiated with respect to the weights). The first `warmup`
/// batches are not timed.
pub fn training_throughput(
    model: &Model,
    samples: &[LabeledSample],
    cfg: &TrainConfig,
    batch_size: usize,
    warmup: usize,
    iterations: usize,
) -> Result<f64> {
    if samples.is_empty() || batch_size == 0 || iterations == 0 {
        return Err(Error::InvalidArgument("throughput needs samples, batches and iterations".into()));
    }
    let batch = |k: usize| -> Result<()> {
        (0..batch_size)
            .into_par_iter()
            .map(|i| loss_and_gradients(model, &samples[(k * batch_size + i) % samples.len()], &cfg.loss, None).map(|_| ()))
            .collect()
    };
    for k in 0..warmup {
        batch(k)?;
    }
    let start = Instant::now();
    for k in 0..iterations {
        batch(warmup + k)?;
    }
    Ok((iterations * batch_size) as f64 / start.elapsed().as_secs_f64())
}

/// Median forward time (seconds) of one layer of each kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerTiming {
    pub invariant: f64,
    pub equivariant: f64,
}

impl LayerTiming {
    pub fn speedup(&self) -> f64 {
        self.equivariant / self.invariant
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Times the forward pass of the invariant layer and of an equivariant layer
/// whose input and output both carry `width` scalar channels, on the same
/// structure and edge features.
pub fn layer_timing(width: usize, structure: &CrystalStructure, repeats: usize, seed: u64) -> Result<LayerTiming> {
    let model = Model::new(Variant::HIENet.config(width), seed)?;
    let cfg = &model.config;
    let plans = cfg.equivariant_plans();
    let plan = plans
        .iter()
        .position(|p| p.input == cfg.irreps && p.output == cfg.irreps)
        .ok_or_else(|| Error::Config("no equivariant layer with matched input and output".into()))?;
    let graph = build_graph(structure, cfg.cutoff)?;
    let n = structure.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let h = random(n * width);
    let blocks: Vec<Vec<f64>> = cfg.irreps.iter().enumerate().map(|(l, &m)| random(n * (2 * l + 1) * m)).collect();

    let mut inv = Vec::with_capacity(repeats);
    let mut eqv = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let tape = Tape::new();
        let params = model.record_params(&tape, false)?;
        let flat: Vec<f64> = structure.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let pos = tape.constant(flat, &[n, 3])?;
        let lat = tape.constant(structure.lattice.transpose().as_slice().to_vec(), &[3, 3])?;
        let edges = model.edge_context(&tape, &graph, pos, lat, tape.zeros(&[3, 3]))?;
        let hv = tape.constant(h.clone(), &[n, width])?;
        let bv = cfg
            .irreps
            .iter()
            .enumerate()
            .map(|(l, &m)| Ok(Some(tape.constant(blocks[l].clone(), &[n, 2 * l + 1, m])?)))
            .collect::<Result<Vec<_>>>()?;

        let start = Instant::now();
        std::hint::black_box(invariant_layer(&tape, &params, "inv0", hv, &edges, None)?);
        inv.push(start.elapsed().as_secs_f64());

        let start = Instant::now();
        std::hint::black_box(equivariant_layer(
            &tape,
            CgTable::shared(),
            &params,
            &format!("eqv{plan}"),
            &plans[plan],
            &bv,
            &edges,
        )?);
        eqv.push(start.elapsed().as_secs_f64());
    }
    Ok(LayerTiming {
        invariant: median(inv),
        equivariant: median(eqv),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub width: usize,
    pub n_params: usize,
    /// Training samples per second.
    pub throughput: f64,
    /// Mean validation loss of the averaged weights after the epoch budget.
    pub val_loss: f64,
    /// Validation force MAE (meV/Å) of the averaged weights.
    pub val_force_mae: f64,
}

/// Trains `model` for the configured budget and reports the held-out loss
/// and force error of the averaged weights.
pub fn train_and_validate(
    model: &mut Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    fit_reference_energies(model, train_set)?;
    let out = train(model, train_set, val_set, cfg, |_, _| Ok(()))?;
    let averaged = Model::from_parts(model.config.clone(), out.ema)?;
    let losses = val_set
        .par_iter()
        .map(|s| loss_value(&averaged, s, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    let val_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok((val_loss, evaluate_errors(&averaged, val_set)?.mae().1))
}

/// Every configured variant at every configured width.
pub fn run_bench(
    bench: &BenchSection,
    train_cfg: &TrainConfig,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for name in &bench.variants {
        let variant = Variant::parse(name)?;
        for &width in &bench.sizes {
            let mut model = Model::new(variant.config(width), bench.seed)?;
            let n_params = model.num_parameters();
            fit_reference_energies(&mut model, train_set)?;
            let throughput =
                training_throughput(&model, train_set, train_cfg, bench.batch_size, bench.warmup, bench.iterations)?;
            let mut cfg = train_cfg.clone();
            cfg.optimizer.epochs = bench.epochs.max(1);
            cfg.seed = bench.seed;
            let (val_loss, val_force_mae) = train_and_validate(&mut model, train_set, val_set, &cfg)?;
            rows.push(BenchRow {
                variant,
                width,
                n_params,
                throughput,
                val_loss,
                val_force_mae,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = "variant,n_params,throughput,val_loss\n".to_string();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.variant.name(), r.n_params, r.throughput, r.val_loss);
    }
    out
}
