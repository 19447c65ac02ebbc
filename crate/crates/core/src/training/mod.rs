//! Loss, optimizer, learning-rate schedule, parameter averaging and the
//! training loop, plus the analytic reference potential that labels the data.

pub mod dataset;
pub mod oracle;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use hienet_autograd::{Tape, Var};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crystal::{CrystalStructure, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::featurize::NUM_ELEMENTS;
use crate::potential::{
    Dropout, Evaluation, Model, ModelParameters, Potential, ELEMENT_MASK, ELEMENT_SHIFT, ENERGY_SCALE,
    EV_PER_A3_TO_KBAR,
};

pub use dataset::{generate_dataset, split_dataset, DatasetConfig, Prototype};
pub use oracle::{lj_oracle, LennardJones};

/// Loss above which training is aborted.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// A structure with reference energy (eV), forces (eV/Å) and stress (eV/Å³).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub structure: CrystalStructure,
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub stress: Mat3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub energy_weight: f64,
    pub force_weight: f64,
    pub stress_weight: f64,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            energy_weight: 1.0,
            force_weight: 1.0,
            stress_weight: 0.01,
            huber_delta: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.energy_weight, self.force_weight, self.stress_weight];
        if w.iter().any(|&x| !(x >= 0.0)) || !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub warmup_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_lr: 0.01,
            min_lr: 5e-6,
            warmup_epochs: 0.1,
            warmup_factor: 0.2,
            weight_decay: 0.001,
            batch_size: 8,
            epochs: 200,
            ema_decay: 0.999,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_lr > 0.0
            && self.min_lr <= self.max_lr
            && self.ema_decay > 0.0
            && self.ema_decay < 1.0
            && self.warmup_epochs >= 0.0
            && (0.0..=1.0).contains(&self.warmup_factor)
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Quadratic below `delta`, linear above.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn check_finite(tape: &Tape, vars: &[Var]) -> Result<()> {
    if vars.iter().all(|&v| tape.value(v).iter().all(|x| x.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss)
    }
}

/// Weighted Huber loss on per-atom energy, force components and stress
/// components (in kBar). Terms with zero weight are left off the tape.
pub fn total_loss(tape: &Tape, eval: &Evaluation, sample: &LabeledSample, cfg: &LossConfig) -> Result<Var> {
    check_finite(tape, &[eval.energy, eval.forces, eval.stress])?;
    let n = sample.structure.len();
    if sample.forces.len() != n || tape.shape(eval.forces) != [n, 3] {
        return Err(Error::Mismatch(format!("{n} atoms but {} reference forces", sample.forces.len())));
    }
    let delta = cfg.huber_delta;
    let mut loss = tape.scalar(0.0);
    if cfg.energy_weight > 0.0 {
        let e = tape.offset(tape.scale(eval.energy, 1.0 / n as f64), -sample.energy / n as f64);
        let term = tape.sum(tape.huber(e, delta)?);
        loss = tape.add(loss, tape.scale(term, cfg.energy_weight))?;
    }
    if cfg.force_weight > 0.0 {
        let reference: Vec<f64> = sample.forces.iter().flat_map(|f| [f.x, f.y, f.z]).collect();
        let r = tape.sub(eval.forces, tape.constant(reference, &[n, 3])?)?;
        let term = tape.mean(tape.huber(r, delta)?);
        loss = tape.add(loss, tape.scale(term, cfg.force_weight))?;
    }
    if cfg.stress_weight > 0.0 {
        let reference: Vec<f64> = sample.stress.transpose().as_slice().to_vec();
        let r = tape.sub(eval.stress, tape.constant(reference, &[3, 3])?)?;
        let term = tape.mean(tape.huber(tape.scale(r, EV_PER_A3_TO_KBAR), delta)?);
        loss = tape.add(loss, tape.scale(term, cfg.stress_weight))?;
    }
    check_finite(tape, &[loss])?;
    Ok(loss)
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every parameter that has a gradient.
    pub fn apply(&mut self, params: &mut ModelParameters, grads: &Gradients, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                p.data[i] -= lr * weight_decay * p.data[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// One AdamW update.
pub fn adamw_step(params: &mut ModelParameters, grads: &Gradients, state: &mut AdamW, lr: f64, weight_decay: f64) {
    state.apply(params, grads, lr, weight_decay);
}

/// Linear warmup from `warmup_factor·max_lr` to `max_lr` over the first
/// `warmup_epochs`, then cosine decay reaching `min_lr` at `total_steps`.
pub fn cosine_schedule(step: usize, total_steps: usize, cfg: &OptimizerConfig) -> f64 {
    let total = total_steps as f64;
    let step = (step as f64).min(total);
    let warmup = (cfg.warmup_epochs / cfg.epochs as f64 * total).min(total);
    if warmup > 0.0 && step <= warmup {
        let frac = step / warmup;
        return cfg.max_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac);
    }
    let span = total - warmup;
    let progress = if span > 0.0 { (step - warmup) / span } else { 1.0 };
    cfg.min_lr + (cfg.max_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// `ema ← decay·ema + (1 − decay)·params`, for trainable parameters.
pub fn ema_update(ema: &mut ModelParameters, params: &ModelParameters, decay: f64) {
    for (name, p) in params.iter() {
        if !ModelParameters::is_trainable(name) {
            continue;
        }
        if let Some(e) = ema.get_mut(name) {
            for (e, &x) in e.data.iter_mut().zip(&p.data) {
                *e = decay * *e + (1.0 - decay) * x;
            }
        }
    }
}

/// Sets the energy scale to the RMS reference force component and the
/// per-element shifts to least-squares reference energies.
pub fn fit_reference_energies(model: &mut Model, samples: &[LabeledSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot fit references to an empty dataset".into()));
    }
    let (sum_sq, count) = samples
        .iter()
        .flat_map(|s| s.forces.iter())
        .fold((0.0, 0usize), |(a, c), f| (a + f.norm_squared(), c + 3));
    let scale = if count > 0 { (sum_sq / count as f64).sqrt() } else { 1.0 };

    let mut elements: Vec<u32> = samples
        .iter()
        .flat_map(|s| s.structure.atomic_numbers.iter().copied())
        .collect();
    elements.sort_unstable();
    elements.dedup();
    let counts = DMatrix::from_fn(samples.len(), elements.len(), |i, k| {
        samples[i].structure.atomic_numbers.iter().filter(|&&z| z == elements[k]).count() as f64
    });
    let energies = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.energy));
    let shifts = counts
        .svd(true, true)
        .solve(&energies, 1e-12)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let params = &mut model.params;
    params.get_mut(ENERGY_SCALE).expect("energy scale").data[0] = if scale > 0.0 { scale } else { 1.0 };
    let shift = &mut params.get_mut(ELEMENT_SHIFT).expect("element shift").data;
    shift.iter_mut().for_each(|x| *x = 0.0);
    for (k, &z) in elements.iter().enumerate() {
        shift[z as usize - 1] = shifts[k];
    }
    let mask = &mut params.get_mut(ELEMENT_MASK).expect("element mask").data;
    mask.iter_mut().for_each(|x| *x = 0.0);
    for &z in &elements {
        mask[z as usize - 1] = 1.0;
    }
    debug_assert_eq!(mask.len(), NUM_ELEMENTS);
    Ok(())
}

/// Absolute errors of one prediction, in eV/atom, eV/Å and kBar.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub energy: f64,
    pub force: f64,
    pub force_count: usize,
    pub stress: f64,
    pub samples: usize,
}

impl ErrorSums {
    pub fn of(energy: f64, forces: &[f64], stress: &[f64], sample: &LabeledSample) -> Self {
        let n = sample.structure.len();
        let force: f64 = sample
            .forces
            .iter()
            .flat_map(|f| [f.x, f.y, f.z])
            .zip(forces)
            .map(|(r, p)| (p - r).abs())
            .sum();
        let reference = sample.stress.transpose();
        let stress: f64 = reference
            .as_slice()
            .iter()
            .zip(stress)
            .map(|(r, p)| (p - r).abs() * EV_PER_A3_TO_KBAR)
            .sum::<f64>()
            / 9.0;
        Self {
            energy: (energy - sample.energy).abs() / n as f64,
            force,
            force_count: 3 * n,
            stress,
            samples: 1,
        }
    }

    pub fn merge(mut self, o: Self) -> Self {
        self.energy += o.energy;
        self.force += o.force;
        self.force_count += o.force_count;
        self.stress += o.stress;
        self.samples += o.samples;
        self
    }

    /// Mean absolute errors in meV/atom, meV/Å and kBar.
    pub fn mae(&self) -> (f64, f64, f64) {
        let s = self.samples.max(1) as f64;
        (
            1e3 * self.energy / s,
            1e3 * self.force / self.force_count.max(1) as f64,
            self.stress / s,
        )
    }
}

fn trainable_names(model: &Model) -> Vec<String> {
    model
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| ModelParameters::is_trainable(n))
        .collect()
}

/// Loss of one sample and its gradient with respect to every trainable
/// parameter. Forces enter the loss as tape gradients, so this
/// differentiates twice. `dropout_seed` enables training-time dropout.
pub fn loss_and_gradients(
    model: &Model,
    sample: &LabeledSample,
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients, ErrorSums)> {
    let tape = Tape::new();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut dropout = rng.as_mut().map(|rng| Dropout {
        rng,
        rate: model.config.dropout,
        attention_rate: model.config.attention_dropout,
    });
    let eval = model.evaluate(&tape, &sample.structure, true, dropout.as_mut())?;
    let loss = total_loss(&tape, &eval, sample, cfg)?;
    let names = trainable_names(model);
    let wrt: Vec<Var> = names.iter().map(|n| eval.params[n]).collect();
    let grads = tape.backward(loss, &wrt)?;
    let errors = ErrorSums::of(tape.item(eval.energy), &tape.value(eval.forces), &tape.value(eval.stress), sample);
    let grads = names.into_iter().zip(grads).map(|(n, g)| (n, tape.to_vec(g))).collect();
    Ok((tape.item(loss), grads, errors))
}

/// Loss of one sample without dropout.
pub fn loss_value(model: &Model, sample: &LabeledSample, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let eval = model.evaluate(&tape, &sample.structure, false, None)?;
    Ok(tape.item(total_loss(&tape, &eval, sample, cfg)?))
}

/// Summed prediction errors over a set of samples.
pub fn evaluate_errors(potential: &dyn Potential, samples: &[LabeledSample]) -> Result<ErrorSums> {
    let parts: Vec<ErrorSums> = samples
        .par_iter()
        .map(|s| {
            let p = potential.predict(&s.structure)?;
            let f: Vec<f64> = p.forces.iter().flat_map(|f| [f.x, f.y, f.z]).collect();
            Ok(ErrorSums::of(p.energy, &f, p.stress.transpose().as_slice(), s))
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(ErrorSums::default(), ErrorSums::merge))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    /// meV/atom
    pub mae_energy: f64,
    /// meV/Å
    pub mae_force: f64,
    /// kBar
    pub mae_stress: f64,
    pub lr: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, split: Split, errors: &ErrorSums, lr: f64) -> Self {
        let (mae_energy, mae_force, mae_stress) = errors.mae();
        Self {
            epoch,
            split,
            mae_energy,
            mae_force,
            mae_stress,
            lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stops once the validation force MAE (meV/Å) of the averaged weights
    /// falls below this value.
    pub target_force_mae: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Exponential moving average of the parameters.
    pub ema: ModelParameters,
    pub log: Vec<EpochMetrics>,
    pub epochs_run: usize,
}

/// Mixes a base seed with two stream indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch AdamW training with a cosine schedule.
///
/// Epoch 0 of the log holds the metrics at initialization. For later epochs,
/// training-split errors are accumulated from the training passes themselves
/// and validation errors come from the averaged weights. `model` ends with
/// the raw final weights; the averaged ones are returned. `on_epoch` runs
/// after every epoch with the averaged weights.
pub fn train(
    model: &mut Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[EpochMetrics], &ModelParameters) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let opt = &cfg.optimizer;
    let steps_per_epoch = train_set.len().div_ceil(opt.batch_size);
    let total_steps = steps_per_epoch * opt.epochs;
    let mut adam = AdamW::new();
    let mut ema = model.params.clone();
    let mut log = Vec::new();

    let averaged = |params: &ModelParameters| Model {
        config: model.config.clone(),
        params: params.clone(),
    };
    let lr0 = cosine_schedule(0, total_steps, opt);
    let initial_train = evaluate_errors(&*model, train_set)?;
    let initial_val = evaluate_errors(&*model, val_set)?;
    log.push(EpochMetrics::new(0, Split::Train, &initial_train, lr0));
    log.push(EpochMetrics::new(0, Split::Validation, &initial_val, lr0));
    on_epoch(&log, &ema)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 1..=opt.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut rng);
        let mut errors = ErrorSums::default();
        let mut lr = lr0;
        for batch in order.chunks(opt.batch_size) {
            let current: &Model = model;
            let results: Vec<(f64, Gradients, ErrorSums)> = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, 2 + epoch as u64, i as u64);
                    loss_and_gradients(current, &train_set[i], &cfg.loss, Some(seed))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFiniteLoss => Error::Divergence { epoch, loss: f64::NAN },
                    e => e,
                })?;
            let inv = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grads = Gradients::new();
            for (l, g, e) in results {
                loss += l * inv;
                errors = errors.merge(e);
                for (name, g) in g {
                    let acc = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x * inv);
                }
            }
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { epoch, loss });
            }
            lr = cosine_schedule(step, total_steps, opt);
            adam.apply(&mut model.params, &grads, lr, opt.weight_decay);
            ema_update(&mut ema, &model.params, opt.ema_decay);
            step += 1;
        }
        epochs_run = epoch;
        let val = evaluate_errors(&averaged(&ema), val_set)?;
        log.push(EpochMetrics::new(epoch, Split::Train, &errors, lr));
        log.push(EpochMetrics::new(epoch, Split::Validation, &val, lr));
        on_epoch(&log, &ema)?;
        if let Some(target) = cfg.target_force_mae {
            if val.samples > 0 && val.mae().1 < target {
                break;
            }
        }
    }
    Ok(TrainOutcome { ema, log, epochs_run })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 0.01), 0.0);
        assert!((huber(0.005, 0.01) - 1.25e-5).abs() < 1e-20);
        assert!((huber(-0.02, 0.01) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = OptimizerConfig {
            epochs: 10,
            ..Default::default()
        };
        let total = 1000;
        assert_eq!(cosine_schedule(0, total, &cfg), 0.002);
        assert_eq!(cosine_schedule(10, total, &cfg), 0.01);
        assert_eq!(cosine_schedule(total, total, &cfg), 5e-6);
        let mid = cosine_schedule(505, total, &cfg);
        assert!((mid - (5e-6 + 0.5 * (0.01 - 5e-6))).abs() < 1e-15);
    }

    #[test]
    fn ema_closed_form() {
        let mut a = ModelParameters::default();
        a.insert("w", crate::potential::Array::zeros(vec![1]));
        let mut b = a.clone();
        b.get_mut("w").unwrap().data[0] = 1.0;
        ema_update(&mut a, &b, 0.999);
        assert!((a.get("w").unwrap().data[0] - 0.001).abs() < 1e-15);
        ema_update(&mut a, &b, 0.0);
        assert_eq!(a.get("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn adamw_decay_and_descent() {
        let mut p = ModelParameters::default();
        p.insert("w", crate::potential::Array { shape: vec![1], data: vec![1.0] });
        let zero: Gradients = [("w".to_string(), vec![0.0])].into();
        let mut state = AdamW::new();
        adamw_step(&mut p, &zero, &mut state, 0.01, 0.0);
        assert_eq!(p.get("w").unwrap().data[0], 1.0);
        adamw_step(&mut p, &zero, &mut state, 0.01, 0.001);
        assert!((p.get("w").unwrap().data[0] - (1.0 - 1e-5)).abs() < 1e-16);

        let mut q = ModelParameters::default();
        q.insert("w", crate::potential::Array { shape: vec![1], data: vec![1.0] });
        let grad: Gradients = [("w".to_string(), vec![1.0])].into();
        adamw_step(&mut q, &grad, &mut AdamW::new(), 0.01, 0.001);
        assert!(q.get("w").unwrap().data[0].abs() < 1.0);
    }
}
