use std::path::Path;

use anyhow::{anyhow, Context, Result};
use hienet_core::bench::{bench_csv, coupling_op_count, layer_timing, run_bench, Variant};
use hienet_core::crystal::{prototypes, CrystalStructure, Vec3};
use hienet_core::io::{atomic_write, read_extxyz, tables, write_extxyz, Checkpoint, RunConfig, XyzFrame};
use hienet_core::potential::Model;
use hienet_core::simulate::{
    elastic_tensor, langevin_thermostat, relax, velocity_verlet_nve, ForceConstants, MdState, RelaxOptions,
    Thermostat,
};
use hienet_core::training::{evaluate_errors, fit_reference_energies, generate_dataset, split_dataset, train, LabeledSample};
use hienet_core::Error;

use crate::potential::{self, config_error, reals};
use crate::{BenchArgs, Command, ElasticArgs, EvaluateArgs, GenDataArgs, MdArgs, PhononArgs, PredictArgs, RelaxArgs, TrainArgs};

/// Relaxation stopped before reaching the force tolerance.
#[derive(Debug)]
struct Unconverged(usize);

impl std::fmt::Display for Unconverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "relaxation did not converge after {} steps (result written)", self.0)
    }
}

impl std::error::Error for Unconverged {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Unconverged>().is_some() {
        return 5;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::NonFiniteLoss) => 3,
        Some(Error::Mismatch(_) | Error::UnknownElement(_)) => 4,
        Some(_) => 2,
        None => 1,
    }
}

/// Applies `HIENET_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("HIENET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("HIENET_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Md(a) => cmd_md(a),
        Command::Relax(a) => cmd_relax(a),
        Command::Phonon(a) => cmd_phonon(a),
        Command::Elastic(a) => cmd_elastic(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Config => {
            print!("{}", RunConfig::documented_defaults());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn read_frames(path: &Path) -> Result<Vec<XyzFrame>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let frames = read_extxyz(&text).with_context(|| format!("parsing {}", path.display()))?;
    if frames.is_empty() {
        return Err(Error::Format(format!("{} contains no structures", path.display())).into());
    }
    Ok(frames)
}

fn read_structure(path: &Path) -> Result<CrystalStructure> {
    Ok(read_frames(path)?.swap_remove(0).structure)
}

fn labeled(frames: &[XyzFrame]) -> Result<Vec<LabeledSample>> {
    Ok(frames.iter().map(XyzFrame::to_sample).collect::<hienet_core::Result<_>>()?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Vec<LabeledSample>> {
    match &cfg.data.path {
        Some(p) => labeled(&read_frames(p)?),
        None => Ok(generate_dataset(cfg.data.seed, &cfg.data.to_dataset_config())?),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let (train_set, val_set) = split_dataset(dataset(&cfg)?);
    std::fs::create_dir_all(&a.out_dir)?;
    let metrics = a.out_dir.join("metrics.csv");
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    fit_reference_energies(&mut model, &train_set)?;
    println!(
        "training {} parameters on {} samples ({} held out)",
        model.num_parameters(),
        train_set.len(),
        val_set.len()
    );
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train.to_train_config(), |log, _| {
        let v = log.last().expect("validation row");
        println!(
            "epoch {:>4}  val E {:.3} meV/atom  F {:.3} meV/Å  σ {:.4} kBar  lr {:.3e}",
            v.epoch, v.mae_energy, v.mae_force, v.mae_stress, v.lr
        );
        atomic_write(&metrics, tables::metrics_csv(log).as_bytes())
    })?;
    let ckpt = a.out_dir.join("model.ckpt");
    Checkpoint::new(&model, &outcome.ema).save(&ckpt)?;
    println!("wrote {} and {}", ckpt.display(), metrics.display());
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.n_samples {
        cfg.data.n_samples = n;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let samples = generate_dataset(cfg.data.seed, &cfg.data.to_dataset_config())?;
    let frames: Vec<XyzFrame> = samples.iter().map(XyzFrame::from).collect();
    write_text(&a.out, &write_extxyz(&frames)?)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let frames = read_frames(&a.data)?;
    let samples = labeled(&frames)?;
    let pot = potential::load(&a.potential, &samples[0].structure)?;
    let (e, f, s) = evaluate_errors(pot.as_ref(), &samples)?.mae();
    println!("samples {}", samples.len());
    println!("mae_energy_meV_per_atom {e}");
    println!("mae_force_meV_per_A {f}");
    println!("mae_stress_kBar {s}");
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let frames = read_frames(&a.structure)?;
    let pot = potential::load(&a.potential, &frames[0].structure)?;
    let mut annotated = Vec::with_capacity(frames.len());
    for (k, frame) in frames.into_iter().enumerate() {
        let p = pot.predict(&frame.structure)?;
        let s = p.stress_kbar();
        println!("frame {k}");
        println!("energy_eV {}", p.energy);
        println!(
            "stress_kBar xx={} yy={} zz={} yz={} xz={} xy={}",
            s[(0, 0)],
            s[(1, 1)],
            s[(2, 2)],
            s[(1, 2)],
            s[(0, 2)],
            s[(0, 1)]
        );
        for (i, f) in p.forces.iter().enumerate() {
            println!("force_eV_per_A {i} {} {} {}", f.x, f.y, f.z);
        }
        annotated.push(XyzFrame {
            energy: Some(p.energy),
            forces: Some(p.forces),
            stress: Some(p.stress),
            ..frame
        });
    }
    if let Some(out) = a.out {
        write_text(&out, &write_extxyz(&annotated)?)?;
    }
    Ok(())
}

fn cmd_md(a: MdArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let md = &cfg.md;
    let (steps, dt) = (a.steps.unwrap_or(md.steps), a.dt.unwrap_or(md.dt));
    let temperature = a.temperature.unwrap_or(md.temperature);
    let friction = a.friction.unwrap_or(md.friction);
    let seed = a.seed.unwrap_or(md.seed);
    let structure = read_structure(&a.common.structure)?;
    let pot = potential::load(&a.common.potential, &structure)?;
    let mut state = MdState::new(structure, pot.as_ref())?;
    if temperature > 0.0 {
        state.randomize_velocities(temperature, seed);
    }
    let mut frames = Vec::with_capacity(steps / md.interval + 1);
    let mut step = 0;
    let observer = |s: &MdState| -> hienet_core::Result<()> {
        step += 1;
        if step % md.interval == 0 {
            frames.push(
                XyzFrame {
                    energy: Some(s.potential_energy),
                    forces: Some(s.forces.clone()),
                    ..XyzFrame::new(s.structure.clone())
                }
                .with_info("step", step)
                .with_info("time_fs", s.time),
            );
        }
        Ok(())
    };
    let log = if friction > 0.0 {
        let bath = Thermostat {
            temperature,
            friction,
            seed,
        };
        langevin_thermostat(&mut state, pot.as_ref(), dt, steps, bath, observer)?
    } else {
        velocity_verlet_nve(&mut state, pot.as_ref(), dt, steps, observer)?
    };
    std::fs::create_dir_all(&a.out_dir)?;
    write_text(&a.out_dir.join("trajectory.xyz"), &write_extxyz(&frames)?)?;
    write_text(&a.out_dir.join("energy.csv"), &tables::energy_csv(&log))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "steps {}  E_total {} -> {} eV  T {:.2} K  frames {}",
            log.len(),
            first.total,
            last.total,
            last.temperature,
            frames.len()
        );
    }
    Ok(())
}

fn cmd_relax(a: RelaxArgs) -> Result<()> {
    let structure = read_structure(&a.common.structure)?;
    let pot = potential::load(&a.common.potential, &structure)?;
    let options = RelaxOptions {
        force_tolerance: a.fmax,
        max_steps: a.max_steps,
        relax_cell: a.cell,
    };
    let r = relax(&structure, pot.as_ref(), &options)?;
    let frame = XyzFrame {
        energy: Some(r.prediction.energy),
        forces: Some(r.prediction.forces.clone()),
        stress: Some(r.prediction.stress),
        ..XyzFrame::new(r.structure.clone())
    }
    .with_info("converged", if r.converged { "T" } else { "F" })
    .with_info("steps", r.steps);
    write_text(&a.out, &write_extxyz(&[frame])?)?;
    println!(
        "steps {}  energy {} eV  max force {:.3e} eV/Å  converged {}",
        r.steps,
        r.prediction.energy,
        r.prediction.max_force(),
        r.converged
    );
    if !r.converged {
        return Err(Unconverged(r.steps).into());
    }
    Ok(())
}

fn cmd_phonon(a: PhononArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let supercell = match &a.supercell {
        Some(s) => {
            let v = reals(s, 3, "supercell")?;
            if v.iter().any(|&x| x < 1.0 || x.fract() != 0.0) {
                return Err(config_error(anyhow!("supercell repeats must be positive integers")));
            }
            [v[0] as usize, v[1] as usize, v[2] as usize]
        }
        None => cfg.phonon.supercell,
    };
    let displacement = a.displacement.unwrap_or(cfg.phonon.displacement);
    let q_points = a
        .q
        .iter()
        .map(|q| reals(q, 3, "q").map(|v| Vec3::new(v[0], v[1], v[2])))
        .collect::<Result<Vec<_>>>()?;
    let structure = read_structure(&a.common.structure)?;
    let pot = potential::load(&a.common.potential, &structure)?;
    let fc = ForceConstants::compute(&structure, pot.as_ref(), supercell, displacement)?;
    let freqs = q_points.iter().map(|&q| fc.frequencies(q)).collect::<hienet_core::Result<Vec<_>>>()?;
    for (q, w) in q_points.iter().zip(&freqs) {
        let list: Vec<String> = w.iter().map(|x| format!("{x:.6}")).collect();
        println!("q {},{},{}  THz {}", q.x, q.y, q.z, list.join(" "));
    }
    if let Some(out) = a.out {
        write_text(&out, &tables::phonon_csv(&q_points, &freqs))?;
    }
    Ok(())
}

fn cmd_elastic(a: ElasticArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let structure = read_structure(&a.common.structure)?;
    let pot = potential::load(&a.common.potential, &structure)?;
    let r = elastic_tensor(&structure, pot.as_ref(), &cfg.elastic.to_options())?;
    println!("C (GPa), Voigt order xx yy zz yz xz xy");
    for i in 0..6 {
        let row: Vec<String> = (0..6).map(|j| format!("{:>10.4}", r.stiffness[(i, j)])).collect();
        println!("{}", row.join(" "));
    }
    println!("K_voigt {} GPa\nK_reuss {} GPa\nK_vrh {} GPa", r.k_voigt, r.k_reuss, r.k_vrh);
    if let Some(out) = a.out {
        write_text(&out, &tables::elastic_csv(&r))?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut data = cfg.data.to_dataset_config();
    data.n_samples = cfg.bench.n_samples;
    let (train_set, val_set) = split_dataset(generate_dataset(cfg.bench.seed, &data)?);
    let probe = prototypes::fcc(18, 5.3).make_supercell([2, 2, 2])?;
    for &width in &cfg.bench.sizes {
        let t = layer_timing(width, &probe, cfg.bench.iterations, cfg.bench.seed)?;
        println!(
            "width {width}: invariant layer {:.3e} s, equivariant layer {:.3e} s, ratio {:.2}",
            t.invariant,
            t.equivariant,
            t.speedup()
        );
    }
    let inv = Model::new(Variant::InvNet.config(cfg.bench.sizes[0]), 0)?;
    println!("InvNet tensor-product operations: {}", coupling_op_count(&inv, &probe)?);
    let rows = run_bench(&cfg.bench, &cfg.train.to_train_config(), &train_set, &val_set)?;
    for r in &rows {
        println!(
            "{:<7} width {:>4}  params {:>8}  {:>8.2} samples/s  val loss {:.4e}  val F {:.3} meV/Å",
            r.variant.name(),
            r.width,
            r.n_params,
            r.throughput,
            r.val_loss,
            r.val_force_mae
        );
    }
    write_text(&a.out, &bench_csv(&rows))?;
    Ok(())
}
