use hienet_autograd::Tape;
use hienet_core::crystal::{
    build_graph, prototypes, random_orthogonal, random_structure, CrystalStructure, Mat3, StrainTensor, Vec3,
};
use hienet_core::equivariant::{wigner_from_samples, CgTable};
use hienet_core::potential::{
    equivariant_layer, invariant_layer, EquivariantPlan, Model, ModelConfig, ParamVars, Potential,
    ELEMENT_MASK, ELEMENT_SHIFT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        irreps: vec![8, 4, 4, 2],
        num_equivariant_layers: 2,
        ..ModelConfig::desk()
    }
}

fn model(seed: u64) -> Model {
    let mut m = Model::new(small_config(), seed).unwrap();
    // non-trivial shifts so the readout path is exercised
    let shift = m.params.get_mut(ELEMENT_SHIFT).unwrap();
    shift.data[17] = -0.08;
    shift.data[35] = -0.11;
    m
}

fn structure(seed: u64, n: usize) -> CrystalStructure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_structure(&mut rng, n, &[18, 36], 30.0, 2.2)
}

fn energy(m: &Model, s: &CrystalStructure) -> f64 {
    m.predict(s).unwrap().energy
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_are_o3_equivariant(seed in 0u64..1_000_000, proper in any::<bool>()) {
        let m = model(seed % 7);
        let s = structure(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let r = random_orthogonal(&mut rng, proper);
        let b = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let p = m.predict(&s).unwrap();
        let q = m.predict(&s.transform(&r, &b).unwrap()).unwrap();
        prop_assert!((p.energy - q.energy).abs() < 1e-8);
        for (f, g) in p.forces.iter().zip(&q.forces) {
            prop_assert!((r * f - g).amax() < 1e-8);
        }
        prop_assert!((r * p.stress * r.transpose() - q.stress).amax() < 1e-8);
    }

    #[test]
    fn forces_sum_to_zero(seed in 0u64..1_000_000) {
        let p = model(seed % 5).predict(&structure(seed, 5)).unwrap();
        let total = p.forces.iter().fold(Vec3::zeros(), |a, f| a + f);
        prop_assert!(total.amax() < 1e-8);
    }

    #[test]
    fn permutation_relabels_forces(seed in 0u64..1_000_000) {
        let m = model(seed % 3);
        let s = structure(seed, 4);
        let perm = [2usize, 0, 3, 1];
        let mut t = s.clone();
        for (new, &old) in perm.iter().enumerate() {
            t.atomic_numbers[new] = s.atomic_numbers[old];
            t.positions[new] = s.positions[old];
        }
        let p = m.predict(&s).unwrap();
        let q = m.predict(&t).unwrap();
        prop_assert!((p.energy - q.energy).abs() < 1e-12 * p.energy.abs().max(1.0));
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((p.forces[old] - q.forces[new]).amax() < 1e-12);
        }
        prop_assert!((p.stress - q.stress).amax() < 1e-12);
    }
}

#[test]
fn forces_match_finite_differences() {
    let m = model(11);
    let s = structure(3, 4);
    let p = m.predict(&s).unwrap();
    let h = 1e-4;
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for i in 0..s.len() {
        for a in 0..3 {
            let mut plus = s.clone();
            plus.positions[i][a] += h;
            let mut minus = s.clone();
            minus.positions[i][a] -= h;
            let fd = -(energy(&m, &plus) - energy(&m, &minus)) / (2.0 * h);
            diff += (fd - p.forces[i][a]).powi(2);
            norm += fd * fd;
        }
    }
    let rel = (diff / norm).sqrt();
    assert!(rel < 1e-5, "relative error {rel}");
}

#[test]
fn stress_matches_strain_finite_differences() {
    let m = model(12);
    let s = structure(4, 4);
    let p = m.predict(&s).unwrap();
    let h = 1e-5;
    let v = s.volume();
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for i in 0..3 {
        for j in i..3 {
            let mut e = Mat3::zeros();
            e[(i, j)] = h;
            e[(j, i)] = h;
            let plus = s.apply_strain(&StrainTensor(e)).unwrap();
            let minus = s.apply_strain(&StrainTensor(-e)).unwrap();
            // a symmetric perturbation touches both (i, j) and (j, i)
            let weight = if i == j { 1.0 } else { 2.0 };
            let fd = (energy(&m, &plus) - energy(&m, &minus)) / (2.0 * h * weight) / v;
            diff += (fd - p.stress[(i, j)]).powi(2);
            norm += fd * fd;
        }
    }
    let rel = (diff / norm).sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn energy_is_continuous_across_cutoff() {
    let m = model(13);
    let cutoff = m.config.cutoff;
    let lattice = Mat3::identity() * 30.0;
    let at = |x: f64| {
        CrystalStructure::new(vec![18, 36], vec![Vec3::zeros(), Vec3::new(x, 0.0, 0.0)], lattice).unwrap()
    };
    let inside = m.predict(&at(cutoff - 5e-8)).unwrap();
    let outside = m.predict(&at(cutoff + 5e-8)).unwrap();
    assert!((inside.energy - outside.energy).abs() < 1e-6);
    for (f, g) in inside.forces.iter().zip(&outside.forces) {
        assert!((f - g).amax() < 1e-6);
    }
    assert_eq!(outside.forces[0], Vec3::zeros());
}

#[test]
fn energy_is_extensive_under_supercell() {
    let m = model(14);
    let s = structure(5, 3);
    let e1 = energy(&m, &s);
    let e8 = energy(&m, &s.make_supercell([2, 2, 2]).unwrap());
    assert!((e8 - 8.0 * e1).abs() < 1e-8 * e8.abs());
}

#[test]
fn zero_readout_leaves_reference_energies() {
    let mut m = model(15);
    m.params.get_mut("readout").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let s = structure(6, 4);
    let expected: f64 = s
        .atomic_numbers
        .iter()
        .map(|&z| m.params.get(ELEMENT_SHIFT).unwrap().data[z as usize - 1])
        .sum();
    assert!((energy(&m, &s) - expected).abs() < 1e-14);
}

#[test]
fn overlapping_atoms_are_rejected() {
    let m = model(16);
    let s = CrystalStructure::new(
        vec![18, 18],
        vec![Vec3::zeros(), Vec3::new(1e-8, 0.0, 0.0)],
        Mat3::identity() * 10.0,
    )
    .unwrap();
    assert!(m.predict(&s).unwrap_err().to_string().starts_with("atomic overlap"));
}

#[test]
fn unknown_elements_flagged_once_references_exist() {
    let mut m = model(17);
    let s = structure(7, 3);
    assert!(m.check_elements(&s).is_ok());
    m.params.get_mut(ELEMENT_MASK).unwrap().data[17] = 1.0;
    let has_kr = s.atomic_numbers.contains(&36);
    assert_eq!(m.check_elements(&s).is_err(), has_kr);
}

/// Evaluates one layer type directly on a small structure.
struct LayerHarness {
    tape: Tape,
    model: Model,
    params: ParamVars,
    edges: hienet_core::potential::EdgeContext,
    n: usize,
}

fn harness(model: Model, s: &CrystalStructure) -> LayerHarness {
    let tape = Tape::new();
    let params = model.record_params(&tape, false).unwrap();
    let graph = build_graph(s, model.config.cutoff).unwrap();
    let flat: Vec<f64> = s.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let pos = tape.constant(flat, &[s.len(), 3]).unwrap();
    let lat = tape.constant(s.lattice.transpose().as_slice().to_vec(), &[3, 3]).unwrap();
    let strain = tape.zeros(&[3, 3]);
    let edges = model.edge_context(&tape, &graph, pos, lat, strain).unwrap();
    LayerHarness {
        tape,
        model,
        params,
        edges,
        n: s.len(),
    }
}

#[test]
fn invariant_layer_gate_limits() {
    let mut m = model(20);
    let d = m.config.hidden_dim;
    // saturate the gate: φ ≡ 1 leaves exactly φ(h) = 1
    m.params.get_mut("inv0.gate.b2").unwrap().data.iter_mut().for_each(|v| *v = 1e3);
    let s = structure(8, 4);
    let hs = harness(m, &s);
    let t = &hs.tape;
    let h = t.constant((0..hs.n * d).map(|i| (i as f64 * 0.37).sin()).collect(), &[hs.n, d]).unwrap();
    let out = invariant_layer(t, &hs.params, "inv0", h, &hs.edges, None).unwrap();
    assert!(t.to_vec(out).iter().all(|&v| v == 1.0));

    // isolated atom: no messages, output is φ(h) = sigmoid(0) at initialization
    let m = model(21);
    let s = prototypes::cubic(18, 12.0);
    let hs = harness(m, &s);
    let t = &hs.tape;
    assert!(hs.edges.source.is_empty());
    let h = t.constant(vec![0.3; d], &[1, d]).unwrap();
    let out = invariant_layer(t, &hs.params, "inv0", h, &hs.edges, None).unwrap();
    assert!(t.to_vec(out).iter().all(|&v| v == 0.5));
}

fn layer_input(t: &Tape, n: usize, mults: &[usize], seed: u64) -> Vec<Option<hienet_autograd::Var>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mults
        .iter()
        .enumerate()
        .map(|(l, &m)| {
            let v = (0..n * (2 * l + 1) * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            Some(t.constant(v, &[n, 2 * l + 1, m]).unwrap())
        })
        .collect()
}

#[test]
fn equivariant_layer_parity_under_inversion() {
    let m = model(22);
    let mults = m.config.irreps.clone();
    let plan = EquivariantPlan::new(mults.clone(), mults.clone(), 3);
    let s = structure(9, 4);
    let inv = s.transform(&(-Mat3::identity()), &Vec3::zeros()).unwrap();
    let run = |st: &CrystalStructure, flip: bool| -> Vec<Vec<f64>> {
        let hs = harness(m.clone(), st);
        let t = &hs.tape;
        let mut input = layer_input(t, hs.n, &mults, 5);
        if flip {
            for (l, b) in input.iter_mut().enumerate() {
                if l % 2 == 1 {
                    *b = Some(t.neg(b.unwrap()));
                }
            }
        }
        let params = relabel(&hs, "mid", &plan);
        let out = equivariant_layer(t, CgTable::shared(), &params, "mid", &plan, &input, &hs.edges).unwrap();
        out.into_iter().map(|v| t.to_vec(v.unwrap())).collect()
    };
    let a = run(&s, false);
    let b = run(&inv, true);
    for l in 0..4 {
        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
        for (x, y) in a[l].iter().zip(&b[l]) {
            assert!((sign * x - y).abs() < 1e-10, "l={l}");
        }
    }
}

/// Fresh random parameters for `plan` under `prefix`, recorded on the harness tape.
fn relabel(hs: &LayerHarness, prefix: &str, plan: &EquivariantPlan) -> ParamVars {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut params = hs.params.clone();
    for (name, shape) in plan.parameter_shapes(prefix, hs.model.config.n_bessel, false) {
        let n: usize = shape.iter().product();
        let std = 1.0 / (shape[0] as f64).sqrt();
        let v = (0..n).map(|_| rng.random_range(-1.0..1.0) * std).collect();
        params.insert(name, hs.tape.constant(v, &shape).unwrap());
    }
    params
}

#[test]
fn equivariant_layer_rotates_vector_channels() {
    let m = model(23);
    let mults = m.config.irreps.clone();
    let plan = EquivariantPlan::new(vec![mults[0]], mults.clone(), 3);
    let s = CrystalStructure::new(
        vec![18, 18],
        vec![Vec3::zeros(), Vec3::new(1.1, 2.0, -0.7)],
        Mat3::identity() * 20.0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = random_orthogonal(&mut rng, true);
    let rotated = s.transform(&r, &Vec3::zeros()).unwrap();
    let d1 = wigner_from_samples(1, &r).unwrap();
    let run = |st: &CrystalStructure| -> Vec<f64> {
        let hs = harness(m.clone(), st);
        assert_eq!(hs.edges.source.len(), 2);
        let input = layer_input(&hs.tape, hs.n, &[mults[0]], 8);
        let params = relabel(&hs, "single", &plan);
        let out = equivariant_layer(&hs.tape, CgTable::shared(), &params, "single", &plan, &input, &hs.edges).unwrap();
        hs.tape.to_vec(out[1].unwrap())
    };
    let a = run(&s);
    let b = run(&rotated);
    let c = mults[1];
    assert!(a.iter().any(|v| v.abs() > 1e-6));
    for atom in 0..2 {
        for ch in 0..c {
            let v = nalgebra::DVector::from_fn(3, |m, _| a[(atom * 3 + m) * c + ch]);
            let w = &d1 * v;
            for mm in 0..3 {
                assert!((w[mm] - b[(atom * 3 + mm) * c + ch]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_path_weights_reduce_to_skip() {
    let m = model(24);
    let mults = m.config.irreps.clone();
    let plan = EquivariantPlan::new(mults.clone(), mults.clone(), 3);
    let s = structure(10, 3);
    let hs = harness(m, &s);
    let t = &hs.tape;
    let input = layer_input(t, hs.n, &mults, 9);
    let mut params = relabel(&hs, "z", &plan);
    let p = plan.tensor_product.num_paths();
    params.insert("z.path_weights".into(), t.zeros(&[p]));
    let out = equivariant_layer(t, CgTable::shared(), &params, "z", &plan, &input, &hs.edges).unwrap();
    // oracle: gate(W_skip f) computed by hand for the scalar block
    let skip0 = t.to_vec(params["z.skip.l0"]);
    let x0 = t.to_vec(input[0].unwrap());
    let pre = plan.pre_gate();
    let gated = pre[0] - mults[0];
    let out0 = t.to_vec(out[0].unwrap());
    for i in 0..hs.n {
        for c in 0..mults[0] {
            let col = gated + c;
            let z: f64 = (0..mults[0]).map(|k| x0[i * mults[0] + k] * skip0[k * pre[0] + col]).sum();
            let silu = z / (1.0 + (-z).exp());
            assert!((out0[i * mults[0] + c] - silu).abs() < 1e-12);
        }
    }
}
