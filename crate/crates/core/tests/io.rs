use hienet_core::crystal::{random_structure, Mat3, Vec3};
use hienet_core::io::{read_extxyz, write_extxyz, Checkpoint, RunConfig, XyzFrame};
use hienet_core::potential::{Model, ModelConfig};
use hienet_core::training::LennardJones;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn extxyz_round_trips_labeled_frames(seed in 0u64..1_000_000, n in 1usize..6, frames in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lj = LennardJones::argon_krypton(5.0);
        let originals: Vec<XyzFrame> = (0..frames)
            .map(|k| {
                let s = random_structure(&mut rng, n, &[18, 36], 30.0, 2.5);
                let mut f = XyzFrame::from(&lj.label(&s).unwrap()).with_info("step", k);
                if k % 2 == 1 {
                    f.forces = None;
                    f.stress = None;
                }
                f
            })
            .collect();
        let text = write_extxyz(&originals).unwrap();
        let back = read_extxyz(&text).unwrap();
        prop_assert_eq!(back.len(), originals.len());
        for (a, b) in originals.iter().zip(&back) {
            prop_assert_eq!(&a.structure.atomic_numbers, &b.structure.atomic_numbers);
            for (p, q) in a.structure.positions.iter().zip(&b.structure.positions) {
                prop_assert!((p - q).amax() < 1e-12);
            }
            prop_assert!((a.structure.lattice - b.structure.lattice).amax() < 1e-12);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical(seed in 0u64..1_000_000, width in 2usize..6, layers in 0usize..3) {
        let config = ModelConfig {
            hidden_dim: width,
            irreps: vec![width, 2, 1],
            num_equivariant_layers: layers,
            num_invariant_layers: 1,
            ..ModelConfig::desk()
        };
        let model = Model::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ema = model.params.clone();
        for (_, a) in ema.iter_mut() {
            for v in &mut a.data {
                *v = f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (0x3ff << 52));
            }
        }
        let c = Checkpoint::new(&model, &ema);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn checkpoint_files_load_as_averaged_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let config = ModelConfig {
        hidden_dim: 4,
        irreps: vec![4, 2],
        num_equivariant_layers: 1,
        ..ModelConfig::desk()
    };
    let model = Model::new(config.clone(), 1).unwrap();
    let ema = Model::new(config, 2).unwrap().params;
    Checkpoint::new(&model, &ema).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.model().unwrap().params, ema);
    assert_eq!(loaded.params, model.params);
}

#[test]
fn extxyz_text_layout() {
    let s = hienet_core::crystal::CrystalStructure::new(
        vec![18],
        vec![Vec3::new(0.5, 0.0, 0.0)],
        Mat3::identity() * 4.0,
    )
    .unwrap();
    let mut f = XyzFrame::new(s);
    f.energy = Some(-0.25);
    let text = write_extxyz(&[f]).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "1");
    assert!(lines[1].starts_with("Lattice=\"4.0000000000000000e0 0.0000000000000000e0"));
    assert!(lines[1].contains("Properties=species:S:1:pos:R:3 energy=-2.5000000000000000e-1"));
    assert_eq!(lines[2], "Ar 5.0000000000000000e-1 0.0000000000000000e0 0.0000000000000000e0");
}

#[test]
fn config_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[train]\nepochs = 3\nseed = 9\n").unwrap();
    let c = RunConfig::load(&path).unwrap();
    assert_eq!((c.train.epochs, c.train.seed), (3, 9));
    assert!(RunConfig::load(&dir.path().join("missing.toml")).is_err());
}
