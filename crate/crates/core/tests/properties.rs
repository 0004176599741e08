mod common;

use proptest::prelude::*;
use subliminal::nn::{load_checkpoint, save_checkpoint, ArchSpec, LayerId, ModelSpec, SplitHeadModel};
use subliminal::rng::Rng;
use subliminal::Tensor;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_is_associative(a in 1usize..7, b in 1usize..7, c in 1usize..7, d in 1usize..7, seed in any::<u64>()) {
        let (x, y, z) = (tensor(a, b, seed), tensor(b, c, seed ^ 1), tensor(c, d, seed ^ 2));
        let left = x.matmul(&y).unwrap().matmul(&z).unwrap();
        let right = x.matmul(&y.matmul(&z).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(a in 1usize..9, b in 1usize..9, c in 1usize..9, seed in any::<u64>()) {
        let (x, y) = (tensor(a, b, seed), tensor(b, c, seed ^ 5));
        let p = x.matmul(&y).unwrap();
        for i in 0..a {
            for j in 0..c {
                let want: f64 = (0..b).map(|k| x.get2(i, k) * y.get2(k, j)).sum();
                prop_assert!((p.get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        hidden in proptest::collection::vec(1usize..9, 1..4),
        n in 1usize..6,
        m in 1usize..6,
        frozen in any::<u8>(),
        seed in any::<u64>(),
    ) {
        let spec = ModelSpec { arch: ArchSpec::Mlp { hidden }, input_shape: [1, 3, 4], n_classes: n, aux_dim: m };
        let mut model = SplitHeadModel::init(&spec, |id| Rng::with_stream(seed, id.stream_index())).unwrap();
        for (i, id) in model.layer_ids().into_iter().enumerate() {
            model.set_trainable(id, frozen >> (i % 8) & 1 == 0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, "h").unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        for id in model.layer_ids() {
            let (w0, b0) = model.params(id).unwrap();
            let (w1, b1) = back.params(id).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(w0), bits(w1));
            prop_assert_eq!(bits(b0), bits(b1));
            prop_assert_eq!(model.is_trainable(id), back.is_trainable(id));
        }
        prop_assert!(back.is_trainable(LayerId::AuxHead) == model.is_trainable(LayerId::AuxHead));
    }

    #[test]
    fn uniform_init_stays_in_bounds(fan_in in 1usize..2000, seed in any::<u64>()) {
        let t = subliminal::rng::uniform_init(&mut Rng::new(seed), fan_in, &[64]).unwrap();
        let bound = 1.0 / (fan_in as f64).sqrt();
        prop_assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
