//! Property tests for allocation, factorization, mask and model-file invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ara::allocator::{rescale_to_target, Allocation, TrainedLayer};
use ara::baselines::{tanh_mask, uniform_allocate};
use ara::factorization::whiten_and_decompose;
use ara::guidance::{capacity_preserved, guidance_loss, Mode};
use ara::mask::{kept_rank, MaskParams};
use ara::zoo::io::{decode, encode};
use ara::zoo::{LinearWeights, Model};
use ara::Matrix;

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..96, 1usize..96)
}

fn trained_layer() -> impl Strategy<Value = TrainedLayer> {
    (shape(), 0.05f64..1.4).prop_map(|((m, n), ratio)| TrainedLayer {
        name: format!("l{m}x{n}"),
        m,
        n,
        ratio,
        mode: Mode::for_ratio(ratio),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rescale_stays_within_budget_and_keeps_dense_layers(
        layers in prop::collection::vec(trained_layer(), 1..8),
        target in 0.05f64..1.0,
    ) {
        match rescale_to_target(&layers, target, true) {
            Ok(r) => {
                let c_t: usize = layers.iter().map(|l| l.m * l.n).sum();
                let stored: usize = r.allocation.iter().zip(&layers).map(|(a, l)| a.params(l.m, l.n)).sum();
                prop_assert!(stored as f64 <= target * c_t as f64 * (1.0 + 1e-12));
                for (a, l) in r.allocation.iter().zip(&layers) {
                    if l.mode == Mode::Dense {
                        prop_assert_eq!(*a, Allocation::Dense);
                    }
                    if let Allocation::LowRank(k) = a {
                        prop_assert!(*k >= 1 && *k <= l.m.min(l.n));
                    }
                }
            }
            Err(e) => {
                // only when dense layers plus rank 1 elsewhere exceed the budget
                let c_t: usize = layers.iter().map(|l| l.m * l.n).sum();
                let floor: usize = layers
                    .iter()
                    .map(|l| if l.mode == Mode::Dense { l.m * l.n } else { l.m + l.n })
                    .sum();
                prop_assert!(floor as f64 > target * c_t as f64, "{}", e);
            }
        }
    }

    #[test]
    fn rescale_without_switch_never_adds_dense_layers(
        layers in prop::collection::vec(trained_layer(), 1..8),
        target in 0.05f64..1.0,
    ) {
        let low: Vec<TrainedLayer> = layers.into_iter().map(|l| TrainedLayer { mode: Mode::LowRank, ..l }).collect();
        if let Ok(r) = rescale_to_target(&low, target, false) {
            prop_assert!(r.allocation.iter().all(|a| matches!(a, Allocation::LowRank(_))));
        }
    }

    #[test]
    fn uniform_ranks_follow_the_closed_form(
        shapes in prop::collection::vec(shape(), 1..10),
        target in 0.01f64..=1.0,
    ) {
        let a = uniform_allocate(&shapes, target).unwrap();
        for (i, (&(m, n), &r)) in shapes.iter().zip(&a.ranks).enumerate() {
            let exact = ((target * (m * n) as f64) / (m + n) as f64).floor() as usize;
            prop_assert_eq!(r, exact.clamp(1, m.min(n)));
            prop_assert_eq!(a.clamped.contains(&i), exact == 0);
        }
    }

    #[test]
    fn kept_rank_never_exceeds_the_ratio_budget(ratio in 0.0f64..1.0, (m, n) in shape()) {
        let k = kept_rank(ratio, m, n);
        prop_assert!(k <= m.min(n));
        prop_assert!((k * (m + n)) as f64 <= ratio * (m * n) as f64 + 1e-9);
    }

    #[test]
    fn truncation_loss_is_nonincreasing_and_capacity_monotone(
        seed in 0u64..1000,
        m in 2usize..24,
        n in 2usize..24,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::randn(m, n, 1.0, &mut rng);
        let x = Matrix::randn(n, n + 4, 1.0, &mut rng);
        let f = whiten_and_decompose(&w, &x).unwrap();
        let losses: Vec<f64> = (0..=f.rank_capacity()).map(|r| f.truncation_loss(r).unwrap()).collect();
        prop_assert!((losses[0] - f.total_norm()).abs() <= 1e-12 * f.total_norm());
        prop_assert!(losses.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(*losses.last().unwrap() <= 1e-12 * f.total_norm());
        let caps: Vec<f64> = (0..=20).map(|i| capacity_preserved(&f, i as f64 / 20.0).value).collect();
        prop_assert!(caps.windows(2).all(|p| p[1] >= p[0]));
        prop_assert!(caps.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn guidance_loss_is_zero_iff_compression_pays(cap in 0.0f64..1.0, ratio in 0.0f64..1.5) {
        let l = guidance_loss(cap, ratio, true);
        prop_assert!(l >= 0.0);
        if cap > ratio {
            prop_assert_eq!(l, 0.0);
        } else {
            prop_assert_eq!(l, (1.0 - ratio).max(0.0));
        }
    }

    #[test]
    fn mask_ratio_is_bounded_by_max_ratio(
        theta in prop::collection::vec(-6.0f64..6.0, 1..30),
        (m, n) in (8usize..64, 8usize..64),
    ) {
        if let Ok((mut mp, _)) = MaskParams::new(theta.len(), m, n) {
            mp.theta = theta[..mp.theta.len()].to_vec();
            let r = mp.ratio();
            prop_assert!(r > 0.0 && r <= mp.max_ratio() + 1e-12);
            prop_assert!(mp.kept_rank() <= m.min(n));
        }
    }

    #[test]
    fn tanh_mask_is_nonincreasing_in_index(k in -5.0f64..40.0, beta in 0.01f64..10.0, len in 1usize..40) {
        let v = tanh_mask(k, beta, len);
        prop_assert!(v.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn model_file_roundtrip_is_bit_identical(
        seed in 0u64..500,
        width in 1usize..10,
        depth in 1usize..3,
        ranks in prop::collection::vec(0usize..4, 6),
    ) {
        let mut model = Model::build(width, depth, 7, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (layer, &r) in model.layers.iter_mut().zip(&ranks) {
            if r > 0 {
                let (out_dim, in_dim) = (layer.out_dim, layer.in_dim);
                layer.weights = LinearWeights::LowRank {
                    wu: Matrix::randn(out_dim, r, 1.0, &mut rng),
                    wv: Matrix::randn(r, in_dim, 1.0, &mut rng),
                };
            }
        }
        let bytes = encode(&model);
        let back = decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(encode(&back), bytes);
    }
}
