use nest_core::datakit::{generate_synthetic, SeriesTensor, SyntheticSpec};
use nest_core::evalbench::attention_cost;
use nest_core::nestmodel::{cross_scale_layer, init_params, ModelConfig};
use nest_core::numcore::ops::{mac_count, reset_mac_count, scaled_dot_attention, scaled_dot_attention_with_weights};
use nest_core::numcore::{Graph, Tensor};
use nest_core::regionalize::{build_affinity, kmeans, normalized_laplacian, regionalize_pipeline, spectral_embed, ChunkMode, KMeansConfig, RegionConfig};
use nest_core::snrcheck::{verify_theorem1, NoisyCluster};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_series(seed: u64, n: usize, t: usize) -> SeriesTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * t).map(|_| rng.random_range(-3.0..3.0)).collect();
    SeriesTensor::new(n, t, 1, values, 4, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), a in 1usize..6, b in 1usize..7, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random_matrix(&mut rng, a, d, 3.0), random_matrix(&mut rng, b, d, 3.0), random_matrix(&mut rng, b, d, 3.0));
        let (_, w) = scaled_dot_attention_with_weights(&q, &k, &v).unwrap();
        for row in w.data().chunks(b) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    /// Adding the same vector to every key shifts each logit row by a constant.
    #[test]
    fn attention_ignores_row_constant_logit_shifts(seed in any::<u64>(), a in 1usize..6, b in 1usize..7, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random_matrix(&mut rng, a, d, 2.0), random_matrix(&mut rng, b, d, 2.0), random_matrix(&mut rng, b, d, 2.0));
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = k.data().chunks(d).flat_map(|row| row.iter().zip(&u).map(|(x, s)| x + s).collect::<Vec<_>>()).collect();
        let k2 = Tensor::matrix(b, d, shifted).unwrap();
        let o1 = scaled_dot_attention(&q, &k, &v).unwrap();
        let o2 = scaled_dot_attention(&q, &k2, &v).unwrap();
        for (x, y) in o1.data().iter().zip(o2.data()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
        prop_assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap(), o1);
    }

    #[test]
    fn affinity_is_symmetric_with_unit_range(seed in any::<u64>(), n in 2usize..9, chunks in 1usize..5) {
        let x = random_series(seed, n, 4 * chunks + 3);
        for mode in [ChunkMode::Subsequence, ChunkMode::ChunkMean] {
            let g = build_affinity(&x, chunks, None, mode).unwrap();
            for i in 0..n {
                prop_assert_eq!(g.a[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert_eq!(g.a[(i, j)], g.a[(j, i)]);
                    if i != j {
                        prop_assert!(g.a[(i, j)] > 0.0 && g.a[(i, j)] <= 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn laplacian_spectrum_within_zero_two(seed in any::<u64>(), n in 2usize..10) {
        let x = random_series(seed, n, 16);
        let g = build_affinity(&x, 4, None, ChunkMode::Subsequence).unwrap();
        let l = normalized_laplacian(&g.a).unwrap();
        let eig = spectral_embed(&l, n).unwrap().eigenvalues;
        prop_assert!(eig.iter().all(|&e| (-1e-8..=2.0 + 1e-8).contains(&e)), "{:?}", eig);
        prop_assert!(eig[0].abs() <= 1e-8);
    }

    #[test]
    fn kmeans_objective_never_increases(seed in any::<u64>(), n in 3usize..30, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = kmeans(&pts, &KMeansConfig::new(k.min(n), seed)).unwrap();
        for w in r.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", r.trace);
        }
    }

    #[test]
    fn identical_signals_meet_the_bound_with_equality(seed in any::<u64>(), size in 1usize..12, len in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma2 = rng.random_range(0.1..4.0);
        let r = verify_theorem1(&NoisyCluster::new(vec![s; size], sigma2).unwrap()).unwrap();
        prop_assert!(r.slack.abs() <= 1e-10 * r.bound.max(1.0));
    }

    /// Counted multiply-adds of one cross-scale layer equal the closed-form cost.
    #[test]
    fn cost_model_matches_counted_macs(seed in any::<u64>(), n in 1usize..12, m in 1usize..5, d in 1usize..6) {
        let cfg = ModelConfig {
            n_nodes: n,
            n_regions: m,
            embed_dim: d,
            attn_dim: d,
            layers: 1,
            mlp: false,
            ..ModelConfig::tiny()
        };
        let store = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let hx = g.constant(random_matrix(&mut rng, n, d, 1.0));
        let hz = g.constant(random_matrix(&mut rng, m, d, 1.0));
        reset_mac_count();
        cross_scale_layer(&mut g, &store, &cfg, 0, hx, hz).unwrap();
        let cost = attention_cost(n, m, d, 1);
        prop_assert_eq!(mac_count(), cost.interaction + cost.projections);
    }
}

#[test]
fn regionalization_is_deterministic() {
    let spec = SyntheticSpec {
        nodes_per_region: 6,
        steps: 96 * 3,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap().series;
    let cfg = RegionConfig {
        n_regions: Some(3),
        chunks: 6,
        seed: 4,
        ..RegionConfig::default()
    };
    let a = regionalize_pipeline(&data, &cfg).unwrap();
    let b = regionalize_pipeline(&data, &RegionConfig { threads: 4, ..cfg.clone() }).unwrap();
    assert_eq!(a, b);
}
