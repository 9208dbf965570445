use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topo3d::dataset::{rotate_record, sample_iteration_pair, split_indices, ChannelTensor, SampleRecord, Strategy as PairStrategy, Symmetry, CHANNELS};
use topo3d::domain::build_domain;
use topo3d::eval::{binary_accuracy, rms_accuracy};
use topo3d::field::{DensityField, Grid3};
use topo3d::filter::FilterKernel;
use topo3d::net::{Activation, LayerSpec, Network, NetworkConfig};
use topo3d::sampler::{sample_problem, truncated_poisson, SamplerConfig};
use topo3d::simp::oc_update;

fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, len)
}

fn symmetry() -> impl Strategy<Value = Symmetry> {
    (0usize..6, proptest::array::uniform3(prop_oneof![Just(1i8), Just(-1i8)])).prop_map(|(p, sign)| {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        Symmetry::new(perms[p], sign)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_permutation_symmetric((p, t) in (1usize..40).prop_flat_map(|n| (unit_vec(n), unit_vec(n))), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        let b = binary_accuracy(&p, &t, 0.5).unwrap();
        prop_assert_eq!(b, binary_accuracy(&pp, &tp, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&b));
        let r = rms_accuracy(&p, &t).unwrap();
        prop_assert!((r - rms_accuracy(&pp, &tp).unwrap()).abs() < 1e-12);
        prop_assert!(r <= 1.0);
        prop_assert_eq!(r == 1.0, p == t);
    }

    #[test]
    fn filter_preserves_constants_and_is_adjoint(nx in 1usize..6, ny in 1usize..5, nz in 1usize..5, r in 1.0f64..2.6, seed in any::<u64>()) {
        let d = build_domain(nx, ny, nz, nx as f64, ny as f64, nz as f64).unwrap();
        let k = FilterKernel::new(&d, r);
        let n = d.element_count();
        for v in k.apply(&vec![0.37; n]) {
            prop_assert!((v - 0.37).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let ax = k.apply(&x);
        let aty = k.apply_transpose(&y);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
        let (lo, hi) = x.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(ax.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn conv_extent_matches_window_count(n in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let spec = LayerSpec { stride: s, ..LayerSpec::conv(1, 1, k, p, Activation::None) };
        let windows = (0..).take_while(|&o| o * s + k <= n + 2 * p).count();
        match spec.output_extent(n) {
            Ok(e) => prop_assert_eq!(e, windows),
            Err(_) => prop_assert_eq!(windows, 0),
        }
    }

    #[test]
    fn same_padding_encoder_decoder_restores_shape(half in proptest::array::uniform3(1usize..5), widths in proptest::array::uniform3(1usize..5), k in prop_oneof![Just(1usize), Just(3), Just(5)]) {
        let dims = half.map(|h| 2 * h);
        let pad = (k - 1) / 2;
        let config = NetworkConfig {
            channels: (0..widths[0].min(CHANNELS)).collect(),
            layers: vec![
                LayerSpec::conv(widths[0].min(CHANNELS), widths[1], k, pad, Activation::Relu),
                LayerSpec::max_pool(widths[1], 2),
                LayerSpec::transpose_conv(widths[1], widths[2], 2, 2, Activation::Relu),
                LayerSpec::conv(widths[2], 1, k, pad, Activation::Tanh),
            ],
        };
        let layer_dims = config.layer_dims(dims).unwrap();
        prop_assert_eq!(layer_dims[1], half);
        prop_assert_eq!(*layer_dims.last().unwrap(), dims);
        prop_assert!(config.validate(dims).is_ok());
    }

    #[test]
    fn network_output_respects_clamp(seed in any::<u64>(), x in unit_vec(3 * 4 * 2 * 2)) {
        let net = Network::init(NetworkConfig::reference(vec![0, 1, 2]), seed);
        let eps = 1e-3;
        let y = net.forward(&x, [4, 2, 2], eps).unwrap();
        prop_assert_eq!(y.len(), 16);
        prop_assert!(y.iter().all(|v| (eps..=1.0 - eps).contains(v)));
        prop_assert_eq!(y, net.forward(&x, [4, 2, 2], eps).unwrap());
    }

    #[test]
    fn symmetry_codes_and_composition(a in symmetry(), b in symmetry(), v in proptest::array::uniform3(-5.0f64..5.0)) {
        prop_assert_eq!(Symmetry::from_code(a.code()).unwrap(), a);
        let lhs = a.compose(b).apply_vector(v);
        let rhs = a.apply_vector(b.apply_vector(v));
        prop_assert_eq!(lhs, rhs);
        let norm = |w: [f64; 3]| w.iter().map(|c| c * c).sum::<f64>();
        prop_assert!((norm(v) - norm(a.apply_vector(v))).abs() < 1e-12);
    }

    #[test]
    fn rotations_cycle_back(seed in any::<u64>(), side in 1usize..4) {
        let grid = Grid3::new(2 * side, side, side);
        let n = grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..CHANNELS * n)
            .map(|i| match i / n {
                0 => rand::Rng::gen_range(&mut rng, 0.0..1.0),
                1..=4 => rand::Rng::gen_range(&mut rng, -1.0..1.0),
                _ => rand::Rng::gen_range(&mut rng, -1i8..=1) as f32,
            })
            .collect();
        let rec = SampleRecord {
            input: ChannelTensor::new(grid, data).unwrap(),
            target: (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect(),
            m: 3,
            n: 1,
            iterations: 9,
            seed,
            symmetry: Symmetry::IDENTITY,
        };
        let mut r = rec.clone();
        for _ in 0..4 {
            r = rotate_record(&r, Symmetry::X90).unwrap();
        }
        prop_assert_eq!(r.input.data(), rec.input.data());
        prop_assert_eq!(&r.target, &rec.target);
        prop_assert_eq!(r.symmetry, Symmetry::IDENTITY);
        for sym in [Symmetry::X180, Symmetry::Y180, Symmetry::Z180] {
            let twice = rotate_record(&rotate_record(&rec, sym).unwrap(), sym).unwrap();
            prop_assert_eq!(twice, rec.clone());
        }
    }

    #[test]
    fn splits_partition_indices(count in 3usize..300, seed in any::<u64>()) {
        let s = split_indices(count, seed).unwrap();
        prop_assert_eq!(s.train.len(), 3 * count / 4);
        prop_assert_eq!(s.validation.len(), count / 12);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
    }

    #[test]
    fn iteration_pairs_stay_in_range(t in 2usize..200, seed in any::<u64>(), which in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = sample_iteration_pair(PairStrategy::ALL[which], t, &mut rng).unwrap();
        prop_assert!(m >= 1 && m < t && n < m);
    }

    #[test]
    fn truncated_poisson_lands_in_unlikely_windows(lambda in 1.0f64..40.0, lo in 0u64..80, width in 0u64..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = truncated_poisson(&mut rng, lambda, lo, lo + width);
        prop_assert!((lo..=lo + width).contains(&k));
    }

    #[test]
    fn sampled_problems_are_valid(seed in any::<u64>()) {
        let cfg = SamplerConfig::default();
        let p = sample_problem(seed, &build_domain(24, 12, 12, 2.0, 1.0, 1.0).unwrap(), &cfg);
        prop_assert!(p.validate().is_ok());
        prop_assert!(p.volume_fraction >= cfg.vf_clamp[0] && p.volume_fraction <= cfg.vf_clamp[1]);
        prop_assert!((cfg.load_clamp[0]..=cfg.load_clamp[1]).contains(&p.loads.len()));
        prop_assert_eq!(p.clone(), sample_problem(seed, &p.domain, &cfg));
    }

    #[test]
    fn oc_update_respects_bounds_move_limit_and_volume(seed in any::<u64>(), vf in 0.1f64..0.6) {
        let d = build_domain(6, 3, 3, 2.0, 1.0, 1.0).unwrap();
        let k = FilterKernel::new(&d, 1.5 * d.h());
        let n = d.element_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Start near the target so the move limit leaves it reachable.
        let x: Vec<f64> = (0..n).map(|_| vf + rand::Rng::gen_range(&mut rng, -0.05..0.05)).collect();
        let dc: Vec<f64> = (0..n).map(|_| -rand::Rng::gen_range(&mut rng, 1e-3..10.0)).collect();
        let dv = k.apply_transpose(&vec![1.0; n]);
        let xn = oc_update(&x, &dc, &dv, vf, &k, 0.2, 0.5).unwrap();
        for (a, b) in x.iter().zip(&xn) {
            prop_assert!((0.0..=1.0).contains(b));
            prop_assert!((a - b).abs() <= 0.2 + 1e-12);
        }
        let vol = k.apply(&xn).iter().sum::<f64>() / n as f64;
        prop_assert!((vol - vf).abs() < 1e-4, "volume {} target {}", vol, vf);
    }

    #[test]
    fn density_fields_reject_out_of_range(v in prop_oneof![-10.0f64..-1e-9, 1.0f64 + 1e-9..10.0]) {
        prop_assert!(DensityField::new(Grid3::new(1, 1, 2), vec![0.5, v]).is_err());
    }
}
