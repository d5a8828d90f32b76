//! Property tests over the structural invariants: shape round trips,
//! contraction linearity, gate slicing, factor search, and EER invariances.

use proptest::prelude::*;

use ttrnn_core::cells::gate_slice;
use ttrnn_core::loss::eer;
use ttrnn_core::tensor::{contract, DenseTensor};
use ttrnn_core::tt::balanced_factorization;

fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_round_trip_preserves_tensor(shape in small_shape(), seed in 0u64..1000) {
        let n: usize = shape.iter().product();
        let mut rng = ttrnn_core::rng::Rng::new(seed);
        let t = DenseTensor::randn(shape.clone(), 1.0, &mut rng);
        let flat = t.reshape(vec![n]).unwrap();
        let back = flat.reshape(shape).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn reshape_composition_equals_direct(seed in 0u64..1000) {
        let mut rng = ttrnn_core::rng::Rng::new(seed);
        let t = DenseTensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        let two_hops = t.reshape(vec![6, 4]).unwrap().reshape(vec![24]).unwrap();
        let direct = t.reshape(vec![24]).unwrap();
        prop_assert_eq!(two_hops, direct);
    }

    #[test]
    fn contract_is_linear_in_first_argument(
        rows in 1usize..5,
        inner in 1usize..5,
        cols in 1usize..5,
        alpha in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ttrnn_core::rng::Rng::new(seed);
        let a1 = DenseTensor::randn(vec![rows, inner], 1.0, &mut rng);
        let a2 = DenseTensor::randn(vec![rows, inner], 1.0, &mut rng);
        let b = DenseTensor::randn(vec![inner, cols], 1.0, &mut rng);
        let lhs = contract(&a1.scale(alpha).add(&a2).unwrap(), &b, &[1], &[0]).unwrap();
        let rhs = contract(&a1, &b, &[1], &[0])
            .unwrap()
            .scale(alpha)
            .add(&contract(&a2, &b, &[1], &[0]).unwrap())
            .unwrap();
        let err = lhs.sub(&rhs).unwrap().frob_norm() / rhs.frob_norm().max(1e-12);
        prop_assert!(err <= 1e-12);
    }

    #[test]
    fn gate_slices_reassemble_exactly(gates in 1usize..6, block in 1usize..8, seed in 0u64..1000) {
        let mut rng = ttrnn_core::rng::Rng::new(seed);
        let y = DenseTensor::randn(vec![gates * block], 1.0, &mut rng);
        let slices: Vec<DenseTensor> = (0..gates)
            .map(|i| gate_slice(&y, gates, i).unwrap())
            .collect();
        let refs: Vec<&DenseTensor> = slices.iter().collect();
        prop_assert_eq!(DenseTensor::concat(0, &refs).unwrap(), y);
    }

    #[test]
    fn balanced_factorization_invariants(n_total in 1usize..400, n_factors in 1usize..5) {
        let factors = balanced_factorization(n_total, n_factors);
        prop_assert_eq!(factors.len(), n_factors);
        prop_assert_eq!(factors.iter().product::<usize>(), n_total);
        for pair in factors.windows(2) {
            prop_assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn eer_is_invariant_under_increasing_affine_maps(
        scale in 0.01f64..50.0,
        shift in -20.0f64..20.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ttrnn_core::rng::Rng::new(seed);
        let same: Vec<f64> = (0..12).map(|_| rng.next_normal() + 0.8).collect();
        let diff: Vec<f64> = (0..18).map(|_| rng.next_normal() - 0.8).collect();
        let base = eer(&same, &diff);
        let s2: Vec<f64> = same.iter().map(|&x| scale * x + shift).collect();
        let d2: Vec<f64> = diff.iter().map(|&x| scale * x + shift).collect();
        prop_assert!((eer(&s2, &d2) - base).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}
