mod common;

use common::*;
use prnuda::numerics::fft2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn library_matches_brute_force_on_random_instances() {
    for seed in 0..3 {
        for (name, mismatches) in oracle_suite(seed, 60) {
            assert_eq!(mismatches, 0, "{name}: {mismatches} mismatches (seed {seed})");
        }
    }
}

#[test]
fn fft_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w) in [(1, 1), (2, 3), (5, 4), (7, 7), (8, 6)] {
        let g = rand_grid(&mut rng, 2, h, w, 1.0);
        let s = fft2(&g).unwrap();
        for c in 0..2 {
            let (re, im) = naive_dft(&g, c);
            let off = c * h * w;
            for p in 0..h * w {
                assert!((s.re[off + p] - re[p]).abs() < 1e-9, "{h}x{w} bin {p}");
                assert!((s.im[off + p] - im[p]).abs() < 1e-9, "{h}x{w} bin {p}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn oracle_suite_holds_for_any_seed(seed in any::<u64>()) {
        for (name, mismatches) in oracle_suite(seed, 5) {
            prop_assert_eq!(mismatches, 0, "{}", name);
        }
    }
}
