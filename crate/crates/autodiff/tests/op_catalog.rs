use aprop_autodiff::gradcheck::{catalog, gradient_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

#[test]
fn catalog_names_are_unique() {
    let mut names: Vec<_> = catalog().iter().map(|c| c.name).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in catalog() {
            let inputs = case.sample(&mut || rng.gen::<f64>()).unwrap();
            let err = gradient_error(case.apply, &inputs, STEP).unwrap();
            prop_assert!(err < TOLERANCE, "{}: relative error {err:e}", case.name);
        }
    }
}
