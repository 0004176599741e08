mod common;

use common::{check_gradients, random_case, LossKind};
use proptest::prelude::*;
use subliminal::rng::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradients_match_finite_differences(seed in any::<u64>()) {
        let case = random_case(&mut Rng::new(seed));
        for kind in [LossKind::CrossEntropy, LossKind::AuxMse] {
            let stats = check_gradients(&case, kind, 6);
            prop_assert!(stats.checked > 0);
            prop_assert!(stats.max_rel_err < 1e-4, "{kind:?} {:?}: {stats:?}", case.spec);
        }
    }
}

#[test]
fn kink_skips_are_rare() {
    let mut rng = Rng::new(99);
    let (mut checked, mut skipped) = (0, 0);
    for _ in 0..30 {
        let case = random_case(&mut rng);
        for kind in [LossKind::CrossEntropy, LossKind::AuxMse] {
            let s = check_gradients(&case, kind, 6);
            checked += s.checked;
            skipped += s.skipped;
        }
    }
    assert!(skipped * 100 <= checked, "{skipped} skipped of {checked}");
}
