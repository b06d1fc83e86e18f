use std::path::PathBuf;

use teachloop::bec::{revealable_constraints, sample_region, ConstraintSet};
use teachloop::domain::load_domain;
use teachloop::teaching::Curriculum;

/// Anyone who has learned the whole bank can answer every held-out test:
/// no point of the bank's region violates a held-out constraint.
#[test]
fn heldout_tests_are_implied_by_the_bank() {
    for name in ["delivery", "skateboard"] {
        let dom = load_domain(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/domains").join(name)).unwrap();
        let cur = Curriculum::new(&dom).unwrap();
        let region = cur.prior.merged(&ConstraintSet::from_vec(cur.bank.all_kcs().map(|k| k.constraint.clone()).collect()));
        let pts = sample_region(&region, 20_000, 3);
        for spec in dom.heldout_specs() {
            for c in revealable_constraints(&spec).unwrap().iter() {
                let bad = pts.iter().filter(|x| !c.contains(x)).count();
                assert_eq!(bad, 0, "{}: {:?}", spec.env.id(), c.normal().to_f64());
            }
        }
    }
}
