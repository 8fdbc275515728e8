mod common;

use common::laws;
use maxplus_vi::maxplus::{residuate, ExtendedValue, ValueVector};
use maxplus_vi::Error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn algebra_laws(seed in any::<u64>()) {
        laws::algebra(seed, 1e-12).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bellman_laws(seed in any::<u64>()) {
        laws::bellman_laws(seed, 1e-12).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn oplus_otimes_semiring(a in -1e6..1e6f64, b in -1e6..1e6f64, c in -1e6..1e6f64) {
        let (x, y, z) = (ExtendedValue::finite(a), ExtendedValue::finite(b), ExtendedValue::finite(c));
        let bot = ExtendedValue::bottom();
        prop_assert_eq!(x.oplus(y), y.oplus(x));
        prop_assert_eq!(x.oplus(bot), x);
        prop_assert!(x.otimes(bot).is_bottom());
        prop_assert_eq!(x.otimes(ExtendedValue::zero()), x);
        // ⊗ distributes over ⊕
        let lhs = x.otimes(y.oplus(z)).raw();
        let rhs = x.otimes(y).oplus(x.otimes(z)).raw();
        prop_assert!((lhs - rhs).abs() <= 1e-9);
    }
}

#[test]
fn nan_and_plus_infinity_are_rejected() {
    assert!(ExtendedValue::new(f64::NAN).is_err());
    assert!(ExtendedValue::new(f64::INFINITY).is_err());
    assert!(ExtendedValue::new(f64::NEG_INFINITY).unwrap().is_bottom());
    assert!(ValueVector::from_raw(&[0.0, f64::NAN]).is_err());
}

#[test]
fn residuation_onto_bottom_atom_is_unbounded() {
    let w = common::dictionary(&[vec![0.0, 1.0], vec![common::NEG, common::NEG]]);
    match residuate(&w, &common::values(&[1.0, 2.0])) {
        Err(Error::UnboundedResiduation { atom }) => assert_eq!(atom, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn residuation_skips_bottom_entries() {
    let w = common::dictionary(&[vec![0.0, common::NEG, 2.0]]);
    let a = residuate(&w, &common::values(&[5.0, -100.0, 3.0])).unwrap();
    assert_eq!(a[0].raw(), 1.0);
}
