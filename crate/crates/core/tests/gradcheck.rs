mod common;

use tgqn::pipeline::Variant;

use common::gradient::gradient_check;

/// The loss carries a large constant normalizer, so its ulp over a step of
/// 1e-4 leaves about 1e-9 of noise in each difference; gradients smaller than
/// 1e-3 are judged against that absolute floor.
#[test]
fn f64_gradients_match_finite_differences() {
    for variant in [Variant::Tgqn, Variant::Seqgqn] {
        let r = gradient_check(variant, false, 1e-4, 1e-3, 1e-5);
        assert!(r.checked >= 200);
        assert!(
            r.failures.is_empty(),
            "{variant} worst {:.2e}: {:#?}",
            r.worst,
            r.failures
        );
    }
}

/// Single precision accumulates rounding over a loss of a few hundred nats,
/// so small gradients are compared against an absolute floor of 1e-2.
#[test]
fn f32_gradients_match_f64_finite_differences() {
    let r = gradient_check(Variant::Tgqn, true, 1e-4, 1e-2, 1e-3);
    assert!(r.checked >= 200);
    assert!(
        r.failures.is_empty(),
        "worst {:.2e}: {:#?}",
        r.worst,
        r.failures
    );
}
