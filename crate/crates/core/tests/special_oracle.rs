use approx::assert_relative_eq;
use parametrix_core::{beta_fn, gamma_fn, ln_gamma};
use proptest::prelude::*;

#[test]
fn gamma_of_one_half_is_root_pi() {
    assert_relative_eq!(gamma_fn(0.5).unwrap(), std::f64::consts::PI.sqrt(), max_relative = 1e-14);
}

#[test]
fn beta_one_one_half() {
    assert_relative_eq!(beta_fn(1.0, 0.5).unwrap(), 2.0, max_relative = 1e-14);
}

// ∫_0^1 t^{-1/4}(1-t)^{-1/2} dt by adaptive quadrature in scipy
const BETA_075_05: f64 = 2.396_280_469_471_184;

#[test]
fn beta_of_the_first_convolution_constant() {
    assert_relative_eq!(beta_fn(0.75, 0.5).unwrap(), BETA_075_05, max_relative = 1e-12);
}

proptest! {
    #[test]
    fn recurrence(z in 0.05f64..30.0) {
        let lhs = ln_gamma(z + 1.0).unwrap();
        let rhs = z.ln() + ln_gamma(z).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn beta_is_symmetric_and_matches_gamma(a in 0.05f64..8.0, b in 0.05f64..8.0) {
        let ab = beta_fn(a, b).unwrap();
        prop_assert!((ab - beta_fn(b, a).unwrap()).abs() <= 1e-13 * ab);
        let via_gamma = gamma_fn(a).unwrap() * gamma_fn(b).unwrap() / gamma_fn(a + b).unwrap();
        prop_assert!((ab - via_gamma).abs() <= 1e-11 * ab);
    }
}
