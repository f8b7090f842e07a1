use parametrix_core::coeffs::{audit_grid, check_pair_assumptions, default_probe_pairs};
use parametrix_core::{builtin, check_assumptions, BuiltinModel};

// sup over 0 ≤ t < s ≤ 1 on the 0.1 time grid of ∫_t^s e^{-u²/2.01}|sin u|^{2/2.01} du / √(s−t),
// attained at x = 0; computed by adaptive quadrature in scipy
const CLOSENESS_EPS1: f64 = 0.386_846_271_226_128_7;

#[test]
fn oscillating_pair_audit() {
    let (base, pert, _) = builtin("oscillating_pair", &[("eps", 1.0), ("q", 2.01), ("sigma", 1.0)])
        .unwrap()
        .pair()
        .unwrap();
    let grid = audit_grid(1, 1.0, 11, 13, 3.0);
    let rep = check_pair_assumptions(&base, &pert, &grid, &default_probe_pairs(1, 1.0)).unwrap();
    let c = rep.flow_closeness_const.unwrap();
    assert!((c - CLOSENESS_EPS1).abs() < 1e-8, "{c}");
    assert!(rep.passed.all());
    assert_eq!(rep.ellipticity_range, [1.0, 1.0]);
}

#[test]
fn figure_parameters_build_pairs() {
    for (eps, kinks) in [(1.0, 0), (0.0025, 6)] {
        match builtin("oscillating_pair", &[("eps", eps), ("q", 2.01), ("sigma", 1.0)]).unwrap() {
            BuiltinModel::Pair { base, perturbed, epsilon } => {
                assert_eq!(epsilon, eps);
                assert!(base.linear_drift().is_some());
                assert!(perturbed.linear_drift().is_none());
                // interior zeros of sin(t/√ε) in (0, 1)
                let inner = perturbed.time_breakpoints().iter().filter(|&&t| t > 0.0 && t < 1.0).count();
                assert_eq!(inner, kinks);
            }
            _ => panic!("expected a pair"),
        }
    }
}

#[test]
fn heat_and_ou_audits() {
    let heat = builtin("heat", &[("d", 2.0)]).unwrap().single().unwrap();
    let rep = check_assumptions(&heat, &audit_grid(2, 1.0, 5, 9, 3.0), &default_probe_pairs(2, 1.0)).unwrap();
    assert_eq!(rep.ellipticity_range, [1.0, 1.0]);
    assert_eq!(rep.lipschitz_const_b, 0.0);
    assert!(rep.passed.all());
}
