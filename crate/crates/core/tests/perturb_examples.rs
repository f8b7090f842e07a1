use parametrix_core::oracle::adaptive_integrate;
use parametrix_core::parametrix::QuadConfig;
use parametrix_core::perturb::*;
use parametrix_core::rng::CounterRng;
use parametrix_core::{builtin, Constants, DiffusionSpec, Error};

// Δ_{ε,b}(t,s) for the oscillating pair, ε = 1, μ = δ_1, from nested scipy
// quadrature (Gaussian y-law of the OU surrogate, Beta-weighted time integral,
// 12-point probe seminorm of cos along e^{u−s}y)
const DELTA_ORACLE: [(f64, (f64, f64), f64); 4] = [
    (4.0, (0.0, 1.0), 0.952_261_181_247_732_3),
    (4.0, (0.3, 0.4), 0.831_157_605_082_806_9),
    (2.01, (0.0, 1.0), 0.640_495_304_652_632_9),
    (2.01, (0.3, 0.4), 0.483_671_220_913_245_16),
];

fn unit_constants() -> Constants {
    Constants {
        gamma: 1.0,
        lipschitz_k: 1.0,
        ellipticity: 2.0,
        horizon: 1.0,
    }
}

fn spec(name: &str, drift: &str, sigma: &str) -> DiffusionSpec {
    DiffusionSpec::from_sources(name, 1, &[drift], &[sigma], unit_constants()).unwrap()
}

fn oscillating(eps: f64, q: f64) -> PerturbationPair {
    let (b, p, e) = builtin("oscillating_pair", &[("eps", eps), ("q", q)]).unwrap().pair().unwrap();
    PerturbationPair::new(b, p, e).unwrap()
}

fn identical() -> PerturbationPair {
    let s = builtin("variable_sigma", &[]).unwrap().single().unwrap();
    PerturbationPair::new(s.clone(), s, 0.1).unwrap()
}

fn normal_cdf_gap(m: f64, sd: f64) -> f64 {
    // ∫ |φ(y) − φ(y − m)| dy = 2 ∫_{−m/2}^{m/2} φ
    let phi = |y: f64| (-0.5 * (y / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
    2.0 * adaptive_integrate(phi, -0.5 * m.abs(), 0.5 * m.abs(), 1e-13).unwrap()
}

#[test]
fn delta_matches_nested_quadrature() {
    for (q, (t, s), want) in DELTA_ORACLE {
        let (db, ds) = delta_l1(&oscillating(1.0, q), t, s, &QuadConfig::default()).unwrap();
        assert_eq!(ds, 0.0);
        assert!((db / want - 1.0).abs() < 0.01, "q = {q}, ({t},{s}): {db} vs {want}");
    }
}

#[test]
fn constant_sigma_shift_gives_its_size() {
    let c = 0.3;
    let base = spec("ou", "x1", "1");
    let pert = spec("ou_shift", "x1", &format!("1+{c}"));
    let pair = PerturbationPair::new(base, pert, 0.1).unwrap();
    for (t, s) in [(0.0, 1.0), (0.2, 0.5)] {
        let (db, ds) = delta_l1(&pair, t, s, &QuadConfig::default()).unwrap();
        assert_eq!(db, 0.0);
        assert!((ds - c).abs() < 1e-6, "{ds}");
    }
}

#[test]
fn constant_drift_shift() {
    let c: f64 = -0.25;
    let pair = PerturbationPair::new(spec("heat", "0", "1"), spec("heat_shift", &format!("{c}"), "1"), 0.1).unwrap();
    let (b, sg) = delta_linf(&pair, 0.0, 1.0, &SupGrid::default()).unwrap();
    assert_eq!((b, sg), (c.abs(), 0.0));
    let (db, ds) = delta_l1(&pair, 0.0, 1.0, &QuadConfig::default()).unwrap();
    assert!((db - c.abs()).abs() < 1e-12 && ds == 0.0, "{db}");
}

#[test]
fn shifted_heat_difference_matches_gaussian_overlap() {
    let c = 0.3;
    let pair = PerturbationPair::new(spec("heat", "0", "1"), spec("heat_shift", &format!("{c}"), "1"), 0.1)
        .unwrap()
        .with_mu(vec![(vec![0.0], 1.0)])
        .unwrap();
    for (t, s) in [(0.0, 1.0), (0.5, 0.75)] {
        // the piecewise-linear |·| rule needs the refined grid for 1e-4
        let got = density_diff_l1(&pair, t, s, 2, &QuadConfig::default().refined()).unwrap();
        let want = normal_cdf_gap(c * (s - t), (s - t).sqrt());
        assert!((got - want).abs() < 1e-4, "({t},{s}): {got} vs {want}");
    }
}

#[test]
fn identical_pair_is_zero_everywhere() {
    let pair = identical();
    let q = QuadConfig::default();
    assert_eq!(delta_l1(&pair, 0.0, 1.0, &q).unwrap(), (0.0, 0.0));
    assert_eq!(delta_linf(&pair, 0.0, 1.0, &SupGrid::default()).unwrap(), (0.0, 0.0));
    let (m, _) = maxima(&pair, &time_cells(0.25, 1.0).unwrap(), &q).unwrap();
    assert_eq!((m.m, m.m_bar, m.m_c, m.m_bar_c), (0.0, 0.0, 0.0, 0.0));
    let bound = l1_theorem_bound(&pair, &m, 1.0).unwrap();
    assert_eq!((bound.strong, bound.weak), (0.0, 0.0));
    assert!(density_diff_l1(&pair, 0.0, 1.0, 2, &q).unwrap() <= 1e-8);

    let xs = vec![vec![0.0], vec![1.0]];
    let ys: Vec<Vec<f64>> = (0..5).map(|i| vec![-1.0 + 0.5 * i as f64]).collect();
    let chk = linf_theorem_check(&pair, 0.0, 0.5, &xs, &ys, 2, &q, &SupGrid::default(), None).unwrap();
    assert_eq!((chk.report.lhs, chk.report.fitted_c), (0.0, 0.0));
    assert!(chk.report.is_well_formed());

    let samples = vec![Sample {
        t: 0.1,
        s: 0.6,
        x: vec![0.4],
        y: vec![0.9],
    }];
    let cfg = LemmaConfig {
        order: 1,
        quad: QuadConfig {
            n_time: 8,
            n_space: 21,
            space_radius: 5.0,
            ..QuadConfig::default()
        },
        ..LemmaConfig::default()
    };
    for id in LemmaId::ALL {
        let r = verify_lemma(id, &pair, &samples, &cfg).unwrap();
        assert!(r.lhs.iter().all(|v| *v == 0.0), "{id}: {:?}", r.lhs);
        assert_eq!(r.fitted_c, 0.0, "{id}");
        assert!(r.finite);
    }
}

#[test]
fn seminorm_cloud_against_dense_probes() {
    let (eps, q) = (0.04, 2.01);
    let pair = oscillating(eps, q);
    let f = |t: f64, x: &[f64]| -> parametrix_core::Result<Vec<f64>> {
        Ok(vec![pair.perturbed().drift(t, x)?[0] - pair.base().drift(t, x)?[0]])
    };
    let t = eps.sqrt();
    let cloud = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let r = -3.0 + 6.0 * (k as f64 + 0.5) / n as f64;
                vec![r]
            })
            .collect()
    };
    let coarse = local_seminorm(f, t, &[0.0], 1.0, &cloud(64)).unwrap();
    let dense = local_seminorm(f, t, &[0.0], 1.0, &cloud(4096)).unwrap();
    assert!((coarse / dense - 1.0).abs() < 0.05, "{coarse} vs {dense}");

    // the default cloud reaches radius 1, where (1 − cos r)/r peaks inside the unit ball
    let unit: Vec<Vec<f64>> = (1..=4096).flat_map(|k| [vec![k as f64 / 4096.0], vec![-(k as f64) / 4096.0]]).collect();
    let default = local_seminorm(f, t, &[0.0], 1.0, &probe_cloud(&[0.0])).unwrap();
    let dense_unit = local_seminorm(f, t, &[0.0], 1.0, &unit).unwrap();
    assert!((default / dense_unit - 1.0).abs() < 1e-12);
}

#[test]
fn drift_difference_scales_linearly() {
    let (eps, q) = (0.2, 2.01);
    let pair = oscillating(eps, q);
    let kinks = pair.perturbed().time_breakpoints().to_vec();
    let osc = parametrix_core::coeffs::oscillating_perturbation_source(eps, q);
    let q0 = QuadConfig::default();
    let (full, _) = delta_l1(&pair, 0.1, 0.9, &q0).unwrap();
    for c in [0.25, 0.5, 1.0] {
        let pert = DiffusionSpec::from_sources("scaled", 1, &[&format!("x1+{c:?}*{osc}")], &["1.0"], *pair.perturbed().constants())
            .unwrap()
            .with_time_breakpoints(kinks.clone());
        let scaled = PerturbationPair::new(pair.base().clone(), pert, eps).unwrap();
        let (db, _) = delta_l1(&scaled, 0.1, 0.9, &q0).unwrap();
        assert!((db - c * full).abs() <= 1e-10 * full, "c = {c}: {db} vs {}", c * full);
    }
}

#[test]
fn delta_outside_the_open_band_is_rejected() {
    let pair = oscillating(0.2, 2.01);
    for d in [0.5, 0.3, 1.0, 1.2] {
        assert!(matches!(pair.clone().with_delta(d), Err(Error::InvalidParam { .. })), "{d}");
    }
    assert!(pair.clone().with_delta(0.51).is_ok());
    assert!(pair.clone().with_mu(vec![(vec![0.0], 0.5), (vec![1.0], 0.4)]).is_err());
    assert!(pair.clone().with_mu(vec![(vec![0.0], 0.5), (vec![1.0], 0.5)]).is_ok());
    assert!(matches!(pair.with_mu(Vec::new()), Err(Error::EmptyGrid(_))));
}

#[test]
fn oscillating_maxima_and_holder_duality() {
    let (eps, q) = (0.05, 2.01);
    let pair = oscillating(eps, q).with_delta(0.75).unwrap();
    let grid = time_cells(0.1, 1.0).unwrap();
    let (m, cells) = maxima(&pair, &grid, &QuadConfig::default()).unwrap();
    let e = pair.delta() - 0.5 * pair.gamma();
    assert!(m.m <= pair.alpha().powf(e) * m.m_bar);
    assert!(m.m_c <= pair.horizon().powf(e) * m.m_bar_c);
    assert!(m.m > 0.0 && m.m_c > 0.0);
    assert!(cells.iter().all(|c| c.delta_b.is_finite() && c.delta_b > 0.0 && c.delta_sigma == 0.0));

    let fit = fit_holder_constant(&cells, eps, q).unwrap();
    assert!(fit.all_hold);
    // sup|cos| + Lip(cos) = 2
    assert!(fit.m_fit > 0.0 && fit.m_fit <= 2.0, "{}", fit.m_fit);
}

#[test]
fn uniform_perturbation_stays_away_from_zero() {
    let (eps, q) = (0.04, 2.01);
    let pair = oscillating(eps, q);
    let pi = std::f64::consts::PI;
    let (t, s) = (pi * eps.sqrt() / 6.0, pi * eps.sqrt() / 2.0);
    let grid = SupGrid {
        n_time: 33,
        n_space: 61,
        half_width: 3.0,
    };
    let (db, _) = delta_linf(&pair, t, s, &grid).unwrap();
    // the space grid contains x = 0, where |cos| = 1
    let lower = 2f64.powf(-2.0 / q) * (-pi * pi / (4.0 * q)).exp();
    assert!(db >= lower, "{db} < {lower}");
}

#[test]
fn mixture_start_measure_is_the_weighted_sum() {
    let pair = oscillating(0.2, 2.01);
    let q = QuadConfig::default();
    let single = |x: f64| {
        density_diff_l1(&pair.clone().with_mu(vec![(vec![x], 1.0)]).unwrap(), 0.0, 0.7, 1, &q).unwrap()
    };
    let mixed = pair.clone().with_mu(vec![(vec![0.5], 0.25), (vec![1.5], 0.75)]).unwrap();
    let got = density_diff_l1(&mixed, 0.0, 0.7, 1, &q).unwrap();
    let want = 0.25 * single(0.5) + 0.75 * single(1.5);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    let dirac = density_diff_l1(&pair.clone().with_mu(vec![(vec![1.0], 1.0)]).unwrap(), 0.0, 0.7, 1, &q).unwrap();
    assert_eq!(dirac, density_diff_l1(&pair, 0.0, 0.7, 1, &q).unwrap());
}

#[test]
fn unit_bound_across_the_epsilon_sweep() {
    let q = QuadConfig::default();
    let grid = time_cells(0.1, 1.0).unwrap();
    let mut strong = Vec::new();
    let mut fixed_alpha = Vec::new();
    for eps in [1.0, 0.5, 0.2, 0.05] {
        let pair = oscillating(eps, 2.01).with_delta(0.75).unwrap();
        let (m, cells) = maxima(&pair, &grid, &q).unwrap();
        let b = l1_theorem_bound(&pair, &m, 1.0).unwrap();
        assert!(b.strong.is_finite() && b.strong > 0.0 && b.strong <= b.weak);
        strong.push(b.strong);
        let one = maxima_from_cells(&cells, 1.0, 0.75, 1.0).unwrap();
        fixed_alpha.push(l1_theorem_bound(&pair.with_alpha(1.0).unwrap(), &one, 1.0).unwrap().strong);
    }
    // with α = 1 every cell is diagonal and the bound follows M alone
    assert!(fixed_alpha.windows(2).all(|w| w[1] <= w[0]), "{fixed_alpha:?}");
    // with α = √ε the off-diagonal maxima switch on below ε = 1, which lifts
    // the sum M + M^C; from there on the bound decreases again
    assert!(strong[1] > strong[0]);
    assert!(strong[1..].windows(2).all(|w| w[1] <= w[0]), "{strong:?}");
}

#[test]
fn linf_constant_under_refinement_and_reuse() {
    let q = QuadConfig::default();
    let heat = PerturbationPair::new(spec("heat", "0", "1"), spec("heat_shift", "0.1", "1"), 0.1).unwrap();
    let grid = |nx: usize, ny: usize| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let xs = (0..nx).map(|i| vec![-1.0 + 2.0 * i as f64 / (nx - 1) as f64]).collect();
        let ys = (0..ny).map(|i| vec![-3.0 + 6.0 * i as f64 / (ny - 1) as f64]).collect();
        (xs, ys)
    };
    let (xs, ys) = grid(5, 21);
    let coarse = linf_theorem_check(&heat, 0.0, 0.5, &xs, &ys, 2, &q, &SupGrid::default(), None).unwrap();
    let (xs, ys) = grid(9, 41);
    let fine = linf_theorem_check(&heat, 0.0, 0.5, &xs, &ys, 2, &q, &SupGrid::default(), None).unwrap();
    assert!(coarse.ratios.iter().flatten().all(|r| r.is_finite()));
    let (a, b) = (coarse.report.fitted_c, fine.report.fitted_c);
    assert!(a > 0.0 && (b / a - 1.0).abs() < 0.2, "{a} vs {b}");

    let base = builtin("ou", &[("sigma", 1.0)]).unwrap().single().unwrap();
    let pert = builtin("ou", &[("sigma", 1.05)]).unwrap().single().unwrap();
    let ou = PerturbationPair::new(base, pert, 0.05).unwrap();
    let (xs, ys) = grid(5, 21);
    let half = linf_theorem_check(&ou, 0.0, 0.5, &xs, &ys, 3, &q, &SupGrid::default(), None).unwrap();
    let c = half.report.fitted_c;
    let quarter = linf_theorem_check(&ou, 0.0, 0.25, &xs, &ys, 3, &q, &SupGrid::default(), Some(3.0 * c)).unwrap();
    assert!(quarter.report.passed, "{} vs {}", quarter.report.fitted_constants["C_local"], c);
}

fn random_samples(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = CounterRng::new(seed);
    (0..n)
        .map(|_| {
            let t = 0.8 * rng.next_open01();
            let s = t + 0.05 + (0.95 - t) * rng.next_open01();
            Sample {
                t,
                s: s.min(1.0),
                x: vec![-2.0 + 4.0 * rng.next_open01()],
                y: vec![-2.0 + 4.0 * rng.next_open01()],
            }
        })
        .collect()
}

#[test]
fn main_terms_constant_is_stable_under_resampling() {
    let pair = oscillating(0.2, 2.01);
    let cfg = LemmaConfig::default();
    let a = verify_lemma(LemmaId::MainTerms, &pair, &random_samples(11, 50), &cfg).unwrap();
    let b = verify_lemma(LemmaId::MainTerms, &pair, &random_samples(29, 50), &cfg).unwrap();
    assert!(a.finite && b.finite);
    assert!(a.fitted_c > 0.0 && (b.fitted_c / a.fitted_c - 1.0).abs() <= 0.5, "{} vs {}", a.fitted_c, b.fitted_c);
}

#[test]
fn kernel_difference_singularity() {
    let base = builtin("variable_sigma", &[("amp", 0.5)]).unwrap().single().unwrap();
    let pert = builtin("variable_sigma", &[("amp", 0.6)]).unwrap().single().unwrap();
    let pair = PerturbationPair::new(base, pert, 0.1).unwrap();
    let taus: Vec<f64> = (2..=7).map(|k| 0.5f64.powi(k)).collect();
    let e = kernel_gap_exponent(&pair, 1.0, &[vec![0.7]], &taus, &[-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]).unwrap();
    assert!((e + 0.5).abs() <= 0.15, "{e}");
}

#[test]
fn mixed_convolution_lemma_on_a_coarse_rule() {
    let pair = oscillating(0.2, 2.01);
    let samples = vec![Sample {
        t: 0.2,
        s: 0.8,
        x: vec![0.6],
        y: vec![0.8],
    }];
    let cfg = LemmaConfig {
        order: 1,
        quad: QuadConfig {
            n_time: 8,
            n_space: 21,
            space_radius: 5.0,
            ..QuadConfig::default()
        },
        ..LemmaConfig::default()
    };
    let r = verify_lemma(LemmaId::NconvMixed, &pair, &samples, &cfg).unwrap();
    assert!(r.finite && r.fitted_c.is_finite() && r.lhs[0] > 0.0 && r.rhs[0] > 0.0, "{r:?}");
}

#[test]
fn report_rows_follow_the_schema() {
    let pair = oscillating(0.5, 2.01);
    let q = QuadConfig::default();
    let grid = time_cells(0.25, 1.0).unwrap();
    let r = l1_report(&pair, 0.0, 1.0, 1, &grid, &q, None).unwrap();
    assert!(r.is_well_formed() && r.passed);
    let row = r.csv_row();
    assert_eq!(row.len(), PerturbationReport::CSV_HEADER.len());
    assert_eq!(PerturbationReport::CSV_HEADER.join(","), "t,s,eps,delta_b,delta_sigma,M,Mbar,MC,MbarC,lhs,rhs,fittedC,passed");
    assert_eq!(row[0], "0");
    assert_eq!(row[2], "0.5");
    assert_eq!(row[12], "true");
    for cell in &row[..12] {
        assert!(cell.parse::<f64>().unwrap().is_finite());
    }
    // a supplied constant far below the local one fails the comparison
    let tight = l1_report(&pair, 0.0, 1.0, 1, &grid, &q, Some(0.5 * r.fitted_c)).unwrap();
    assert!(!tight.passed && tight.is_well_formed());
}
