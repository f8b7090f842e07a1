use nalgebra::DMatrix;
use parametrix_core::oracle::{
    adaptive_integrate, em_density, em_samples, exact_linear_density, exact_linear_density_for, linear_gaussian_moments,
    McConfig,
};
use parametrix_core::{builtin, Error};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[test]
fn simple_integrals() {
    assert!((adaptive_integrate(|_| 1.0, 0.0, 1.0, 1e-12).unwrap() - 1.0).abs() < 1e-12);
    assert!((adaptive_integrate(|x| x.powf(-0.5), 0.0, 1.0, 1e-11).unwrap() - 2.0).abs() < 1e-8);
    assert!(adaptive_integrate(|x| x, 1.0, 0.0, 1e-10).is_err());
}

#[test]
fn zero_drift_identity_diffusion_is_the_heat_kernel() {
    let g = |_: f64| Ok(DMatrix::zeros(1, 1));
    let v = exact_linear_density(&g, &DMatrix::identity(1, 1), 0.0, 1.0, &[0.0], &[0.0]).unwrap();
    assert!((v - INV_SQRT_2PI).abs() < 1e-12);
}

#[test]
fn scalar_ou_moments() {
    let g = |_: f64| Ok(DMatrix::from_element(1, 1, 1.0));
    let a = DMatrix::from_element(1, 1, 0.64);
    let (r, c) = linear_gaussian_moments(&g, &a, 0.0, 0.5).unwrap();
    assert!((r[(0, 0)] - 0.5f64.exp()).abs() < 1e-10);
    assert!((c[(0, 0)] - 0.64 * (1f64.exp() - 1.0) / 2.0).abs() < 1e-10);
}

#[test]
fn kolmogorov_block_covariance() {
    // R(1, u) = [[1, 1−u], [0, 1]], so ∫_0^1 R R* du = [[4/3, 1/2], [1/2, 1]]
    let g = |_: f64| Ok(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    let (_, c) = linear_gaussian_moments(&g, &DMatrix::identity(2, 2), 0.0, 1.0).unwrap();
    let want = DMatrix::from_row_slice(2, 2, &[4.0 / 3.0, 0.5, 0.5, 1.0]);
    assert!((c - want).abs().max() < 1e-8);
}

#[test]
fn exact_density_integrates_to_one() {
    let ou = builtin("ou", &[("sigma", 0.8)]).unwrap().single().unwrap();
    let mean = 0.5f64.exp();
    let sd = (0.64 * (1f64.exp() - 1.0) / 2.0).sqrt();
    let mass = adaptive_integrate(
        |y| exact_linear_density_for(&ou, 0.0, 0.5, &[1.0], &[y]).unwrap(),
        mean - 10.0 * sd,
        mean + 10.0 * sd,
        1e-10,
    )
    .unwrap();
    assert!((mass - 1.0).abs() < 1e-6);
    let vs = builtin("variable_sigma", &[]).unwrap().single().unwrap();
    assert!(matches!(exact_linear_density_for(&vs, 0.0, 0.5, &[0.0], &[0.0]), Err(Error::Config(_))));
}

#[test]
fn heat_kde_at_the_centre() {
    let heat = builtin("heat", &[]).unwrap().single().unwrap();
    let cfg = McConfig::default();
    let v = em_density(&heat, 0.0, 1.0, &[0.0], &[vec![0.0]], &cfg).unwrap()[0];
    // Silverman bandwidth h: the KDE targets the N(0, 1 + h²) density; its
    // standard error is about sqrt(g(0) / (2 √π n h))
    let n = cfg.n_paths as f64;
    let h = (4.0 / (3.0 * n)).powf(0.2);
    let smoothed = INV_SQRT_2PI / (1.0 + h * h).sqrt();
    let stderr = (INV_SQRT_2PI / (2.0 * std::f64::consts::PI.sqrt() * n * h)).sqrt();
    assert!((v - smoothed).abs() <= 3.0 * stderr, "{v} vs {smoothed} ± {stderr}");
    assert!((v - INV_SQRT_2PI).abs() <= 3.0 * stderr + (INV_SQRT_2PI - smoothed));
}

#[test]
fn fixed_seed_is_bit_reproducible() {
    let ou = builtin("ou", &[("sigma", 0.8)]).unwrap().single().unwrap();
    let cfg = McConfig {
        n_paths: 5000,
        ..McConfig::default()
    };
    let ys: Vec<Vec<f64>> = (0..9).map(|i| vec![0.5 + 0.25 * i as f64]).collect();
    let a = em_density(&ou, 0.0, 0.5, &[1.0], &ys, &cfg).unwrap();
    let b = em_density(&ou, 0.0, 0.5, &[1.0], &ys, &cfg).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn euler_maruyama_weak_error_scale() {
    let ou = builtin("ou", &[("sigma", 0.8)]).unwrap().single().unwrap();
    let cfg = McConfig::default();
    let xs = em_samples(&ou, 0.0, 0.5, &[1.0], &cfg).unwrap();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // the Euler mean is (1 + h)^{n} against e^{0.5}: an O(1/n_steps) gap
    let bias_scale = 0.5f64.exp() * 0.5 / cfg.n_steps as f64;
    assert!((mean - 0.5f64.exp()).abs() <= bias_scale + 3.0 * sd / n.sqrt());
}

#[test]
fn mc_config_limits() {
    let ou = builtin("ou", &[]).unwrap().single().unwrap();
    let bad = McConfig {
        n_paths: 10,
        ..McConfig::default()
    };
    assert!(em_density(&ou, 0.0, 0.5, &[1.0], &[vec![1.0]], &bad).is_err());
}
