//! Fixed quadrature rules: Gauss–Legendre, Gauss–Jacobi and uniform
//! trapezoid grids.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::special::beta_fn;

/// Nodes and weights on the reference interval [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped affinely onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }
}

fn legendre_rule(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

fn rule_cache() -> &'static Mutex<HashMap<usize, Arc<Rule>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Rule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// n-point Gauss–Legendre rule on [-1, 1] (cached).
pub fn gauss_legendre(n: usize) -> Arc<Rule> {
    assert!(n >= 1, "Gauss–Legendre rule needs at least one node");
    let mut cache = rule_cache().lock().expect("quadrature cache poisoned");
    cache
        .entry(n)
        .or_insert_with(|| Arc::new(legendre_rule(n)))
        .clone()
}

/// n-point Gauss–Jacobi rule for the weight (1-x)^alpha (1+x)^beta on [-1, 1],
/// computed with the Golub–Welsch eigenvalue method.
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> Result<Rule> {
    if !(alpha > -1.0) {
        return Err(Error::NonPositiveArgument(alpha + 1.0));
    }
    if !(beta > -1.0) {
        return Err(Error::NonPositiveArgument(beta + 1.0));
    }
    if n == 0 {
        return Err(Error::EmptyGrid("Gauss–Jacobi rule with zero nodes"));
    }
    let ab = alpha + beta;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let diag = if k == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / ((2.0 * kf + ab) * (2.0 * kf + ab + 2.0))
        };
        jac[(k, k)] = diag;
        if k + 1 < n {
            let m = kf + 1.0;
            let b = if k == 0 {
                4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + ab).powi(2) * (3.0 + ab))
            } else {
                4.0 * m * (m + alpha) * (m + beta) * (m + ab)
                    / ((2.0 * m + ab).powi(2) * (2.0 * m + ab + 1.0) * (2.0 * m + ab - 1.0))
            };
            jac[(k, k + 1)] = b.sqrt();
            jac[(k + 1, k)] = b.sqrt();
        }
    }
    let mu0 = 2f64.powf(ab + 1.0) * beta_fn(alpha + 1.0, beta + 1.0)?;
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Uniform grid of `n` points on [-radius, radius] with trapezoid weights.
pub fn trapezoid_grid(n: usize, radius: f64) -> Rule {
    assert!(n >= 2, "trapezoid grid needs at least two points");
    let h = 2.0 * radius / (n - 1) as f64;
    let nodes = (0..n).map(|i| -radius + h * i as f64).collect();
    let weights = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
        .collect();
    Rule { nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 24, 64] {
            let rule = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let got: f64 = rule
                    .nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * x.powi(deg as i32))
                    .sum();
                let want = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((got - want).abs() < 1e-13, "n={n} deg={deg}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn jacobi_moments() {
        // weight (1-x)^(-1/2): integral of the weight is 2^(1/2) B(1/2, 1) = 2 sqrt(2)
        let rule = gauss_jacobi(12, -0.5, 0.0).unwrap();
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        // ∫(1-x)^a (1+x)^b x^2 for a=0.3, b=-0.2 vs a 200-node legendre rule on a smooth version
        let rule = gauss_jacobi(8, 0.0, 0.0).unwrap();
        let gl = gauss_legendre(8);
        for (a, b) in rule.nodes.iter().zip(&gl.nodes) {
            assert!((a - b).abs() < 1e-13);
        }
        let rule = gauss_jacobi(10, 1.0, 2.0).unwrap();
        // ∫ (1-x)(1+x)^2 dx over [-1,1] = 4/3
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_weights_sum_to_length() {
        let g = trapezoid_grid(61, 6.0);
        assert!((g.weights.iter().sum::<f64>() - 12.0).abs() < 1e-12);
        assert_eq!(g.nodes[30], 0.0);
    }
}
