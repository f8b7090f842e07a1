//! Independent references: Euler–Maruyama density estimates, exact
//! densities of linear SDEs, and adaptive Simpson quadrature.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::DiffusionSpec;
use crate::error::{Error, Result};
use crate::flow::step_size;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub bandwidth: Bandwidth,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            n_steps: 200,
            seed: 0x5eed,
            bandwidth: Bandwidth::Silverman,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 1000 {
            return Err(Error::InvalidParam {
                name: "n_paths".into(),
                reason: "must be at least 1000".into(),
            });
        }
        if self.n_steps < 16 {
            return Err(Error::InvalidParam {
                name: "n_steps".into(),
                reason: "must be at least 16".into(),
            });
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidParam {
                    name: "bandwidth".into(),
                    reason: "fixed bandwidth must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Terminal states of `n_paths` Euler–Maruyama paths from `x` at `t` to `s`,
/// row-major. Path `i` draws its normals from the counter range starting at
/// `2·i·n_steps·d`, so results do not depend on thread scheduling.
pub fn em_samples(spec: &DiffusionSpec, t: f64, s: f64, x: &[f64], cfg: &McConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(t < s) {
        return Err(Error::DegenerateInterval { t, s });
    }
    let d = spec.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    let h = (s - t) / cfg.n_steps as f64;
    let sqrt_h = h.sqrt();
    let stride = (2 * cfg.n_steps * d) as u64;
    let paths: Vec<Result<Vec<f64>>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = CounterRng::at(cfg.seed, i as u64 * stride);
            let mut z = x.to_vec();
            let mut b = vec![0.0; d];
            let mut sig = vec![0.0; d * d];
            let mut dw = vec![0.0; d];
            for k in 0..cfg.n_steps {
                let u = t + h * k as f64;
                spec.drift_into(u, &z, &mut b)?;
                spec.sigma_into(u, &z, &mut sig)?;
                dw.iter_mut().for_each(|w| *w = sqrt_h * rng.next_normal());
                for r in 0..d {
                    let noise: f64 = (0..d).map(|c| sig[r * d + c] * dw[c]).sum();
                    z[r] += b[r] * h + noise;
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinitePath { step: k + 1 });
                }
            }
            Ok(z)
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_paths * d);
    for p in paths {
        out.extend(p?);
    }
    Ok(out)
}

/// Gaussian product-kernel density estimate of the Euler–Maruyama law at
/// each point of `y_grid`.
pub fn em_density(
    spec: &DiffusionSpec,
    t: f64,
    s: f64,
    x: &[f64],
    y_grid: &[Vec<f64>],
    cfg: &McConfig,
) -> Result<Vec<f64>> {
    let d = spec.dim();
    let samples = em_samples(spec, t, s, x, cfg)?;
    let n = cfg.n_paths;
    let bw: Vec<f64> = (0..d)
        .map(|j| match cfg.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Silverman => {
                let mean = (0..n).map(|i| samples[i * d + j]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (samples[i * d + j] - mean).powi(2)).sum::<f64>()
                    / (n - 1) as f64;
                var.sqrt() * (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0))
            }
        })
        .collect();
    let norm: f64 = bw
        .iter()
        .map(|h| 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt()))
        .product::<f64>()
        / n as f64;
    y_grid
        .par_iter()
        .map(|y| {
            if y.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: y.len(),
                });
            }
            let mut acc = 0.0;
            for i in 0..n {
                let mut q = 0.0;
                for j in 0..d {
                    let z = (y[j] - samples[i * d + j]) / bw[j];
                    q += z * z;
                }
                if q < 80.0 {
                    acc += (-0.5 * q).exp();
                }
            }
            Ok(acc * norm)
        })
        .collect()
}

/// Resolvent R(s,t) and covariance ∫_t^s R(s,u) a R(s,u)* du of the linear
/// SDE dX = G_u X du + σ dW with a = σσ*, from one RK4 pass on
/// R' = G R, Σ' = GΣ + ΣG* + a.
pub fn linear_gaussian_moments(
    g: &dyn Fn(f64) -> Result<DMatrix<f64>>,
    a: &DMatrix<f64>,
    t: f64,
    s: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: a.ncols(),
        });
    }
    if !(t <= s) {
        return Err(Error::DegenerateInterval { t, s });
    }
    let mut r = DMatrix::<f64>::identity(d, d);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    if t == s {
        return Ok((r, cov));
    }
    let rhs = |u: f64, r: &DMatrix<f64>, c: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let gm = g(u)?;
        if gm.nrows() != d || gm.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: gm.nrows(),
            });
        }
        let dc = &gm * c + c * gm.transpose() + a;
        Ok((&gm * r, dc))
    };
    let h = step_size(s - t);
    let n = ((s - t) / h).round() as usize;
    for k in 0..n {
        let u = t + h * k as f64;
        let (r1, c1) = rhs(u, &r, &cov)?;
        let (r2, c2) = rhs(u + 0.5 * h, &(&r + &r1 * (0.5 * h)), &(&cov + &c1 * (0.5 * h)))?;
        let (r3, c3) = rhs(u + 0.5 * h, &(&r + &r2 * (0.5 * h)), &(&cov + &c2 * (0.5 * h)))?;
        let (r4, c4) = rhs(u + h, &(&r + &r3 * h), &(&cov + &c3 * h))?;
        r += (r1 + r2 * 2.0 + r3 * 2.0 + r4) * (h / 6.0);
        cov += (c1 + c2 * 2.0 + c3 * 2.0 + c4) * (h / 6.0);
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((r, cov))
}

/// Density at y of N(mean, cov).
pub fn gaussian_density(mean: &DVector<f64>, cov: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let d = mean.len();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NonSpd("covariance has no Cholesky factor".into()))?;
    let diff = y - mean;
    let sol = chol.solve(&diff);
    let q = diff.dot(&sol);
    let det = chol.l().diagonal().iter().map(|v| v * v).product::<f64>();
    Ok((-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt())
}

/// Transition density of dX = G_u X du + σ dW from (t, x) to (s, y).
pub fn exact_linear_density(
    g: &dyn Fn(f64) -> Result<DMatrix<f64>>,
    sigma: &DMatrix<f64>,
    t: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let d = sigma.nrows();
    if x.len() != d || y.len() != d || sigma.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: if x.len() != d { x.len() } else { y.len() },
        });
    }
    if !(t < s) {
        return Err(Error::DegenerateInterval { t, s });
    }
    let a = sigma * sigma.transpose();
    let (r, cov) = linear_gaussian_moments(g, &a, t, s)?;
    let mean = &r * DVector::from_column_slice(x);
    gaussian_density(&mean, &cov, &DVector::from_column_slice(y))
}

/// Exact density of a model whose drift was declared linear and whose σ is
/// constant.
pub fn exact_linear_density_for(spec: &DiffusionSpec, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if spec.linear_drift().is_none() || !spec.has_constant_diffusion() {
        return Err(Error::Config(format!(
            "model `{}` is not a linear SDE with constant diffusion",
            spec.name()
        )));
    }
    let g = |u: f64| -> Result<DMatrix<f64>> { Ok(spec.linear_drift_matrix(u)?.expect("linear drift declared")) };
    let sigma = spec.sigma(t, x)?;
    exact_linear_density(&g, &sigma, t, s, x, y)
}

const MAX_DEPTH: usize = 50;

struct Simpson<'a, F: Fn(f64) -> f64> {
    f: &'a F,
}

impl<F: Fn(f64) -> f64> Simpson<'_, F> {
    fn eval(&self, u: f64) -> Result<f64> {
        let v = (self.f)(u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteIntegrand { u })
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(&self, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: usize) -> Result<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let flm = self.eval(lm)?;
        let frm = self.eval(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if diff.abs() <= 15.0 * tol {
            return Ok(left + right + diff / 15.0);
        }
        if b - a < 1e-12 {
            // remaining error is bounded by the width of a sub-picometre panel
            return Ok(left + right);
        }
        if depth >= MAX_DEPTH || m <= a || m >= b {
            return Err(Error::MaxDepthExceeded { a, b });
        }
        Ok(self.recurse(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)?
            + self.recurse(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)?)
    }
}

/// ∫_a^b f by adaptive Simpson bisection until the local error estimate is
/// below `tol`. `b` may be +∞. The integral is taken after the substitution
/// x = a + (b−a)(3w² − 2w³), whose Jacobian vanishes at both ends, so
/// integrable endpoint singularities such as x^{-1/2} are never evaluated.
pub fn adaptive_integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParam {
            name: "tol".into(),
            reason: "must be positive".into(),
        });
    }
    if a.is_nan() || b.is_nan() || !a.is_finite() || b < a {
        return Err(Error::DegenerateInterval { t: a, s: b });
    }
    if a == b {
        return Ok(0.0);
    }
    if b == f64::INFINITY {
        // x = a + v/(1−v) maps [0, 1) onto [a, ∞)
        let g = |v: f64| {
            if v >= 1.0 {
                return 0.0;
            }
            let one = 1.0 - v;
            f(a + v / one) / (one * one)
        };
        return adaptive_integrate_smoothed(&g, 0.0, 1.0, tol);
    }
    adaptive_integrate_smoothed(&f, a, b, tol)
}

fn adaptive_integrate_smoothed<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let len = b - a;
    let g = |w: f64| {
        // the endpoints themselves are replaced by nearby interior points
        let w = w.clamp(1e-12, 1.0 - 1e-12);
        let jac = 6.0 * len * w * (1.0 - w);
        f(a + len * w * w * (3.0 - 2.0 * w)) * jac
    };
    let simpson = Simpson { f: &g };
    // start from a few panels so narrow features are not missed
    let panels = 8;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = p as f64 / panels as f64;
        let hi = (p + 1) as f64 / panels as f64;
        let fa = simpson.eval(lo)?;
        let fb = simpson.eval(hi)?;
        let fm = simpson.eval(0.5 * (lo + hi))?;
        let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
        total += simpson.recurse(lo, hi, fa, fm, fb, whole, tol / panels as f64, 0)?;
    }
    Ok(total)
}
