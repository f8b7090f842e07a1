//! The flow-frozen Gaussian proxy p̃(t,s,x,y), its spatial derivatives, and
//! the Gaussian majorant p̄.
//!
//! As a function of the starting point x the proxy is the Gaussian density
//! g_C(θ − x) with θ = θ_{t,s}(y) and C = ∫_t^s a(u, θ_{u,s}(y)) du. Writing
//! P = C⁻¹ and v = P(x − θ), every derivative is g times a sum over partial
//! matchings of the differentiation indices, with a factor −P_ab for each
//! matched pair and −v_c for each unmatched index.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::coeffs::DiffusionSpec;
use crate::error::{Error, Result};
use crate::flow::{flow_point, Trajectory};
use crate::oracle::linear_gaussian_moments;
use crate::quadrature::gauss_legendre;

pub const DEFAULT_COV_NODES: usize = 16;
const EIGEN_SLACK: f64 = 1e-6;

/// Mean and covariance of the proxy Gaussian at (t, s, x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMoments {
    /// x + y − θ_{t,s}(y).
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub span: (f64, f64),
    /// Terminal point (s, y) the coefficients are frozen along.
    pub frozen_at: (f64, Vec<f64>),
    /// θ_{t,s}(y).
    pub theta: Vec<f64>,
}

/// Precomputed Gaussian g_C(θ − x) as a function of x.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub theta: Vec<f64>,
    /// Row-major inverse covariance.
    pub prec: Vec<f64>,
    /// (2π)^{-d/2} det(C)^{-1/2}.
    pub norm: f64,
}

impl Gaussian {
    pub fn new(theta: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = theta.len();
        if d == 1 {
            let c = cov[(0, 0)];
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::NonSpd(format!("variance {c}")));
            }
            return Ok(Self {
                theta,
                prec: vec![1.0 / c],
                norm: 1.0 / (2.0 * std::f64::consts::PI * c).sqrt(),
            });
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonSpd("covariance has no Cholesky factor".into()))?;
        let det: f64 = chol.l().diagonal().iter().map(|v| v * v).product();
        let inv = chol.inverse();
        let mut prec = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                prec[i * d + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            }
        }
        Ok(Self {
            theta,
            prec,
            norm: 1.0 / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// v = P(x − θ) written into `v`; returns the density g.
    #[inline]
    pub fn eval_v(&self, x: &[f64], v: &mut [f64]) -> f64 {
        let d = self.theta.len();
        if d == 1 {
            let dx = x[0] - self.theta[0];
            v[0] = self.prec[0] * dx;
            return self.norm * (-0.5 * dx * v[0]).exp();
        }
        let mut q = 0.0;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.prec[i * d + j] * (x[j] - self.theta[j]);
            }
            v[i] = acc;
            q += acc * (x[i] - self.theta[i]);
        }
        self.norm * (-0.5 * q).exp()
    }

    #[inline]
    pub fn density(&self, x: &[f64]) -> f64 {
        let mut v = [0.0; 12];
        self.eval_v(x, &mut v[..self.theta.len()])
    }

    /// ∂_{i1}…∂_{in} g at x for n ≤ 4 (indices zero-based, repeats allowed).
    pub fn derivative(&self, x: &[f64], indices: &[usize]) -> Result<f64> {
        if indices.len() > 4 {
            return Err(Error::UnsupportedOrder(indices.len()));
        }
        let d = self.dim();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad + 1,
            });
        }
        let mut v = vec![0.0; d];
        let g = self.eval_v(x, &mut v);
        Ok(g * matching_sum(indices, &v, &self.prec, d))
    }

    /// ½ Σ A_ij ∂_ij g + Σ B_i ∂_i g at x, with A row-major.
    #[inline]
    pub fn second_order_action(&self, x: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let d = self.theta.len();
        if d == 1 {
            let dx = x[0] - self.theta[0];
            let p = self.prec[0];
            let v = p * dx;
            let g = self.norm * (-0.5 * dx * v).exp();
            return g * (0.5 * a[0] * (v * v - p) - b[0] * v);
        }
        let mut v = [0.0; 12];
        let g = self.eval_v(x, &mut v[..d]);
        let mut acc = 0.0;
        for i in 0..d {
            acc -= b[i] * v[i];
            for j in 0..d {
                acc += 0.5 * a[i * d + j] * (v[i] * v[j] - self.prec[i * d + j]);
            }
        }
        g * acc
    }
}

/// Σ over partial matchings of `idx` of Π(−P_ab) over pairs × Π(−v_c) over
/// unmatched indices.
fn matching_sum(idx: &[usize], v: &[f64], prec: &[f64], d: usize) -> f64 {
    match idx.split_first() {
        None => 1.0,
        Some((&first, rest)) => {
            // `first` stays unmatched
            let mut total = -v[first] * matching_sum(rest, v, prec, d);
            // or is paired with one of the remaining indices
            for k in 0..rest.len() {
                let mut others: Vec<usize> = Vec::with_capacity(rest.len() - 1);
                others.extend_from_slice(&rest[..k]);
                others.extend_from_slice(&rest[k + 1..]);
                total -= prec[first * d + rest[k]] * matching_sum(&others, v, prec, d);
            }
            total
        }
    }
}

/// ∫_t^s a(u, θ_{u,s}(y)) du by `n` Gauss–Legendre nodes along a trajectory.
pub fn frozen_covariance(spec: &DiffusionSpec, traj: Option<&Trajectory>, t: f64, s: f64, n: usize) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    if spec.has_constant_diffusion() {
        return Ok(spec.cov(t, &vec![0.0; d])? * (s - t));
    }
    let rule = gauss_legendre(n);
    let mut acc = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    let mut scratch = vec![0.0; d * d];
    let mut a = vec![0.0; d * d];
    for (u, w) in rule.mapped(t, s) {
        match traj {
            Some(tr) => tr.at_into(u, &mut z)?,
            None => return Err(Error::Config("trajectory required for state-dependent diffusion".into())),
        }
        spec.cov_into(u, &z, &mut scratch, &mut a)?;
        for k in 0..d * d {
            acc[k] += w * a[k];
        }
    }
    let m = DMatrix::from_row_slice(d, d, &acc);
    Ok((&m + m.transpose()) * 0.5)
}

fn check_eigen(cov: &DMatrix<f64>, lambda: f64, tau: f64) -> Result<()> {
    let (lo, hi) = if cov.nrows() == 1 {
        (cov[(0, 0)], cov[(0, 0)])
    } else {
        let e = SymmetricEigen::new(cov.clone()).eigenvalues;
        (e.min(), e.max())
    };
    let min_ok = tau / lambda * (1.0 - EIGEN_SLACK);
    let max_ok = lambda * tau * (1.0 + EIGEN_SLACK);
    if lo < min_ok || hi > max_ok || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonSpd(format!(
            "eigenvalues [{lo}, {hi}] outside [{min_ok}, {max_ok}]"
        )));
    }
    Ok(())
}

/// θ_{t,s}(y) and the frozen covariance, from one backward integration.
pub fn frozen_pair(spec: &DiffusionSpec, t: f64, s: f64, y: &[f64], n_quad: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !(t < s) {
        return Err(Error::DegenerateInterval { t, s });
    }
    if y.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            found: y.len(),
        });
    }
    if spec.has_zero_drift() && spec.has_constant_diffusion() {
        return Ok((y.to_vec(), frozen_covariance(spec, None, t, s, n_quad)?));
    }
    let traj = if spec.has_zero_drift() {
        None
    } else {
        Some(Trajectory::solve(spec, s, t, y)?)
    };
    let theta = match &traj {
        Some(tr) => tr.terminal().to_vec(),
        None => y.to_vec(),
    };
    let cov = if spec.has_constant_diffusion() {
        frozen_covariance(spec, None, t, s, n_quad)?
    } else if let Some(tr) = &traj {
        frozen_covariance(spec, Some(tr), t, s, n_quad)?
    } else {
        // zero drift: the flow is constant, θ_{u,s}(y) = y
        let still = Trajectory::solve(spec, s, s, y)?;
        let d = spec.dim();
        let rule = gauss_legendre(n_quad);
        let mut acc = DMatrix::zeros(d, d);
        for (u, w) in rule.mapped(t, s) {
            acc += spec.cov(u, still.terminal())? * w;
        }
        acc
    };
    Ok((theta, cov))
}

pub fn proxy_moments(spec: &DiffusionSpec, t: f64, s: f64, x: &[f64], y: &[f64], n_quad: usize) -> Result<ProxyMoments> {
    if n_quad < 8 {
        return Err(Error::InvalidParam {
            name: "n_quad".into(),
            reason: "must be at least 8".into(),
        });
    }
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            found: x.len(),
        });
    }
    let (theta, cov) = frozen_pair(spec, t, s, y, n_quad)?;
    check_eigen(&cov, spec.ellipticity(), s - t)?;
    let mean = DVector::from_iterator(spec.dim(), (0..spec.dim()).map(|i| x[i] + y[i] - theta[i]));
    Ok(ProxyMoments {
        mean,
        cov,
        span: (t, s),
        frozen_at: (s, y.to_vec()),
        theta,
    })
}

impl ProxyMoments {
    pub fn gaussian(&self) -> Result<Gaussian> {
        Gaussian::new(self.theta.clone(), &self.cov)
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        if y != self.frozen_at.1.as_slice() {
            return Err(Error::InvalidParam {
                name: "y".into(),
                reason: "differs from the terminal point the moments were frozen at".into(),
            });
        }
        Ok(())
    }
}

/// p̃(t,s,x,y): the N(mean, cov) density at y, i.e. g_C(θ_{t,s}(y) − x).
pub fn proxy_density(moments: &ProxyMoments, x: &[f64], y: &[f64]) -> Result<f64> {
    moments.check_y(y)?;
    Ok(moments.gaussian()?.density(x))
}

/// ∂^ν_x p̃(t,s,x,y), where ν[i] is the order in x_i and |ν| ≤ 4.
pub fn proxy_derivative(moments: &ProxyMoments, x: &[f64], y: &[f64], nu: &[usize]) -> Result<f64> {
    let order: usize = nu.iter().sum();
    if order > 4 {
        return Err(Error::UnsupportedOrder(order));
    }
    if nu.len() != moments.theta.len() {
        return Err(Error::DimensionMismatch {
            expected: moments.theta.len(),
            found: nu.len(),
        });
    }
    moments.check_y(y)?;
    let indices: Vec<usize> = nu.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat_n(i, k)).collect();
    moments.gaussian()?.derivative(x, &indices)
}

/// Parameters of the Gaussian majorant p̄.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorantParams {
    /// Diffusion level λ of the auxiliary process dX̄ = b dt + λ dW.
    pub lambda: f64,
    /// Exponent constant C_p in exp(−|θ − x|² / (C_p (s − t))).
    pub c_gauss: f64,
    pub c_front: f64,
}

impl MajorantParams {
    /// λ² = 4Λ, C_p = 2λ², unit prefactor.
    pub fn for_spec(spec: &DiffusionSpec) -> Self {
        Self::with_lambda(2.0 * spec.ellipticity().sqrt())
    }

    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            c_gauss: 2.0 * lambda * lambda,
            c_front: 1.0,
        }
    }

    pub fn validate(&self, spec: &DiffusionSpec) -> Result<()> {
        let bad = |name: &str, reason: &str| {
            Err(Error::InvalidParam {
                name: name.into(),
                reason: reason.into(),
            })
        };
        if !(self.lambda > 0.0) || !(self.c_front > 0.0) {
            return bad("lambda", "lambda and c_front must be positive");
        }
        let _ = spec;
        if self.c_gauss < 2.0 * self.lambda * self.lambda * (1.0 - 1e-12) {
            return bad("c_gauss", "must be at least 2 lambda^2");
        }
        Ok(())
    }
}

/// p̄(t,s,x,y). For a declared linear drift G_u x this is the exact
/// auxiliary density N(R(s,t)x, λ²∫R R* du) at y; otherwise the normalized
/// surrogate c_front (π C_p (s−t))^{-d/2} exp(−|θ_{t,s}(y) − x|² / (C_p (s−t))).
pub fn majorant_density(params: &MajorantParams, spec: &DiffusionSpec, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(t < s) {
        return Err(Error::DegenerateInterval { t, s });
    }
    let d = spec.dim();
    if x.len() != d || y.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: if x.len() != d { x.len() } else { y.len() },
        });
    }
    if spec.linear_drift().is_some() {
        let lm = LinearMajorant::new(params, spec, t, s)?;
        return Ok(lm.density(x, y));
    }
    let theta = flow_point(spec, t, s, y)?;
    Ok(surrogate_majorant(params, s - t, &theta, x))
}

/// The normalized Gaussian surrogate given θ_{t,s}(y).
#[inline]
pub fn surrogate_majorant(params: &MajorantParams, tau: f64, theta: &[f64], x: &[f64]) -> f64 {
    let d = theta.len() as i32;
    let dist2: f64 = theta.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let scale = params.c_gauss * tau;
    params.c_front * (std::f64::consts::PI * scale).powi(-d).sqrt() * (-dist2 / scale).exp()
}

/// Exact majorant for linear drift, reusable across (x, y).
#[derive(Debug, Clone)]
pub struct LinearMajorant {
    resolvent: DMatrix<f64>,
    gauss: Gaussian,
    c_front: f64,
}

impl LinearMajorant {
    pub fn new(params: &MajorantParams, spec: &DiffusionSpec, t: f64, s: f64) -> Result<Self> {
        let d = spec.dim();
        let g = |u: f64| -> Result<DMatrix<f64>> {
            spec.linear_drift_matrix(u)?
                .ok_or_else(|| Error::Config("linear drift not declared".into()))
        };
        let a = DMatrix::<f64>::identity(d, d) * (params.lambda * params.lambda);
        let (r, k) = linear_gaussian_moments(&g, &a, t, s)?;
        Ok(Self {
            resolvent: r,
            gauss: Gaussian::new(vec![0.0; d], &k)?,
            c_front: params.c_front,
        })
    }

    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = x.len();
        let mut diff = [0.0; 12];
        for i in 0..d {
            let mut m = 0.0;
            for j in 0..d {
                m += self.resolvent[(i, j)] * x[j];
            }
            diff[i] = y[i] - m;
        }
        self.c_front * self.gauss.density(&diff[..d])
    }
}
