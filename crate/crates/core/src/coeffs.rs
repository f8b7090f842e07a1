//! Diffusion coefficient models and empirical audits of the standing
//! assumptions: uniform ellipticity, Hölder/Lipschitz regularity with
//! linear growth, and closeness of a perturbed drift to the base drift.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{parse_expr, Expr};
use crate::rng::{halton, CounterRng};

/// Regularity constants declared for a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Hölder exponent of the diffusion coefficient, in (0, 1].
    pub gamma: f64,
    /// Lipschitz / growth constant K > 0.
    pub lipschitz_k: f64,
    /// Ellipticity constant Λ ≥ 1.
    pub ellipticity: f64,
    /// Time horizon T > 0.
    pub horizon: f64,
}

impl Constants {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: &str| {
            Err(Error::InvalidParam {
                name: name.into(),
                reason: reason.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(self.lipschitz_k > 0.0) || !self.lipschitz_k.is_finite() {
            return bad("lipschitz_k", "must be positive");
        }
        if !(self.ellipticity >= 1.0) || !self.ellipticity.is_finite() {
            return bad("ellipticity", "must be at least 1");
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon", "must be positive");
        }
        Ok(())
    }
}

/// Coefficients `b(t, x)`, `σ(t, x)` of `dX = b dt + σ dW` in dimension `d`,
/// together with their declared regularity constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    name: String,
    dim: usize,
    drift: Vec<Expr>,
    /// Row-major d×d.
    diffusion: Vec<Expr>,
    constants: Constants,
    /// Row-major d×d matrix G(t) when the drift is exactly `G(t) x`.
    linear_drift: Option<Vec<Expr>>,
    /// Times where the coefficients may fail to be smooth in t.
    time_breakpoints: Vec<f64>,
    zero_drift: bool,
    space_homogeneous: bool,
}

impl DiffusionSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: Vec<Expr>,
        diffusion: Vec<Expr>,
        constants: Constants,
    ) -> Result<Self> {
        constants.validate()?;
        if dim == 0 {
            return Err(Error::InvalidParam {
                name: "dim".into(),
                reason: "must be positive".into(),
            });
        }
        if drift.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: drift.len(),
            });
        }
        if diffusion.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: diffusion.len(),
            });
        }
        for e in drift.iter().chain(&diffusion) {
            let need = e.required_dim();
            if need > dim {
                return Err(Error::UnknownIdentifier {
                    name: format!("x{}", need),
                    offset: 0,
                });
            }
        }
        let zero_drift = drift.iter().all(|e| e.as_constant() == Some(0.0));
        let space_homogeneous = drift
            .iter()
            .chain(&diffusion)
            .all(|e| !e.depends_on_space());
        Ok(Self {
            name: name.into(),
            dim,
            drift,
            diffusion,
            constants,
            linear_drift: None,
            time_breakpoints: Vec::new(),
            zero_drift,
            space_homogeneous,
        })
    }

    /// Builds a spec from expression sources.
    pub fn from_sources(
        name: impl Into<String>,
        dim: usize,
        drift: &[&str],
        diffusion: &[&str],
        constants: Constants,
    ) -> Result<Self> {
        let drift = drift.iter().map(|s| parse_expr(s)).collect::<Result<Vec<_>>>()?;
        let diffusion = diffusion
            .iter()
            .map(|s| parse_expr(s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, dim, drift, diffusion, constants)
    }

    /// Declares that the drift equals `G(t) x` for the given row-major matrix
    /// of time-only expressions. Enables the exact resolvent majorant.
    pub fn with_linear_drift(mut self, g: Vec<Expr>) -> Result<Self> {
        if g.len() != self.dim * self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim * self.dim,
                found: g.len(),
            });
        }
        if g.iter().any(|e| e.depends_on_space()) {
            return Err(Error::InvalidParam {
                name: "linear_drift".into(),
                reason: "matrix entries may depend on t only".into(),
            });
        }
        self.linear_drift = Some(g);
        Ok(self)
    }

    /// Declares times where the coefficients have kinks in t; flow
    /// integration aligns its steps with them.
    pub fn with_time_breakpoints(mut self, mut times: Vec<f64>) -> Self {
        times.retain(|v| v.is_finite());
        times.sort_by(f64::total_cmp);
        times.dedup();
        self.time_breakpoints = times;
        self
    }

    pub fn time_breakpoints(&self) -> &[f64] {
        &self.time_breakpoints
    }

    /// True when σ depends on neither t nor x.
    pub fn has_constant_diffusion(&self) -> bool {
        self.diffusion.iter().all(|e| e.as_constant().is_some())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constants(&self) -> &Constants {
        &self.constants
    }

    pub fn gamma(&self) -> f64 {
        self.constants.gamma
    }

    pub fn ellipticity(&self) -> f64 {
        self.constants.ellipticity
    }

    pub fn lipschitz_k(&self) -> f64 {
        self.constants.lipschitz_k
    }

    pub fn horizon(&self) -> f64 {
        self.constants.horizon
    }

    pub fn drift_exprs(&self) -> &[Expr] {
        &self.drift
    }

    pub fn diffusion_exprs(&self) -> &[Expr] {
        &self.diffusion
    }

    pub fn has_zero_drift(&self) -> bool {
        self.zero_drift
    }

    /// True when neither coefficient depends on the spatial variable, in
    /// which case the parametrix kernel vanishes identically.
    pub fn is_space_homogeneous(&self) -> bool {
        self.space_homogeneous
    }

    pub fn linear_drift(&self) -> Option<&[Expr]> {
        self.linear_drift.as_deref()
    }

    pub fn linear_drift_matrix(&self, t: f64) -> Result<Option<DMatrix<f64>>> {
        match &self.linear_drift {
            None => Ok(None),
            Some(g) => {
                let d = self.dim;
                let mut m = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] = g[i * d + j].eval(t, &[])?;
                    }
                }
                Ok(Some(m))
            }
        }
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if self.zero_drift {
            out.iter_mut().for_each(|v| *v = 0.0);
            return Ok(());
        }
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(t, x)?;
        }
        Ok(())
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(t, x, &mut out)?;
        Ok(out)
    }

    /// σ(t, x), row-major.
    #[inline]
    pub fn sigma_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.diffusion) {
            *o = e.eval(t, x)?;
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut buf = vec![0.0; self.dim * self.dim];
        self.sigma_into(t, x, &mut buf)?;
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &buf))
    }

    /// a = σσ*, row-major, using `scratch` (len d²) for σ.
    #[inline]
    pub fn cov_into(&self, t: f64, x: &[f64], scratch: &mut [f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        if d == 1 {
            let s = self.diffusion[0].eval(t, x)?;
            out[0] = s * s;
            return Ok(());
        }
        self.sigma_into(t, x, scratch)?;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| scratch[i * d + k] * scratch[j * d + k]).sum();
            }
        }
        Ok(())
    }

    pub fn cov(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim;
        let mut scratch = vec![0.0; d * d];
        let mut out = vec![0.0; d * d];
        self.cov_into(t, x, &mut scratch, &mut out)?;
        Ok(DMatrix::from_row_slice(d, d, &out))
    }

    /// Same coefficients with replaced constants.
    pub fn with_constants(mut self, constants: Constants) -> Result<Self> {
        constants.validate()?;
        self.constants = constants;
        Ok(self)
    }
}

/// A built-in model is either a single diffusion or a (base, perturbed) pair.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinModel {
    Single(DiffusionSpec),
    Pair {
        base: DiffusionSpec,
        perturbed: DiffusionSpec,
        epsilon: f64,
    },
}

impl BuiltinModel {
    pub fn single(self) -> Result<DiffusionSpec> {
        match self {
            BuiltinModel::Single(s) => Ok(s),
            BuiltinModel::Pair { .. } => Err(Error::Config(
                "model is a perturbation pair; a single diffusion was expected".into(),
            )),
        }
    }

    pub fn pair(self) -> Result<(DiffusionSpec, DiffusionSpec, f64)> {
        match self {
            BuiltinModel::Pair {
                base,
                perturbed,
                epsilon,
            } => Ok((base, perturbed, epsilon)),
            BuiltinModel::Single(_) => Err(Error::Config(
                "model is a single diffusion; a perturbation pair was expected".into(),
            )),
        }
    }
}

pub const BUILTIN_NAMES: [&str; 5] = ["heat", "linear_drift", "ou", "variable_sigma", "oscillating_pair"];

fn param(params: &BTreeMap<String, f64>, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) if v.is_finite() => Ok(*v),
        Some(_) => Err(Error::InvalidParam {
            name: key.into(),
            reason: "must be finite".into(),
        }),
        None => default.ok_or_else(|| Error::MissingParam(key.into())),
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(Error::InvalidParam {
            name: name.into(),
            reason: "must be positive".into(),
        })
    }
}

fn dim_param(params: &BTreeMap<String, f64>) -> Result<usize> {
    let d = param(params, "d", Some(1.0))?;
    if d < 1.0 || d.fract() != 0.0 || d > 12.0 {
        return Err(Error::InvalidParam {
            name: "d".into(),
            reason: "must be an integer in 1..=12".into(),
        });
    }
    Ok(d as usize)
}

fn scaled_identity(d: usize, value: f64) -> Vec<Expr> {
    (0..d * d)
        .map(|k| Expr::constant(if k / d == k % d { value } else { 0.0 }))
        .collect()
}

/// The oscillating drift perturbation `exp(-t²/(qε)) |sin(t/√ε)|^(2/q) cos(x1)`.
///
/// The fractional power is applied to |sin|, which keeps the perturbation
/// nonnegative in its time factor and defined for every t.
pub fn oscillating_perturbation_source(eps: f64, q: f64) -> String {
    format!(
        "exp(-t^2/({q:?}*{eps:?}))*abs(sin(t/sqrt({eps:?})))^(2/{q:?})*cos(x1)",
        q = q,
        eps = eps
    )
}

/// Instantiates a named model.
///
/// * `heat {d}`: b = 0, σ = I.
/// * `linear_drift {d, slope, sigma}`: b = slope·x, σ = sigma·I.
/// * `ou {d, sigma}`: alias of `linear_drift` with slope 1.
/// * `variable_sigma {amp}`: d = 1, b = cos(x), σ = sqrt(1 + amp·sin²x).
/// * `oscillating_pair {eps, q, sigma}`: base b = x; perturbed
///   b_ε = x + exp(-t²/(qε)) |sin(t/√ε)|^(2/q) cos(x); σ = σ_ε = sigma.
///
/// Every model accepts `T` (horizon, default 1).
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<BuiltinModel> {
    let horizon = positive("T", param(params, "T", Some(1.0))?)?;
    match name {
        "heat" => {
            let d = dim_param(params)?;
            let spec = DiffusionSpec::new(
                "heat",
                d,
                vec![Expr::constant(0.0); d],
                scaled_identity(d, 1.0),
                Constants {
                    gamma: 1.0,
                    lipschitz_k: 1.0,
                    ellipticity: 1.0,
                    horizon,
                },
            )?
            .with_linear_drift(vec![Expr::constant(0.0); d * d])?;
            Ok(BuiltinModel::Single(spec))
        }
        "linear_drift" | "ou" => {
            let d = dim_param(params)?;
            let slope = if name == "ou" {
                1.0
            } else {
                param(params, "slope", Some(1.0))?
            };
            let sigma = positive("sigma", param(params, "sigma", Some(1.0))?)?;
            let drift = (0..d)
                .map(|i| {
                    Expr::binary(crate::expr::BinaryOp::Mul, Expr::constant(slope), Expr::x(i))
                })
                .collect();
            let lambda = (sigma * sigma).max(1.0 / (sigma * sigma));
            let spec = DiffusionSpec::new(
                name,
                d,
                drift,
                scaled_identity(d, sigma),
                Constants {
                    gamma: 1.0,
                    lipschitz_k: slope.abs().max(f64::MIN_POSITIVE.sqrt()),
                    ellipticity: lambda,
                    horizon,
                },
            )?
            .with_linear_drift(scaled_identity(d, slope))?;
            Ok(BuiltinModel::Single(spec))
        }
        "variable_sigma" => {
            let amp = param(params, "amp", Some(0.5))?;
            if !(amp >= 0.0) {
                return Err(Error::InvalidParam {
                    name: "amp".into(),
                    reason: "must be nonnegative".into(),
                });
            }
            let sigma = format!("sqrt(1+{:?}*sin(x1)^2)", amp);
            let spec = DiffusionSpec::from_sources(
                "variable_sigma",
                1,
                &["cos(x1)"],
                &[&sigma],
                Constants {
                    gamma: 1.0,
                    lipschitz_k: 1.0_f64.max((amp / 2.0).sqrt().max(amp.sqrt() / 2.0)),
                    ellipticity: 1.0 + amp,
                    horizon,
                },
            )?;
            Ok(BuiltinModel::Single(spec))
        }
        "oscillating_pair" => {
            let eps = positive("eps", param(params, "eps", None)?)?;
            let q = param(params, "q", None)?;
            if !(q >= 2.0) {
                return Err(Error::InvalidParam {
                    name: "q".into(),
                    reason: "must satisfy q >= 2".into(),
                });
            }
            let sigma = positive("sigma", param(params, "sigma", Some(1.0))?)?;
            let lambda = (sigma * sigma).max(1.0 / (sigma * sigma));
            // (A2) bounds the sum over base and perturbed: 1 + (1 + 1) and |b(t,0)| + |b_ε(t,0)| ≤ 1
            let constants = Constants {
                gamma: 1.0,
                lipschitz_k: 3.0,
                ellipticity: lambda,
                horizon,
            };
            let sig = format!("{:?}", sigma);
            let base = DiffusionSpec::from_sources("oscillating_base", 1, &["x1"], &[&sig], constants)?
                .with_linear_drift(vec![Expr::constant(1.0)])?;
            let pert = format!("x1+{}", oscillating_perturbation_source(eps, q));
            // zeros of sin(t/√ε) are kinks of |sin|^(2/q)
            let period = std::f64::consts::PI * eps.sqrt();
            let kinks = (0..=(horizon / period).ceil() as usize)
                .map(|k| k as f64 * period)
                .collect();
            let perturbed =
                DiffusionSpec::from_sources("oscillating_perturbed", 1, &[&pert], &[&sig], constants)?
                    .with_time_breakpoints(kinks);
            Ok(BuiltinModel::Pair {
                base,
                perturbed,
                epsilon: eps,
            })
        }
        other => Err(Error::UnknownModel(other.into())),
    }
}

/// Convenience wrapper taking `(key, value)` pairs.
pub fn builtin(name: &str, params: &[(&str, f64)]) -> Result<BuiltinModel> {
    let map = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    builtin_model(name, &map)
}

/// A point (t, x) of the audit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

/// A pair of spatial points at a common time, for Hölder/Lipschitz ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePair {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Tensor grid of `n_time` nodes on [0, T] times `n_space` nodes per axis on
/// [-half_width, half_width]^d.
pub fn audit_grid(dim: usize, horizon: f64, n_time: usize, n_space: usize, half_width: f64) -> Vec<AuditPoint> {
    let times: Vec<f64> = (0..n_time)
        .map(|i| if n_time == 1 { 0.0 } else { horizon * i as f64 / (n_time - 1) as f64 })
        .collect();
    let axis: Vec<f64> = (0..n_space)
        .map(|i| {
            if n_space == 1 {
                0.0
            } else {
                -half_width + 2.0 * half_width * i as f64 / (n_space - 1) as f64
            }
        })
        .collect();
    let total = n_space.pow(dim as u32);
    let mut out = Vec::with_capacity(n_time * total);
    for &t in &times {
        for flat in 0..total {
            let mut rem = flat;
            let x = (0..dim)
                .map(|_| {
                    let v = axis[rem % n_space];
                    rem /= n_space;
                    v
                })
                .collect();
            out.push(AuditPoint { t, x });
        }
    }
    out
}

/// Default grid: 21 time nodes × 41 nodes per axis on [0,T]×[-5,5]^d.
pub fn default_audit_grid(dim: usize, horizon: f64) -> Vec<AuditPoint> {
    audit_grid(dim, horizon, 21, 41, 5.0)
}

/// Low-discrepancy probe pairs: base points from a Halton cloud over
/// [0,T]×[-half_width, half_width]^d, partners at distances 2^-k, k = 0..5,
/// in seeded random directions.
pub fn probe_pairs(dim: usize, horizon: f64, half_width: f64, count: usize, seed: u64) -> Vec<ProbePair> {
    let mut rng = CounterRng::new(seed);
    (0..count)
        .map(|i| {
            let h = halton(i as u64, dim + 1);
            let t = horizon * h[0];
            let x: Vec<f64> = h[1..].iter().map(|u| -half_width + 2.0 * half_width * u).collect();
            let radius = 0.5f64.powi((i % 6) as i32);
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            dir.iter_mut().for_each(|v| *v *= radius / norm);
            let y = x.iter().zip(&dir).map(|(a, b)| a + b).collect();
            ProbePair { t, x, y }
        })
        .collect()
}

pub fn default_probe_pairs(dim: usize, horizon: f64) -> Vec<ProbePair> {
    probe_pairs(dim, horizon, 5.0, 512, 0x5eed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionFlags {
    pub ellipticity: bool,
    pub holder_sigma: bool,
    pub lipschitz_b: bool,
    pub growth_b: bool,
    pub flow_closeness: bool,
}

impl AssumptionFlags {
    pub fn all(&self) -> bool {
        self.ellipticity && self.holder_sigma && self.lipschitz_b && self.growth_b && self.flow_closeness
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// [min, max] eigenvalue of a = σσ* over the audit grid.
    pub ellipticity_range: [f64; 2],
    pub holder_const_sigma: f64,
    pub lipschitz_const_b: f64,
    pub growth_const: f64,
    /// sup ∫_t^s |b_ε − b| du / √(s − t); only for pairs.
    pub flow_closeness_const: Option<f64>,
    pub passed: AssumptionFlags,
}

const AUDIT_SLACK: f64 = 1e-9;

fn eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 1 {
        return (a[(0, 0)], a[(0, 0)]);
    }
    let e = SymmetricEigen::new(a.clone()).eigenvalues;
    (e.min(), e.max())
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

struct Measured {
    eig: (f64, f64),
    holder: f64,
    lipschitz: f64,
    growth: f64,
}

fn measure(specs: &[&DiffusionSpec], grid: &[AuditPoint], probes: &[ProbePair]) -> Result<Measured> {
    let gamma = specs[0].gamma();
    let mut eig = (f64::INFINITY, f64::NEG_INFINITY);
    let mut growth: f64 = 0.0;
    for p in grid {
        let mut g = 0.0;
        for s in specs {
            let (lo, hi) = eig_range(&s.cov(p.t, &p.x)?);
            eig = (eig.0.min(lo), eig.1.max(hi));
            g += norm(&s.drift(p.t, &p.x)?);
        }
        growth = growth.max(g / (1.0 + norm(&p.x)));
    }
    let (mut holder, mut lipschitz): (f64, f64) = (0.0, 0.0);
    for pp in probes {
        let r = dist(&pp.x, &pp.y);
        if r == 0.0 {
            continue;
        }
        let (mut hs, mut lb) = (0.0, 0.0);
        for s in specs {
            hs += (s.sigma(pp.t, &pp.x)? - s.sigma(pp.t, &pp.y)?).norm();
            let bx = s.drift(pp.t, &pp.x)?;
            let by = s.drift(pp.t, &pp.y)?;
            lb += dist(&bx, &by);
        }
        holder = holder.max(hs / r.powf(gamma));
        lipschitz = lipschitz.max(lb / r);
    }
    Ok(Measured {
        eig,
        holder,
        lipschitz,
        growth,
    })
}

fn flags(m: &Measured, c: &Constants, closeness: bool) -> AssumptionFlags {
    let lam = c.ellipticity;
    AssumptionFlags {
        ellipticity: m.eig.0 >= 1.0 / lam - AUDIT_SLACK && m.eig.1 <= lam + AUDIT_SLACK,
        holder_sigma: m.holder <= c.lipschitz_k + AUDIT_SLACK,
        lipschitz_b: m.lipschitz <= c.lipschitz_k + AUDIT_SLACK,
        growth_b: m.growth <= c.lipschitz_k + AUDIT_SLACK,
        flow_closeness: closeness,
    }
}

/// Empirical audit of ellipticity, regularity and growth for one model.
pub fn check_assumptions(
    spec: &DiffusionSpec,
    grid: &[AuditPoint],
    probes: &[ProbePair],
) -> Result<AssumptionReport> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid("audit grid"));
    }
    if probes.is_empty() {
        return Err(Error::EmptyGrid("probe pairs"));
    }
    let m = measure(&[spec], grid, probes)?;
    Ok(AssumptionReport {
        ellipticity_range: [m.eig.0, m.eig.1],
        holder_const_sigma: m.holder,
        lipschitz_const_b: m.lipschitz,
        growth_const: m.growth,
        flow_closeness_const: None,
        passed: flags(&m, spec.constants(), true),
    })
}

/// sup over grid points x and time pairs t < s of ∫_t^s |b_ε(u,x) − b(u,x)| du / √(s−t).
///
/// The time integral uses composite 8-point Gauss–Legendre panels of width at most `panel`.
pub fn flow_closeness_constant(
    base: &DiffusionSpec,
    perturbed: &DiffusionSpec,
    xs: &[Vec<f64>],
    times: &[f64],
    panel: f64,
) -> Result<f64> {
    if xs.is_empty() || times.len() < 2 {
        return Err(Error::EmptyGrid("flow closeness grid"));
    }
    let rule = crate::quadrature::gauss_legendre(8);
    let mut best: f64 = 0.0;
    for x in xs {
        // cumulative integral at each grid time
        let mut cum = vec![0.0; times.len()];
        for k in 1..times.len() {
            let (a, b) = (times[k - 1], times[k]);
            let panels = ((b - a) / panel).ceil().max(1.0) as usize;
            let h = (b - a) / panels as f64;
            let mut acc = 0.0;
            for p in 0..panels {
                let lo = a + h * p as f64;
                for (u, w) in rule.mapped(lo, lo + h) {
                    let d = dist(&base.drift(u, x)?, &perturbed.drift(u, x)?);
                    acc += w * d;
                }
            }
            cum[k] = cum[k - 1] + acc;
        }
        for i in 0..times.len() {
            for j in (i + 1)..times.len() {
                let ratio = (cum[j] - cum[i]) / (times[j] - times[i]).sqrt();
                best = best.max(ratio);
            }
        }
    }
    Ok(best)
}

/// Audit of a (base, perturbed) pair: constants of (A2) are summed over both
/// models, ellipticity is checked for both, and the flow closeness constant
/// of (A3) is estimated on the distinct grid points.
pub fn check_pair_assumptions(
    base: &DiffusionSpec,
    perturbed: &DiffusionSpec,
    grid: &[AuditPoint],
    probes: &[ProbePair],
) -> Result<AssumptionReport> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid("audit grid"));
    }
    if probes.is_empty() {
        return Err(Error::EmptyGrid("probe pairs"));
    }
    if base.dim() != perturbed.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: perturbed.dim(),
        });
    }
    let m = measure(&[base, perturbed], grid, probes)?;
    let mut times: Vec<f64> = grid.iter().map(|p| p.t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    for p in grid {
        if !xs.contains(&p.x) {
            xs.push(p.x.clone());
        }
    }
    let c_theta = if times.len() >= 2 {
        flow_closeness_constant(base, perturbed, &xs, &times, 0.01)?
    } else {
        0.0
    };
    let mut report_flags = flags(&m, base.constants(), c_theta.is_finite());
    let lam = base.ellipticity().max(perturbed.ellipticity());
    report_flags.ellipticity = m.eig.0 >= 1.0 / lam - AUDIT_SLACK && m.eig.1 <= lam + AUDIT_SLACK;
    Ok(AssumptionReport {
        ellipticity_range: [m.eig.0, m.eig.1],
        holder_const_sigma: m.holder,
        lipschitz_const_b: m.lipschitz,
        growth_const: m.growth,
        flow_closeness_const: Some(c_theta),
        passed: report_flags,
    })
}
