//! The parametrix kernel H, the time-space convolution ⊗, and the truncated
//! series p = Σ_r p̃ ⊗ H^r.
//!
//! The series is evaluated layer by layer. With the start (t, x) fixed, each
//! layer L_r(u, z) = (p̃ ⊗ H^r)(t, u, x, z) is stored on slices
//! u_k = t + (s−t)(k/K)^{2/γ} in the scaled coordinates
//! z = c(u) + √(Λ(u−t)) ξ, where c is the forward flow from x. Stored values
//! are Q_r = (Λ(u−t))^{d/2} L_r, which stay bounded and smooth as u → t.
//! The next layer at a target (v, y') is
//!
//! ```text
//! L_{r+1}(v, y') = ∫_t^v du ∫ L_r(u, z) H(u, v, z, y') dz,
//! ```
//!
//! split at the midpoint of [t, v]. On the early half L_r is the narrow
//! factor, so z runs over the slice-aligned ξ grid and only the time
//! direction is interpolated. On the late half H is the narrow factor, so z
//! runs over a grid centred at θ_{u,v}(y') and L_r is interpolated in both
//! directions; the time variable there is u = v − (v−m)(1−ω)^{2/γ}, which
//! cancels the (v−u)^{γ/2−1} singularity of H. Both halves are linear in Q_r,
//! so they are assembled once as sparse rows and every layer is a product
//! of those rows with the previous layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::DiffusionSpec;
use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::proxy::{frozen_pair, majorant_density, Gaussian, MajorantParams, DEFAULT_COV_NODES};
use crate::quadrature::{gauss_legendre, trapezoid_grid};
use crate::rng::CounterRng;
pub use crate::special::{beta_fn, gamma_fn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadConfig {
    /// Time slices per layer and Gauss–Legendre nodes per half interval.
    pub n_time: usize,
    /// Spatial nodes per axis of the deterministic grid.
    pub n_space: usize,
    /// Monte Carlo samples per time node, used for d ≥ 3.
    pub n_mc: usize,
    pub mc_seed: u64,
    /// Spatial truncation radius in units of the local Gaussian width.
    pub space_radius: f64,
    /// Exponent κ of the endpoint substitution u = s − (s−t)(1−w)^{1/κ};
    /// `None` uses γ/2.
    pub singularity_power: Option<f64>,
    /// Gauss–Legendre nodes for frozen covariances.
    pub n_cov: usize,
    /// Upper limit on kernel evaluations for one request.
    pub budget: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            n_time: 24,
            n_space: 61,
            n_mc: 4096,
            mc_seed: 0x5eed,
            space_radius: 6.0,
            singularity_power: None,
            n_cov: DEFAULT_COV_NODES,
            budget: 2e9,
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: &str| {
            Err(Error::InvalidParam {
                name: name.into(),
                reason: reason.into(),
            })
        };
        if self.n_time < 8 {
            return bad("n_time", "must be at least 8");
        }
        if self.n_space < 5 {
            return bad("n_space", "must be at least 5");
        }
        if !(self.space_radius >= 5.0) || !self.space_radius.is_finite() {
            return bad("space_radius", "must be at least 5");
        }
        if let Some(k) = self.singularity_power {
            if !(k > 0.0 && k <= 1.0) {
                return bad("singularity_power", "must lie in (0, 1]");
            }
        }
        if self.n_cov < 8 {
            return bad("n_cov", "must be at least 8");
        }
        if self.n_mc < 16 {
            return bad("n_mc", "must be at least 16");
        }
        Ok(())
    }

    fn kappa(&self, gamma: f64) -> f64 {
        self.singularity_power.unwrap_or(0.5 * gamma)
    }

    /// Same rule with doubled time and space resolution.
    pub fn refined(&self) -> Self {
        Self {
            n_time: 2 * self.n_time,
            n_space: 2 * self.n_space - 1,
            ..*self
        }
    }
}

/// A function of (t, s, x, y) that can be convolved.
pub trait Kernel: Sync {
    fn eval(&self, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64>;
}

impl<F> Kernel for F
where
    F: Fn(f64, f64, &[f64], &[f64]) -> Result<f64> + Sync,
{
    fn eval(&self, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self(t, s, x, y)
    }
}

/// p̃ as a kernel.
pub struct ProxyKernel<'a>(pub &'a DiffusionSpec);

impl Kernel for ProxyKernel<'_> {
    fn eval(&self, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        let (theta, cov) = frozen_pair(self.0, t, s, y, DEFAULT_COV_NODES)?;
        Ok(Gaussian::new(theta, &cov)?.density(x))
    }
}

/// The parametrix kernel H as a kernel.
pub struct HKernel<'a>(pub &'a DiffusionSpec);

impl Kernel for HKernel<'_> {
    fn eval(&self, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        kernel_h(self.0, t, s, x, y)
    }
}

/// p̄ as a kernel.
pub struct MajorantKernel<'a>(pub &'a DiffusionSpec, pub MajorantParams);

impl Kernel for MajorantKernel<'_> {
    fn eval(&self, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        majorant_density(&self.1, self.0, t, s, x, y)
    }
}

/// Frozen data of H(u, v, ·, y'): the proxy Gaussian and the coefficients
/// at the flow point θ_{u,v}(y').
struct FrozenH {
    gauss: Gaussian,
    a_theta: Vec<f64>,
    b_theta: Vec<f64>,
}

impl FrozenH {
    fn new(spec: &DiffusionSpec, u: f64, theta: Vec<f64>, cov: &nalgebra::DMatrix<f64>) -> Result<Self> {
        let d = spec.dim();
        let mut a_theta = vec![0.0; d * d];
        let mut scratch = vec![0.0; d * d];
        spec.cov_into(u, &theta, &mut scratch, &mut a_theta)?;
        let b_theta = spec.drift(u, &theta)?;
        Ok(Self {
            gauss: Gaussian::new(theta, cov)?,
            a_theta,
            b_theta,
        })
    }

    /// H at z given a(u, z) and b(u, z).
    #[inline]
    fn eval(&self, z: &[f64], a_z: &[f64], b_z: &[f64], da: &mut [f64], db: &mut [f64]) -> f64 {
        for (o, (p, q)) in da.iter_mut().zip(a_z.iter().zip(&self.a_theta)) {
            *o = p - q;
        }
        for (o, (p, q)) in db.iter_mut().zip(b_z.iter().zip(&self.b_theta)) {
            *o = p - q;
        }
        self.gauss.second_order_action(z, da, db)
    }
}

/// H(t,s,x,y) = ½ Σ (a_ij(t,x) − a_ij(t,θ)) ∂²_{x_i x_j} p̃ + Σ (b_i(t,x) − b_i(t,θ)) ∂_{x_i} p̃
/// with θ = θ_{t,s}(y).
pub fn kernel_h(spec: &DiffusionSpec, t: f64, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
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
    if spec.is_space_homogeneous() {
        return Ok(0.0);
    }
    let (theta, cov) = frozen_pair(spec, t, s, y, DEFAULT_COV_NODES)?;
    let frozen = FrozenH::new(spec, t, theta, &cov)?;
    let mut a_x = vec![0.0; d * d];
    let mut scratch = vec![0.0; d * d];
    spec.cov_into(t, x, &mut scratch, &mut a_x)?;
    let b_x = spec.drift(t, x)?;
    Ok(frozen.eval(x, &a_x, &b_x, &mut scratch, &mut vec![0.0; d]))
}

/// Nodes and weights of ∫_t^s du split at the midpoint, with the power
/// substitution applied toward `s` on the late half and, if `both_ends`,
/// toward `t` on the early half.
fn split_time_rule(t: f64, s: f64, n: usize, kappa: f64, both_ends: bool) -> Vec<(f64, f64, bool)> {
    let rule = gauss_legendre(n);
    let m = 0.5 * (t + s);
    let half = m - t;
    let p = 1.0 / kappa;
    let mut out = Vec::with_capacity(2 * n);
    for (w, wt) in rule.mapped(0.0, 1.0) {
        if both_ends {
            out.push((t + half * w.powf(p), wt * half * p * w.powf(p - 1.0), true));
        } else {
            out.push((t + half * w, wt * half, true));
        }
    }
    for (w, wt) in rule.mapped(0.0, 1.0) {
        let one = 1.0 - w;
        out.push((s - half * one.powf(p), wt * half * p * one.powf(p - 1.0), false));
    }
    out
}

fn tensor_grid(d: usize, rule: &crate::quadrature::Rule) -> (Vec<f64>, Vec<f64>) {
    let n = rule.len();
    let total = n.pow(d as u32);
    let mut pts = Vec::with_capacity(total * d);
    let mut wts = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut w = 1.0;
        for _ in 0..d {
            let i = rem % n;
            rem /= n;
            pts.push(rule.nodes[i]);
            w *= rule.weights[i];
        }
        wts.push(w);
    }
    (pts, wts)
}

/// ∫ f(t,u,x,z) g(u,s,z,y) dz with the grid z = center + width·ξ, where ξ
/// runs over a trapezoid grid (d ≤ 2) or standard normal samples (d ≥ 3).
#[allow(clippy::too_many_arguments)]
pub fn spatial_convolve_at(
    f: &dyn Kernel,
    g: &dyn Kernel,
    t: f64,
    u: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
    center: &[f64],
    width: f64,
    quad: &QuadConfig,
) -> Result<f64> {
    let d = x.len();
    let mut z = vec![0.0; d];
    let mut acc = 0.0;
    if d <= 2 {
        let rule = trapezoid_grid(quad.n_space, quad.space_radius);
        let (pts, wts) = tensor_grid(d, &rule);
        let jac = width.powi(d as i32);
        for (k, w) in wts.iter().enumerate() {
            for i in 0..d {
                z[i] = center[i] + width * pts[k * d + i];
            }
            let v = f.eval(t, u, x, &z)? * g.eval(u, s, &z, y)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { u });
            }
            acc += w * jac * v;
        }
        return Ok(acc);
    }
    // importance sampling from N(center, width² I)
    let mut rng = CounterRng::new(quad.mc_seed ^ u.to_bits());
    let norm = (2.0 * std::f64::consts::PI).powf(0.5 * d as f64) * width.powi(d as i32);
    for _ in 0..quad.n_mc {
        let mut q = 0.0;
        for zi in z.iter_mut().zip(center) {
            let e = rng.next_normal();
            q += e * e;
            *zi.0 = zi.1 + width * e;
        }
        let v = f.eval(t, u, x, &z)? * g.eval(u, s, &z, y)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { u });
        }
        acc += v * norm * (0.5 * q).exp();
    }
    Ok(acc / quad.n_mc as f64)
}

/// The inner integral of ⊗ at an intermediate time u, with the grid centred
/// on the narrower factor: the forward flow from (t, x) with width
/// √(Λ(u−t)) if u is in the early half, else θ_{u,s}(y) with width √(Λ(s−u)).
#[allow(clippy::too_many_arguments)]
pub fn spatial_convolve(
    f: &dyn Kernel,
    g: &dyn Kernel,
    spec: &DiffusionSpec,
    t: f64,
    u: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
    quad: &QuadConfig,
) -> Result<f64> {
    if !(t < u && u < s) {
        return Err(Error::OutOfInterval { u, t, s });
    }
    let lam = spec.ellipticity();
    if u - t <= s - u {
        let c = crate::flow::flow_map(spec, t, u, x)?;
        spatial_convolve_at(f, g, t, u, s, x, y, &c, (lam * (u - t)).sqrt(), quad)
    } else {
        let c = crate::flow::flow_point(spec, u, s, y)?;
        spatial_convolve_at(f, g, t, u, s, x, y, &c, (lam * (s - u)).sqrt(), quad)
    }
}

/// (f ⊗ g)(t,s,x,y) = ∫_t^s du ∫ f(t,u,x,z) g(u,s,z,y) dz.
#[allow(clippy::too_many_arguments)]
pub fn convolve(
    f: &dyn Kernel,
    g: &dyn Kernel,
    spec: &DiffusionSpec,
    t: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
    quad: &QuadConfig,
) -> Result<f64> {
    quad.validate()?;
    if !(t < s) {
        return Err(Error::DegenerateInterval { t, s });
    }
    let d = spec.dim();
    let per_node = if d <= 2 { (quad.n_space as f64).powi(d as i32) } else { quad.n_mc as f64 };
    let needed = 2.0 * (2 * quad.n_time) as f64 * per_node;
    if needed > quad.budget {
        return Err(Error::QuadratureBudgetExceeded {
            needed,
            budget: quad.budget,
        });
    }
    let lam = spec.ellipticity();
    let fwd = Trajectory::solve(spec, t, s, x)?;
    let bwd = Trajectory::solve(spec, s, t, y)?;
    let nodes = split_time_rule(t, s, quad.n_time, quad.kappa(spec.gamma()), true);
    let parts: Vec<Result<f64>> = nodes
        .par_iter()
        .map(|&(u, w, early)| {
            if w == 0.0 || u <= t || u >= s {
                return Ok(0.0);
            }
            let (c, width) = if early {
                (fwd.at(u)?, (lam * (u - t)).sqrt())
            } else {
                (bwd.at(u)?, (lam * (s - u)).sqrt())
            };
            Ok(w * spatial_convolve_at(f, g, t, u, s, x, y, &c, width, quad)?)
        })
        .collect();
    parts.into_iter().sum()
}

/// Γ(γ/2)^r / Γ(1 + rγ/2) · τ^{rγ/2}.
pub fn gamma_ratio_factor(r: usize, gamma: f64, tau: f64) -> Result<f64> {
    let h = 0.5 * gamma;
    let rf = r as f64;
    Ok((rf * crate::special::ln_gamma(h)? - crate::special::ln_gamma(1.0 + rf * h)? + rf * h * tau.ln()).exp())
}

/// Smallest C with |T_0| ≤ C p̄ and |T_1| ≤ C² Γ(γ/2)/Γ(1+γ/2) τ^{γ/2} p̄.
pub fn fit_term_constant(t0: f64, t1: Option<f64>, pbar: f64, gamma: f64, tau: f64) -> Result<f64> {
    if !(pbar > 0.0) {
        return Ok(f64::INFINITY);
    }
    let mut c = t0.abs() / pbar;
    if let Some(t1) = t1 {
        c = c.max((t1.abs() / (gamma_ratio_factor(1, gamma, tau)? * pbar)).sqrt());
    }
    Ok(c)
}

/// Σ_{r>N} C^{r+1} Γ(γ/2)^r/Γ(1+rγ/2) τ^{rγ/2} p̄, summed until the terms
/// stop contributing.
pub fn tail_bound(c: f64, n: usize, gamma: f64, tau: f64, pbar: f64) -> Result<f64> {
    if c == 0.0 || pbar == 0.0 {
        return Ok(0.0);
    }
    if !c.is_finite() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    for r in (n + 1)..(n + 2000) {
        let term = ((r as f64 + 1.0) * c.ln()).exp() * gamma_ratio_factor(r, gamma, tau)? * pbar;
        total += term;
        if r > n + 5 && term <= 1e-17 * total.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesApprox {
    pub y: Vec<f64>,
    /// [p̃, p̃⊗H, …, p̃⊗H^N] at (t, s, x, y).
    pub terms: Vec<f64>,
    pub total: f64,
    pub tail_bound: f64,
    pub fitted_c: f64,
    /// p̄(t, s, x, y) with the default majorant.
    pub majorant: f64,
    /// Set when the truncated total is below −1e−6.
    pub negative: bool,
    pub quad: QuadConfig,
}

/// 4-point Lagrange stencil on the uniform index grid 0..n at position `pos`.
#[inline]
fn stencil4(pos: f64, n: usize) -> (usize, [f64; 4]) {
    let base = (pos.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let s = pos - base as f64;
    let w = [
        -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0,
        s * (s - 2.0) * (s - 3.0) / 2.0,
        -s * (s - 1.0) * (s - 3.0) / 2.0,
        s * (s - 1.0) * (s - 2.0) / 6.0,
    ];
    (base, w)
}

struct SparseRow {
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl SparseRow {
    fn from_dense(dense: &mut [f64]) -> Self {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (i, v) in dense.iter_mut().enumerate() {
            if *v != 0.0 {
                idx.push(i as u32);
                val.push(*v);
                *v = 0.0;
            }
        }
        Self { idx, val }
    }

    #[inline]
    fn dot(&self, q: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * q[i as usize]).sum()
    }
}

struct TargetRows {
    lo: SparseRow,
    hi: SparseRow,
    direct0: f64,
}

/// Early-half time node shared by every target on one slice.
struct LoNode {
    /// Gauss–Legendre weight times du/dw.
    weight: f64,
    u: f64,
    w_base: usize,
    w_coef: [f64; 4],
    /// Per ξ node: z, a(u,z), b(u,z), and the scaled exact proxy.
    z: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    p0: Vec<f64>,
}

struct Engine<'a> {
    spec: &'a DiffusionSpec,
    quad: QuadConfig,
    d: usize,
    t: f64,
    x: Vec<f64>,
    span: f64,
    lam: f64,
    gamma: f64,
    k_slices: usize,
    /// ξ nodes (row-major, d per node) and trapezoid weights.
    xi: Vec<f64>,
    xi_w: Vec<f64>,
    xi_step: f64,
    n_axis: usize,
    fwd: Trajectory,
    /// lo[k-1] holds the early-half nodes for targets at slice k.
    lo: Vec<Vec<LoNode>>,
}

impl<'a> Engine<'a> {
    fn slice_tau(&self, k: usize) -> f64 {
        self.span * (k as f64 / self.k_slices as f64).powf(2.0 / self.gamma)
    }

    fn n_xi(&self) -> usize {
        self.xi_w.len()
    }

    fn new(spec: &'a DiffusionSpec, t: f64, s: f64, x: &[f64], quad: &QuadConfig) -> Result<Self> {
        let d = spec.dim();
        let rule = trapezoid_grid(quad.n_space, quad.space_radius);
        let (xi, xi_w) = tensor_grid(d, &rule);
        let xi_step = 2.0 * quad.space_radius / (quad.n_space - 1) as f64;
        let fwd = Trajectory::solve(spec, t, s, x)?;
        let mut engine = Self {
            spec,
            quad: *quad,
            d,
            t,
            x: x.to_vec(),
            span: s - t,
            lam: spec.ellipticity(),
            gamma: spec.gamma(),
            k_slices: quad.n_time,
            xi,
            xi_w,
            xi_step,
            n_axis: quad.n_space,
            fwd,
            lo: Vec::new(),
        };
        engine.lo = (1..=engine.k_slices)
            .into_par_iter()
            .map(|k| engine.build_lo_nodes(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(engine)
    }

    fn build_lo_nodes(&self, k: usize) -> Result<Vec<LoNode>> {
        let d = self.d;
        let kk = self.k_slices;
        let wk = k as f64 / kk as f64;
        let w_mid = wk * 2f64.powf(-0.5 * self.gamma);
        let p = 2.0 / self.gamma;
        let rule = gauss_legendre(self.quad.n_time);
        let mut out = Vec::with_capacity(rule.len());
        let mut scratch = vec![0.0; d * d];
        for (w, gw) in rule.mapped(0.0, w_mid) {
            let tau = self.span * w.powf(p);
            let u = self.t + tau;
            let weight = gw * self.span * p * w.powf(p - 1.0);
            let (w_base, w_coef) = stencil4(w * kk as f64, kk + 1);
            let width = (self.lam * tau).sqrt();
            let scale = (self.lam * tau).powf(0.5 * d as f64);
            let c = self.fwd.at(u)?;
            let n = self.n_xi();
            let mut z = vec![0.0; n * d];
            let mut a = vec![0.0; n * d * d];
            let mut b = vec![0.0; n * d];
            let mut p0 = vec![0.0; n];
            for j in 0..n {
                for i in 0..d {
                    z[j * d + i] = c[i] + width * self.xi[j * d + i];
                }
                let zj = &z[j * d..(j + 1) * d];
                self.spec.cov_into(u, zj, &mut scratch, &mut a[j * d * d..(j + 1) * d * d])?;
                self.spec.drift_into(u, zj, &mut b[j * d..(j + 1) * d])?;
                let (theta, cov) = frozen_pair(self.spec, self.t, u, zj, self.quad.n_cov)?;
                p0[j] = scale * Gaussian::new(theta, &cov)?.density(&self.x);
            }
            out.push(LoNode {
                weight,
                u,
                w_base,
                w_coef,
                z,
                a,
                b,
                p0,
            });
        }
        Ok(out)
    }

    /// Adds `coef` times the interpolation stencil of Q at (w-index position
    /// `wpos`, ξ) into `dense`.
    #[inline]
    fn scatter(&self, dense: &mut [f64], wpos: f64, xi: &[f64], coef: f64) {
        let n_xi = self.n_xi();
        let (wb, wc) = stencil4(wpos, self.k_slices + 1);
        let r = self.quad.space_radius;
        let m = self.n_axis;
        if self.d == 1 {
            let pos = (xi[0] + r) / self.xi_step;
            if !(pos >= 0.0 && pos <= (m - 1) as f64) {
                return;
            }
            let (xb, xc) = stencil4(pos, m);
            for (a, wa) in wc.iter().enumerate() {
                let row = (wb + a) * n_xi;
                for (b, wbv) in xc.iter().enumerate() {
                    dense[row + xb + b] += coef * wa * wbv;
                }
            }
            return;
        }
        // multilinear in ξ
        let mut base = vec![0usize; self.d];
        let mut frac = vec![0.0; self.d];
        for i in 0..self.d {
            let pos = (xi[i] + r) / self.xi_step;
            if !(pos >= 0.0 && pos <= (m - 1) as f64) {
                return;
            }
            let b = (pos.floor() as usize).min(m - 2);
            base[i] = b;
            frac[i] = pos - b as f64;
        }
        for corner in 0..(1usize << self.d) {
            let mut flat = 0;
            let mut stride = 1;
            let mut wgt = 1.0;
            for i in 0..self.d {
                let bit = (corner >> i) & 1;
                flat += (base[i] + bit) * stride;
                stride *= m;
                wgt *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            if wgt == 0.0 {
                continue;
            }
            for (a, wa) in wc.iter().enumerate() {
                dense[(wb + a) * n_xi + flat] += coef * wa * wgt;
            }
        }
    }

    /// Frozen proxy data of H(u, v, ·, y') along the backward trajectory.
    fn frozen(&self, traj: &Trajectory, u: f64, v: f64) -> Result<FrozenH> {
        let theta = traj.at(u)?;
        let cov = if self.spec.has_constant_diffusion() {
            self.spec.cov(u, &theta)? * (v - u)
        } else {
            crate::proxy::frozen_covariance(self.spec, Some(traj), u, v, self.quad.n_cov)?
        };
        FrozenH::new(self.spec, u, theta, &cov)
    }

    fn target_rows(&self, k: usize, y: &[f64], dense: &mut Vec<f64>) -> Result<TargetRows> {
        let d = self.d;
        let n_xi = self.n_xi();
        let v = self.t + self.slice_tau(k);
        let traj = Trajectory::solve(self.spec, v, self.t, y)?;
        let mut da = vec![0.0; d * d];
        let mut db = vec![0.0; d];
        let mut direct0 = 0.0;

        // early half: slice-aligned grid
        for node in &self.lo[k - 1] {
            let fr = self.frozen(&traj, node.u, v)?;
            for j in 0..n_xi {
                let h = fr.eval(
                    &node.z[j * d..(j + 1) * d],
                    &node.a[j * d * d..(j + 1) * d * d],
                    &node.b[j * d..(j + 1) * d],
                    &mut da,
                    &mut db,
                );
                let c = node.weight * self.xi_w[j] * h;
                if !c.is_finite() {
                    return Err(Error::NonFiniteIntegrand { u: node.u });
                }
                direct0 += c * node.p0[j];
                for (a, wa) in node.w_coef.iter().enumerate() {
                    dense[(node.w_base + a) * n_xi + j] += c * wa;
                }
            }
        }
        let lo = SparseRow::from_dense(dense);

        // late half: grid centred at θ_{u,v}(y')
        let m = self.t + 0.5 * (v - self.t);
        let p = 2.0 / self.gamma;
        let rule = gauss_legendre(self.quad.n_time);
        let mut z = vec![0.0; d];
        let mut a_z = vec![0.0; d * d];
        let mut b_z = vec![0.0; d];
        let mut scratch = vec![0.0; d * d];
        let mut xi_u = vec![0.0; d];
        for (om, gw) in rule.mapped(0.0, 1.0) {
            let one = 1.0 - om;
            let u = v - (v - m) * one.powf(p);
            let weight = gw * (v - m) * p * one.powf(p - 1.0);
            let fr = self.frozen(&traj, u, v)?;
            let width = (self.lam * (v - u)).sqrt();
            let tau_u = u - self.t;
            let width_u = (self.lam * tau_u).sqrt();
            let scale = (width / width_u).powi(d as i32);
            let c_u = self.fwd.at(u)?;
            let wpos = (tau_u / self.span).powf(0.5 * self.gamma) * self.k_slices as f64;
            for j in 0..n_xi {
                for i in 0..d {
                    z[i] = fr.gauss.theta[i] + width * self.xi[j * d + i];
                    xi_u[i] = (z[i] - c_u[i]) / width_u;
                }
                if xi_u.iter().any(|v| v.abs() > self.quad.space_radius) {
                    continue;
                }
                self.spec.cov_into(u, &z, &mut scratch, &mut a_z)?;
                self.spec.drift_into(u, &z, &mut b_z)?;
                let h = fr.eval(&z, &a_z, &b_z, &mut da, &mut db);
                let c = weight * self.xi_w[j] * scale * h;
                if !c.is_finite() {
                    return Err(Error::NonFiniteIntegrand { u });
                }
                self.scatter(dense, wpos, &xi_u, c);
            }
        }
        let hi = SparseRow::from_dense(dense);
        Ok(TargetRows { lo, hi, direct0 })
    }
}

fn check_series_inputs(spec: &DiffusionSpec, t: f64, s: f64, x: &[f64], ys: &[Vec<f64>], quad: &QuadConfig) -> Result<()> {
    quad.validate()?;
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
    if let Some(bad) = ys.iter().find(|y| y.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    Ok(())
}

fn finish(
    spec: &DiffusionSpec,
    t: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
    terms: Vec<f64>,
    n: usize,
    quad: &QuadConfig,
) -> Result<SeriesApprox> {
    let params = MajorantParams::for_spec(spec);
    let pbar = majorant_density(&params, spec, t, s, x, y)?;
    let tau = s - t;
    let fitted_c = fit_term_constant(terms[0], terms.get(1).copied(), pbar, spec.gamma(), tau)?;
    let tail = if spec.is_space_homogeneous() {
        0.0
    } else {
        tail_bound(fitted_c, n, spec.gamma(), tau, pbar)?
    };
    let total: f64 = terms.iter().sum();
    Ok(SeriesApprox {
        y: y.to_vec(),
        terms,
        total,
        tail_bound: tail,
        fitted_c,
        majorant: pbar,
        negative: total < -1e-6,
        quad: *quad,
    })
}

/// Truncated series at each output point, sharing one layered grid.
pub fn series_density_grid(
    spec: &DiffusionSpec,
    t: f64,
    s: f64,
    x: &[f64],
    ys: &[Vec<f64>],
    n: usize,
    quad: &QuadConfig,
) -> Result<Vec<SeriesApprox>> {
    check_series_inputs(spec, t, s, x, ys, quad)?;
    let d = spec.dim();
    let proxy: Vec<f64> = ys
        .par_iter()
        .map(|y| {
            let (theta, cov) = frozen_pair(spec, t, s, y, quad.n_cov)?;
            Ok(Gaussian::new(theta, &cov)?.density(x))
        })
        .collect::<Result<Vec<_>>>()?;
    if n == 0 || spec.is_space_homogeneous() {
        return ys
            .iter()
            .zip(&proxy)
            .map(|(y, &p0)| {
                let mut terms = vec![0.0; n + 1];
                terms[0] = p0;
                finish(spec, t, s, x, y, terms, n, quad)
            })
            .collect();
    }
    if d > 2 {
        return Err(Error::Config(
            "the layered series grid supports d ≤ 2; use `convolve` for single layers in higher dimension".into(),
        ));
    }
    let n_xi = quad.n_space.pow(d as u32) as f64;
    let targets = quad.n_time as f64 * n_xi + ys.len() as f64;
    let needed = targets * 2.0 * quad.n_time as f64 * n_xi;
    if needed > quad.budget {
        return Err(Error::QuadratureBudgetExceeded {
            needed,
            budget: quad.budget,
        });
    }

    let engine = Engine::new(spec, t, s, x, quad)?;
    let kk = engine.k_slices;
    let nx = engine.n_xi();
    let slots = (kk + 1) * nx;

    // layer 0 on the slices: the analytic limit at u = t, exact proxy after
    let mut q0 = vec![0.0; slots];
    {
        let a0 = spec.cov(t, x)? / engine.lam;
        let g = Gaussian::new(vec![0.0; d], &a0)?;
        for j in 0..nx {
            q0[j] = g.density(&engine.xi[j * d..(j + 1) * d]);
        }
        let rest: Vec<Vec<f64>> = (1..=kk)
            .into_par_iter()
            .map(|k| {
                let tau = engine.slice_tau(k);
                let width = (engine.lam * tau).sqrt();
                let scale = (engine.lam * tau).powf(0.5 * d as f64);
                let c = engine.fwd.at(t + tau)?;
                let mut z = vec![0.0; d];
                (0..nx)
                    .map(|j| {
                        for i in 0..d {
                            z[i] = c[i] + width * engine.xi[j * d + i];
                        }
                        let (theta, cov) = frozen_pair(spec, t, t + tau, &z, quad.n_cov)?;
                        Ok(scale * Gaussian::new(theta, &cov)?.density(x))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, vals) in rest.into_iter().enumerate() {
            q0[(k + 1) * nx..(k + 2) * nx].copy_from_slice(&vals);
        }
    }

    // rows: slice targets first (k = 1..K, every ξ), then the outputs at v = s
    let mut jobs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(kk * nx + ys.len());
    for k in 1..=kk {
        let tau = engine.slice_tau(k);
        let width = (engine.lam * tau).sqrt();
        let c = engine.fwd.at(t + tau)?;
        for j in 0..nx {
            jobs.push((k, (0..d).map(|i| c[i] + width * engine.xi[j * d + i]).collect()));
        }
    }
    for y in ys {
        jobs.push((kk, y.clone()));
    }
    let rows: Vec<TargetRows> = jobs
        .par_iter()
        .map_init(
            || vec![0.0; slots],
            |dense, (k, y)| engine.target_rows(*k, y, dense),
        )
        .collect::<Result<Vec<_>>>()?;

    let n_slice_targets = kk * nx;
    let mut out_terms: Vec<Vec<f64>> = proxy.iter().map(|&p| vec![p]).collect();
    let mut q = q0;
    for r in 0..n {
        let vals: Vec<f64> = rows
            .par_iter()
            .map(|row| {
                if r == 0 {
                    row.direct0 + row.hi.dot(&q)
                } else {
                    row.lo.dot(&q) + row.hi.dot(&q)
                }
            })
            .collect();
        let mut next = vec![0.0; slots];
        for k in 1..=kk {
            let scale = (engine.lam * engine.slice_tau(k)).powf(0.5 * d as f64);
            for j in 0..nx {
                next[k * nx + j] = scale * vals[(k - 1) * nx + j];
            }
        }
        for (o, terms) in out_terms.iter_mut().enumerate() {
            terms.push(vals[n_slice_targets + o]);
        }
        q = next;
    }
    ys.iter()
        .zip(out_terms)
        .map(|(y, terms)| finish(spec, t, s, x, y, terms, n, quad))
        .collect()
}

/// Truncated series p̃ + Σ_{r=1}^N p̃ ⊗ H^r at one point.
pub fn series_density(
    spec: &DiffusionSpec,
    t: f64,
    s: f64,
    x: &[f64],
    y: &[f64],
    n: usize,
    quad: &QuadConfig,
) -> Result<SeriesApprox> {
    Ok(series_density_grid(spec, t, s, x, &[y.to_vec()], n, quad)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::builtin;

    #[test]
    fn stencil_reproduces_cubics() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.1 * x * x * x;
        for pos in [0.0, 0.3, 1.7, 5.5, 8.99, 9.0] {
            let (b, w) = stencil4(pos, 10);
            let v: f64 = (0..4).map(|i| w[i] * f((b + i) as f64)).sum();
            assert!((v - f(pos)).abs() < 1e-12, "pos {pos}");
        }
    }

    #[test]
    fn heat_kernel_vanishes_and_series_is_exact() {
        let heat = builtin("heat", &[]).unwrap().single().unwrap();
        assert_eq!(kernel_h(&heat, 0.0, 1.0, &[0.3], &[1.0]).unwrap(), 0.0);
        let approx = series_density(&heat, 0.0, 1.0, &[0.0], &[1.0], 4, &QuadConfig::default()).unwrap();
        let exact = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((approx.total - exact).abs() < 1e-15);
        assert_eq!(approx.terms[1..], [0.0; 4]);
        assert_eq!(approx.tail_bound, 0.0);
    }

    #[test]
    fn ou_kernel_is_drift_part_only() {
        let ou = builtin("ou", &[("sigma", 0.8)]).unwrap().single().unwrap();
        let (t, s, x, y) = (0.1, 0.6, 0.4, 1.3);
        let m = crate::proxy::proxy_moments(&ou, t, s, &[x], &[y], 16).unwrap();
        let dp = crate::proxy::proxy_derivative(&m, &[x], &[y], &[1]).unwrap();
        let want = (x - m.theta[0]) * dp;
        assert!((kernel_h(&ou, t, s, &[x], &[y]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn zero_kernel_convolves_to_zero() {
        let ou = builtin("ou", &[]).unwrap().single().unwrap();
        let zero = |_: f64, _: f64, _: &[f64], _: &[f64]| Ok(0.0);
        let v = convolve(&ProxyKernel(&ou), &zero, &ou, 0.0, 0.5, &[1.0], &[1.0], &QuadConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tail_bound_is_nonnegative_and_decreasing_in_n() {
        let a = tail_bound(2.0, 2, 1.0, 0.5, 0.3).unwrap();
        let b = tail_bound(2.0, 4, 1.0, 0.5, 0.3).unwrap();
        assert!(a > b && b > 0.0);
    }

    #[test]
    fn quad_config_validation() {
        let bad = QuadConfig {
            n_time: 4,
            ..QuadConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = QuadConfig {
            space_radius: 3.0,
            ..QuadConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
