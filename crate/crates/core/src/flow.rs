//! Deterministic flow of the drift, θ̇_{w,s}(y) = b(w, θ_{w,s}(y)) with
//! θ_{s,s}(y) = y.
//!
//! Integration runs forward in the elapsed time τ = |r − r0| from the point
//! where the state is known, so backward and forward flows share one
//! classical RK4 loop with step h = L / max(64, ⌈L / 0.005⌉). If the model
//! declares kink times in t, the step grid is split there and each piece is
//! stepped with at most h. Values between knots come from cubic Hermite
//! interpolation using the RK stage derivatives at the knots.

use serde::Serialize;

use crate::coeffs::DiffusionSpec;
use crate::error::{Error, Result};

/// Target step length of the fixed-step integrator.
pub const BASE_STEP: f64 = 0.005;
/// Minimum number of steps over any interval.
pub const MIN_STEPS: usize = 64;

/// Step size used for an interval of length `len`.
pub fn step_size(len: f64) -> f64 {
    let n = MIN_STEPS.max((len / BASE_STEP).ceil() as usize);
    len / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorMeta {
    pub step: f64,
    pub steps: usize,
    pub method: &'static str,
}

/// Solution of the drift ODE through a known state, with dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    dim: usize,
    origin: f64,
    /// +1 integrates toward larger t, -1 toward smaller t.
    dir: f64,
    /// Elapsed times τ of the knots, ascending from 0.
    knots: Vec<f64>,
    states: Vec<f64>,
    /// dφ/dτ at each knot.
    slopes: Vec<f64>,
    meta: IntegratorMeta,
}

fn knot_grid(spec: &DiffusionSpec, origin: f64, target: f64, step: f64) -> Vec<f64> {
    let len = (target - origin).abs();
    let (lo, hi) = if origin <= target { (origin, target) } else { (target, origin) };
    let mut cuts: Vec<f64> = spec
        .time_breakpoints()
        .iter()
        .filter(|&&b| b > lo && b < hi)
        .map(|&b| (b - origin).abs())
        .filter(|&tau| tau > 1e-12 * len.max(1.0) && tau < len - 1e-12 * len.max(1.0))
        .collect();
    cuts.sort_by(f64::total_cmp);
    if cuts.is_empty() {
        let n = if step > 0.0 { (len / step).round().max(1.0) as usize } else { 1 };
        return (0..=n).map(|k| len * k as f64 / n as f64).collect();
    }
    let mut knots = vec![0.0];
    let mut start = 0.0;
    for end in cuts.into_iter().chain(std::iter::once(len)) {
        let n = ((end - start) / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            knots.push(if k == n { end } else { start + (end - start) * k as f64 / n as f64 });
        }
        start = end;
    }
    knots
}

impl Trajectory {
    /// Integrates from the state `y` at time `origin` to time `target`.
    pub fn solve(spec: &DiffusionSpec, origin: f64, target: f64, y: &[f64]) -> Result<Self> {
        let d = spec.dim();
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: y.len(),
            });
        }
        let len = (target - origin).abs();
        let dir = if target >= origin { 1.0 } else { -1.0 };
        let step = if len > 0.0 { step_size(len) } else { 0.0 };
        let knots = if len > 0.0 {
            knot_grid(spec, origin, target, step)
        } else {
            vec![0.0]
        };
        let n = knots.len();
        let mut states = Vec::with_capacity(n * d);
        let mut slopes = vec![0.0; n * d];
        states.extend_from_slice(y);

        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let rhs = |tau: f64, z: &[f64], out: &mut [f64]| -> Result<()> {
            spec.drift_into(origin + dir * tau, z, out)?;
            if dir < 0.0 {
                out.iter_mut().for_each(|v| *v = -*v);
            }
            Ok(())
        };
        for i in 0..n {
            let tau = knots[i];
            let cur: Vec<f64> = states[i * d..(i + 1) * d].to_vec();
            rhs(tau, &cur, &mut k1)?;
            slopes[i * d..(i + 1) * d].copy_from_slice(&k1);
            if i + 1 == n {
                break;
            }
            let h = knots[i + 1] - tau;
            for j in 0..d {
                tmp[j] = cur[j] + 0.5 * h * k1[j];
            }
            rhs(tau + 0.5 * h, &tmp, &mut k2)?;
            for j in 0..d {
                tmp[j] = cur[j] + 0.5 * h * k2[j];
            }
            rhs(tau + 0.5 * h, &tmp, &mut k3)?;
            for j in 0..d {
                tmp[j] = cur[j] + h * k3[j];
            }
            rhs(tau + h, &tmp, &mut k4)?;
            for j in 0..d {
                let v = cur[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                if !v.is_finite() {
                    return Err(Error::NonFiniteState {
                        time: origin + dir * knots[i + 1],
                    });
                }
                states.push(v);
            }
        }
        Ok(Self {
            dim: d,
            origin,
            dir,
            meta: IntegratorMeta {
                step,
                steps: n - 1,
                method: "rk4-hermite",
            },
            knots,
            states,
            slopes,
        })
    }

    pub fn meta(&self) -> IntegratorMeta {
        self.meta
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    /// Time at the far end of the trajectory.
    pub fn end(&self) -> f64 {
        self.origin + self.dir * self.knots[self.knots.len() - 1]
    }

    /// State at time `r`, which must lie between the origin and the end.
    pub fn at_into(&self, r: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let len = self.knots[self.knots.len() - 1];
        let tau = (r - self.origin) * self.dir;
        let tol = 1e-12 * len.max(1.0);
        if !(tau >= -tol && tau <= len + tol) {
            let (a, b) = if self.dir > 0.0 {
                (self.origin, self.end())
            } else {
                (self.end(), self.origin)
            };
            return Err(Error::OutOfInterval { u: r, t: a, s: b });
        }
        let tau = tau.clamp(0.0, len);
        let n = self.knots.len();
        if n == 1 {
            out.copy_from_slice(&self.states[..d]);
            return Ok(());
        }
        let i = self.knots.partition_point(|&k| k <= tau).clamp(1, n - 1) - 1;
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let s = (tau - t0) / h;
        if s == 0.0 {
            out.copy_from_slice(&self.states[i * d..(i + 1) * d]);
            return Ok(());
        }
        if s == 1.0 {
            out.copy_from_slice(&self.states[(i + 1) * d..(i + 2) * d]);
            return Ok(());
        }
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        for j in 0..d {
            out[j] = h00 * self.states[i * d + j]
                + h10 * h * self.slopes[i * d + j]
                + h01 * self.states[(i + 1) * d + j]
                + h11 * h * self.slopes[(i + 1) * d + j];
        }
        Ok(())
    }

    pub fn at(&self, r: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.at_into(r, &mut out)?;
        Ok(out)
    }

    /// State at the far end (an RK knot, no interpolation).
    pub fn terminal(&self) -> &[f64] {
        let n = self.knots.len();
        &self.states[(n - 1) * self.dim..]
    }
}

/// Sampled backward flow u ↦ θ_{u,s}(y).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowPath {
    pub s: f64,
    pub y: Vec<f64>,
    pub nodes: Vec<f64>,
    /// Row-major, one row of length d per node.
    pub values: Vec<f64>,
    pub integrator: IntegratorMeta,
}

impl FlowPath {
    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn value(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.values[k * d..(k + 1) * d]
    }
}

fn check_times(t: f64, s: f64) -> Result<()> {
    if !(t.is_finite() && s.is_finite()) || t > s {
        return Err(Error::DegenerateInterval { t, s });
    }
    Ok(())
}

/// θ_{t,s}(y): the state at time t of the drift ODE passing through y at time s.
pub fn flow_point(spec: &DiffusionSpec, t: f64, s: f64, y: &[f64]) -> Result<Vec<f64>> {
    check_times(t, s)?;
    if t == s || spec.has_zero_drift() {
        if y.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                found: y.len(),
            });
        }
        return Ok(y.to_vec());
    }
    Ok(Trajectory::solve(spec, s, t, y)?.terminal().to_vec())
}

/// Solution of the drift ODE through `y` at time `from`, evaluated at `to`
/// (either direction). θ_{s,t}(x) with s > t is `flow_map(spec, t, s, x)`.
pub fn flow_map(spec: &DiffusionSpec, from: f64, to: f64, y: &[f64]) -> Result<Vec<f64>> {
    if from == to || spec.has_zero_drift() {
        return Ok(y.to_vec());
    }
    Ok(Trajectory::solve(spec, from, to, y)?.terminal().to_vec())
}

/// θ_{u,s}(y) at every node, from one integration pass from s down to t.
pub fn flow_path(spec: &DiffusionSpec, t: f64, s: f64, y: &[f64], nodes: &[f64]) -> Result<FlowPath> {
    check_times(t, s)?;
    if nodes.is_empty() {
        return Err(Error::EmptyGrid("flow path nodes"));
    }
    let sorted = nodes.windows(2).all(|w| w[0] < w[1]);
    if !sorted || nodes[0] != t || nodes[nodes.len() - 1] != s {
        return Err(Error::UnsortedNodes);
    }
    let traj = Trajectory::solve(spec, s, t, y)?;
    let d = spec.dim();
    let mut values = vec![0.0; nodes.len() * d];
    for (k, &u) in nodes.iter().enumerate() {
        traj.at_into(u, &mut values[k * d..(k + 1) * d])?;
    }
    // the terminal node is the initial condition itself
    let m = nodes.len() - 1;
    values[m * d..].copy_from_slice(y);
    Ok(FlowPath {
        s,
        y: y.to_vec(),
        nodes: nodes.to_vec(),
        values,
        integrator: traj.meta(),
    })
}
