//! Acceptance criteria AC1–AC11. Runs without the libtest harness so that one
//! PASS/FAIL line per criterion is always printed; exits non-zero if any fail.
//! Pass criterion ids (e.g. `AC3 AC9`) as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use parametrix_core::flow::{flow_map, flow_point};
use parametrix_core::oracle::{adaptive_integrate, em_density, exact_linear_density_for, McConfig};
use parametrix_core::parametrix::{fit_term_constant, gamma_ratio_factor, kernel_h, series_density, series_density_grid, QuadConfig};
use parametrix_core::perturb::*;
use parametrix_core::proxy::proxy_moments;
use parametrix_core::rng::CounterRng;
use parametrix_core::{builtin, Constants, DiffusionSpec};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn single(name: &str, params: &[(&str, f64)]) -> DiffusionSpec {
    builtin(name, params).unwrap().single().unwrap()
}

fn oscillating(eps: f64) -> PerturbationPair {
    let (b, p, e) = builtin("oscillating_pair", &[("eps", eps), ("q", 2.01)]).unwrap().pair().unwrap();
    PerturbationPair::new(b, p, e).unwrap()
}

fn uniform(rng: &mut CounterRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_open01()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let heat = single("heat", &[]);
    let mut rng = CounterRng::new(1);
    let (mut h_max, mut rel_max) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let t = uniform(&mut rng, 0.0, 0.9);
        let s = uniform(&mut rng, t + 0.01, 1.0);
        let x = [uniform(&mut rng, -3.0, 3.0)];
        let y = [uniform(&mut rng, -3.0, 3.0)];
        h_max = h_max.max(kernel_h(&heat, t, s, &x, &y).map_err(|e| e.to_string())?.abs());
        let tau = s - t;
        let exact = (-(y[0] - x[0]).powi(2) / (2.0 * tau)).exp() / (2.0 * std::f64::consts::PI * tau).sqrt();
        let got = series_density(&heat, t, s, &x, &y, 3, &QuadConfig::default()).map_err(|e| e.to_string())?.total;
        rel_max = rel_max.max((got / exact - 1.0).abs());
    }
    let elapsed = start.elapsed();
    ensure(
        h_max <= 1e-12 && rel_max <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max|H| = {h_max:.1e}, max relative error {rel_max:.1e}, {elapsed:.2?}"),
    )
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let ou = single("ou", &[("sigma", 0.8)]);
    let ys: Vec<Vec<f64>> = (0..81).map(|i| vec![-1.0 + 5.0 * i as f64 / 80.0]).collect();
    let approx = series_density_grid(&ou, 0.0, 0.5, &[1.0], &ys, 4, &QuadConfig::default()).map_err(|e| e.to_string())?;
    let exact: Vec<f64> = ys.iter().map(|y| exact_linear_density_for(&ou, 0.0, 0.5, &[1.0], y).unwrap()).collect();
    let peak = exact.iter().cloned().fold(0.0, f64::max);
    let mut normwise = Vec::new();
    let mut pointwise = 0.0f64;
    for n in 0..=4 {
        let mut err = 0.0f64;
        for (a, p) in approx.iter().zip(&exact) {
            let partial: f64 = a.terms[..=n].iter().sum();
            err = err.max((partial - p).abs());
            if n == 4 {
                pointwise = pointwise.max((partial - p).abs() / p);
            }
        }
        normwise.push(err / peak);
    }
    let elapsed = start.elapsed();
    let decreasing = normwise.windows(2).all(|w| w[1] < w[0]);
    ensure(
        decreasing && normwise[4] <= 1e-2 && elapsed < Duration::from_secs(60),
        format!(
            "normwise errors {:?}, pointwise relative at N=4 {pointwise:.3}, {elapsed:.2?}",
            normwise.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    )
}

fn ac3() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut models = Vec::new();
    for spec in [single("ou", &[("sigma", 0.8)]), single("variable_sigma", &[])] {
        let mut rng = CounterRng::new(3);
        let mut model_worst = 0.0f64;
        for _ in 0..50 {
            let s = uniform(&mut rng, 0.3, 1.0);
            let u = uniform(&mut rng, 0.05, s - 0.1);
            let x = [uniform(&mut rng, -2.0, 2.0)];
            let y = [uniform(&mut rng, -2.0, 2.0)];
            let dens = |r: f64| -> parametrix_core::Result<f64> {
                let m = proxy_moments(&spec, r, s, &x, &y, 32)?;
                Ok(m.gaussian()?.density(&x))
            };
            let m = proxy_moments(&spec, u, s, &x, &y, 32).map_err(|e| e.to_string())?;
            let g = m.gaussian().map_err(|e| e.to_string())?;
            let a = spec.cov(u, &m.theta).map_err(|e| e.to_string())?;
            let b = spec.drift(u, &m.theta).map_err(|e| e.to_string())?;
            let du = (dens(u + h).map_err(|e| e.to_string())? - dens(u - h).map_err(|e| e.to_string())?) / (2.0 * h);
            let residual = du + g.second_order_action(&x, a.as_slice(), &b);
            let scale = 1f64.max(g.density(&x) / (s - u));
            model_worst = model_worst.max(residual.abs() / scale);
        }
        worst = worst.max(model_worst);
        models.push(format!("{} {model_worst:.1e}", spec.name()));
    }
    ensure(worst <= 1e-4, format!("scaled residuals: {}", models.join(", ")))
}

fn ac4() -> Outcome {
    let c = |k: f64| Constants {
        gamma: 1.0,
        lipschitz_k: k,
        ellipticity: 1.0,
        horizon: 1.0,
    };
    let specs = vec![
        DiffusionSpec::from_sources("cos", 1, &["cos(x1)"], &["1"], c(1.0)).unwrap(),
        DiffusionSpec::from_sources("rotating", 2, &["-x2 + 0.5*sin(x1)", "x1 + cos(t)*0.3"], &["1", "0", "0", "1"], c(2.0)).unwrap(),
        builtin("oscillating_pair", &[("eps", 0.05), ("q", 2.01)]).unwrap().pair().unwrap().1,
    ];
    let tol = 1e-8;
    let mut rng = CounterRng::new(4);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let mut ts = [rng.next_open01(), rng.next_open01(), rng.next_open01()];
        ts.sort_by(f64::total_cmp);
        let (t, s, u) = (ts[0], ts[1], ts[2]);
        let xs: Vec<f64> = (0..2).map(|_| uniform(&mut rng, -3.0, 3.0)).collect();
        let ys: Vec<f64> = (0..2).map(|_| uniform(&mut rng, -3.0, 3.0)).collect();
        for spec in &specs {
            let d = spec.dim();
            let (x, y) = (&xs[..d], &ys[..d]);
            let run = || -> parametrix_core::Result<[f64; 4]> {
                let semigroup = dist(&flow_point(spec, t, s, &flow_point(spec, s, u, y)?)?, &flow_point(spec, t, u, y)?);
                let inverse = dist(&flow_point(spec, t, s, &flow_map(spec, t, s, y)?)?, y);
                let lip = (spec.lipschitz_k() * (s - t)).exp();
                let lipschitz = dist(&flow_point(spec, t, s, x)?, &flow_point(spec, t, s, y)?) - lip * dist(x, y);
                let back = dist(x, &flow_point(spec, t, s, y)?);
                let fwd = dist(y, &flow_map(spec, t, s, x)?);
                let bi = (fwd / lip - back).max(back - lip * fwd);
                Ok([semigroup, inverse, lipschitz, bi])
            };
            let v = run().map_err(|e| e.to_string())?;
            for k in 0..4 {
                worst[k] = worst[k].max(v[k]);
            }
        }
    }
    ensure(
        worst.iter().all(|w| *w <= tol),
        format!(
            "200 tuples x 3 models: semigroup {:.1e}, inverse {:.1e}, Lipschitz excess {:.1e}, bi-Lipschitz excess {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn ac5() -> Outcome {
    let got = adaptive_integrate(|x| (-x * x).exp() * x.sin().powi(2), 0.0, f64::INFINITY, 1e-12).map_err(|e| e.to_string())?;
    let closed = std::f64::consts::PI.sqrt() / 4.0 * (1.0 - (-1f64).exp());
    let printed = 0.279_805_39;
    ensure(
        (got - closed).abs() <= 1e-8,
        format!(
            "integral {got:.12} vs (√π/4)(1−1/e) = {closed:.12}; the quoted decimal {printed} is off by {:.2e} and is not used",
            (closed - printed).abs()
        ),
    )
}

fn ac6() -> Outcome {
    let start = Instant::now();
    let q = QuadConfig::default();
    let mut maxes = Vec::new();
    let mut lines = Vec::new();
    let mut ok = true;
    for (eps, dt) in [(1.0, 0.1), (0.5, 0.1), (0.2, 0.1), (0.05, 0.1), (0.01, 0.1), (0.0025, 0.05)] {
        let pair = oscillating(eps);
        let grid = time_cells(dt, 1.0).map_err(|e| e.to_string())?;
        let cells = delta_cells(&pair, &grid, &q).map_err(|e| e.to_string())?;
        let mx = cells.iter().map(|c| c.delta_b).fold(0.0, f64::max);
        let diag: Vec<&CellDelta> = cells.iter().filter(|c| ((c.s - c.t) - dt).abs() < 1e-9).collect();
        // first maximum in t order, so ties go to the earliest cell
        let peak = diag.iter().fold(diag[0], |a, c| if c.delta_b > a.delta_b { c } else { a });
        let window = eps.sqrt() + 2.0 * dt;
        let fit = fit_holder_constant(&cells, eps, 2.01).map_err(|e| e.to_string())?;
        ok &= peak.t <= window + 1e-12 && fit.all_hold;
        maxes.push(mx);
        lines.push(format!("ε={eps}: max {mx:.4}, argmax t {:.2} ≤ {window:.3}, M {:.3}", peak.t, fit.m_fit));
    }
    // nonincreasing along the sweep 1 → 0.0025, i.e. shrinking with ε
    ok &= maxes.windows(2).all(|w| w[1] <= w[0]);
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    ensure(ok, format!("{}; {elapsed:.1?}", lines.join("; ")))
}

fn ac7() -> Outcome {
    let q = QuadConfig::default();
    let ys: Vec<Vec<f64>> = (0..41).map(|i| vec![-3.0 + 8.0 * i as f64 / 40.0]).collect();
    let tau = 0.5;
    let mut lines = Vec::new();
    let mut ok = true;
    for spec in [single("ou", &[("sigma", 0.8)]), single("variable_sigma", &[])] {
        let r = series_density_grid(&spec, 0.0, tau, &[1.0], &ys, 3, &q).map_err(|e| e.to_string())?;
        let mut c = 0.0f64;
        for a in &r {
            c = c.max(fit_term_constant(a.terms[0], Some(a.terms[1]), a.majorant, spec.gamma(), tau).map_err(|e| e.to_string())?);
        }
        let mut worst = [0.0f64; 2];
        for a in &r {
            for k in 2..=3 {
                let bound = c.powi(k as i32 + 1) * gamma_ratio_factor(k, spec.gamma(), tau).unwrap() * a.majorant;
                worst[k - 2] = worst[k - 2].max(a.terms[k].abs() / bound);
            }
        }
        ok &= worst.iter().all(|w| w.is_finite() && *w <= 10.0);
        lines.push(format!("{}: C {c:.3}, term/bound r=2 {:.3}, r=3 {:.3}", spec.name(), worst[0], worst[1]));
    }
    ensure(ok, lines.join("; "))
}

fn ac8() -> Outcome {
    let q = QuadConfig::default();
    let grid = time_cells(0.1, 1.0).map_err(|e| e.to_string())?;
    let mut c = None;
    let mut rows = Vec::new();
    let mut ok = true;
    let mut lhs_all = Vec::new();
    for eps in [1.0, 0.5, 0.2, 0.05] {
        let pair = oscillating(eps).with_delta(0.75).map_err(|e| e.to_string())?;
        let (m, _) = maxima(&pair, &grid, &q).map_err(|e| e.to_string())?;
        let lhs = density_diff_l1(&pair, 0.0, 1.0, 3, &q).map_err(|e| e.to_string())?;
        let cal = *c.get_or_insert(calibrate_l1_constant(&pair, &m, lhs).map_err(|e| e.to_string())?);
        let bound = l1_theorem_bound(&pair, &m, cal).map_err(|e| e.to_string())?.strong;
        ok &= lhs <= bound * (1.0 + 1e-12);
        lhs_all.push((eps, lhs));
        rows.push(format!("ε={eps}: {lhs:.4} ≤ {bound:.4}"));
    }
    ok &= lhs_all.windows(2).all(|w| w[1].1 <= w[0].1);
    let k = slope(&lhs_all.iter().map(|(e, l)| (e.ln(), l.ln())).collect::<Vec<_>>());
    ok &= k > 0.0;
    ensure(ok, format!("C calibrated at ε=1 = {:.4}; {}; log-log slope {k:.3}", c.unwrap_or(0.0), rows.join(", ")))
}

fn ac9() -> Outcome {
    let q = QuadConfig::default();
    let pair = PerturbationPair::new(single("ou", &[("sigma", 1.0)]), single("ou", &[("sigma", 1.1)]), 0.1).map_err(|e| e.to_string())?;
    let mut cs = Vec::new();
    for k in [1usize, 2] {
        let (nx, ny) = (4 * k + 1, 20 * k + 1);
        let xs: Vec<Vec<f64>> = (0..nx).map(|i| vec![-1.0 + 2.0 * i as f64 / (nx - 1) as f64]).collect();
        let ys: Vec<Vec<f64>> = (0..ny).map(|i| vec![-3.0 + 6.0 * i as f64 / (ny - 1) as f64]).collect();
        let r = linf_theorem_check(&pair, 0.0, 0.5, &xs, &ys, 4, &q, &SupGrid::default(), None).map_err(|e| e.to_string())?;
        cs.push(r.report.fitted_c);
    }
    let change = cs[1] / cs[0] - 1.0;
    ensure(
        cs[0] > 0.0 && cs[0].is_finite() && change.abs() <= 0.2,
        format!("fitted C {:.4} → {:.4} under doubling ({:+.1}%)", cs[0], cs[1], 100.0 * change),
    )
}

fn ac10() -> Outcome {
    let osc = oscillating(0.2);
    let same = {
        let s = single("variable_sigma", &[]);
        PerturbationPair::new(s.clone(), s, 0.1).unwrap()
    };
    let samples: Vec<Sample> = (0..6)
        .map(|i| Sample {
            t: 0.1 * i as f64,
            s: 0.8,
            x: vec![0.5 + 0.1 * i as f64],
            y: vec![1.0 - 0.2 * i as f64],
        })
        .collect();
    let cfg = LemmaConfig::default();
    let mut ok = true;
    let mut lines = Vec::new();
    for id in [LemmaId::MainTerms, LemmaId::Kernels, LemmaId::FirstConv] {
        let r = verify_lemma(id, &osc, &samples, &cfg).map_err(|e| e.to_string())?;
        let z = verify_lemma(id, &same, &samples, &cfg).map_err(|e| e.to_string())?;
        let zero = z.lhs.iter().all(|v| *v == 0.0) && z.fitted_c == 0.0;
        ok &= r.finite && r.fitted_c.is_finite() && zero;
        lines.push(format!("{id} C {:.3e}{}", r.fitted_c, if zero { "" } else { " (identical pair nonzero)" }));
    }
    let pair = PerturbationPair::new(single("variable_sigma", &[("amp", 0.5)]), single("variable_sigma", &[("amp", 0.6)]), 0.1)
        .map_err(|e| e.to_string())?;
    let taus: Vec<f64> = (2..=7).map(|k| 0.5f64.powi(k)).collect();
    let e = kernel_gap_exponent(&pair, 1.0, &[vec![0.7]], &taus, &[-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]).map_err(|e| e.to_string())?;
    ok &= (e + 0.5).abs() <= 0.15;
    ensure(ok, format!("{}; kernel singularity exponent {e:.3} (target −0.5 ± 0.15)", lines.join(", ")))
}

fn ac11() -> Outcome {
    let ou = single("ou", &[("sigma", 0.8)]);
    // central part of the law: y from 0.5 to 2.5 around the mean e^{1/2} ≈ 1.65
    let ys: Vec<Vec<f64>> = (0..41).map(|i| vec![0.5 + 2.0 * i as f64 / 40.0]).collect();
    let cfg = McConfig::default();
    let em = em_density(&ou, 0.0, 0.5, &[1.0], &ys, &cfg).map_err(|e| e.to_string())?;
    let again = em_density(&ou, 0.0, 0.5, &[1.0], &ys, &cfg).map_err(|e| e.to_string())?;
    let series = series_density_grid(&ou, 0.0, 0.5, &[1.0], &ys, 4, &QuadConfig::default()).map_err(|e| e.to_string())?;
    let worst = em.iter().zip(&series).map(|(a, b)| ((a - b.total) / b.total).abs()).fold(0.0, f64::max);
    let same_bits = em.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(
        worst < 0.1 && same_bits && cfg.n_paths == 100_000,
        format!("{} paths, sup relative error {worst:.4}, rerun bit-identical: {same_bits}", cfg.n_paths),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 11] = [
        ("AC1", ac1),
        ("AC2", ac2),
        ("AC3", ac3),
        ("AC4", ac4),
        ("AC5", ac5),
        ("AC6", ac6),
        ("AC7", ac7),
        ("AC8", ac8),
        ("AC9", ac9),
        ("AC10", ac10),
        ("AC11", ac11),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (id, check) in checks {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(msg) => println!("{id} PASS {msg}"),
            Err(msg) => {
                failed += 1;
                println!("{id} FAIL {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
