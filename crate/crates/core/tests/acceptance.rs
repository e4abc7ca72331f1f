//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stdout (bypassing the test harness capture) and then asserts.
//!
//! Run with `cargo test -p lap-core --test acceptance -- --nocapture`.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use lap_core::experiment::*;
use lap_core::krylov::{hybrid_lsqr, lsqr, HybridOptions, LsqrOptions};
use lap_core::linops::{thin_qr, DenseBlock, LinearMap, MatvecCounter};
use lap_core::models::simulate::{generate, ProblemSpec, Scenario};
use lap_core::models::{Bounds, CoupledProblem, ProjectorPerp, Regularizer};
use lap_core::rng::{normal_vec, stream, Purpose};
use lap_core::solvers::*;
use lap_core::vecops::{dot, norm2};

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("\n[{tag}] criterion {id:>2} {name}: {detail}\n");
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn finish(id: usize, name: &str, pass: bool, detail: String) {
    report(id, name, pass, &detail);
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn c01_elimination_exactness() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..10u64 {
        let frames = 2 + (seed % 3) as usize;
        let p = small_sr(100 + seed, frames, 0.02, Regularizer::Grad, 0.01, None);
        let (x, w) = generic_state(&p, 200 + seed, 0.05, 0.2);
        let pt = Point::new(&p, x.clone(), w.clone());
        let mut cfg = SolverConfig::new(Method::Lap);
        cfg.lsqr = LsqrOptions::new(1e-10, 1e-10, 10_000);
        let act = ActiveSets::none(p.n_image(), p.n_motion());
        let st = lap_step(&p, &pt, &act, &cfg, Blocks::Joint, &MatvecCounter::new()).unwrap();
        let (dx, dw) = dense_coupled_step(&p, &x, &w);
        worst = worst.max(rel_diff(&concat(&st.dx, &st.dw), &concat(&dx, &dw)));
    }
    let t = start.elapsed();
    let pass = worst <= 1e-6 && secs(t) < 10.0;
    finish(
        1,
        "elimination exactness",
        pass,
        format!("max relative step error {worst:.2e} over 10 instances (limit 1e-6), {:.1}s", secs(t)),
    );
}

#[test]
fn c02_projector_suite() {
    let start = Instant::now();
    let (mut idem, mut annih, mut qr) = (0.0_f64, 0.0_f64, 0.0_f64);
    let problems: Vec<CoupledProblem> = (0..3)
        .map(|s| small_sr(300 + s, 3, 0.02, Regularizer::Grad, 0.01, None))
        .chain((0..2).map(|s| small_mri(310 + s, 0.05, Regularizer::Identity, 0.01)))
        .collect();
    for (i, p) in problems.iter().enumerate() {
        let (x, w) = generic_state(p, 320 + i as u64, 0.05, 0.2);
        let jw = p.assemble_jw(&x, &w);
        let factors = Arc::new(jw.factor(None).unwrap());
        let proj = ProjectorPerp::new(factors.clone(), p.field());
        let mut rng = stream(i as u64, 3, Purpose::Probe);
        for _ in 0..5 {
            let v = normal_vec(&mut rng, p.data.len());
            let pv = proj.apply(&v);
            let ppv = proj.apply(&pv);
            let d: Vec<f64> = ppv.iter().zip(&pv).map(|(a, b)| a - b).collect();
            idem = idem.max(norm2(&d) / norm2(&v));
        }
        // P_perp J_w column by column against the Frobenius norm of J_w
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..p.n_motion() {
            let mut e = vec![0.0; p.n_motion()];
            e[j] = 1.0;
            let col = jw.apply(&e);
            let pc = proj.apply(&col);
            num += dot(&pc, &pc);
            den += dot(&col, &col);
        }
        annih = annih.max((num / den).sqrt());
        for b in &jw.blocks {
            let (q, r) = thin_qr(b).unwrap();
            qr = qr.max(q.matmul(&r).max_abs_diff(b) / b.frobenius());
        }
    }
    let t = start.elapsed();
    let pass = idem <= 1e-12 && annih <= 1e-10 && qr <= 1e-12 && secs(t) < 5.0;
    finish(
        2,
        "projector suite",
        pass,
        format!(
            "idempotence {idem:.1e} (1e-12), |P J_w|/|J_w| {annih:.1e} (1e-10), QR reconstruction {qr:.1e} (1e-12), {:.1}s",
            secs(t)
        ),
    )
}

/// Mean pairwise order of a remainder sequence taken at halving steps.
fn mean_order(errs: &[f64]) -> f64 {
    let o: Vec<f64> = errs.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    o.iter().sum::<f64>() / o.len() as f64
}

/// Taylor orders of the motion Jacobian and of the full gradient at one
/// random state, with steps `2^-k`, `k = 0..=5`.
fn taylor_orders(p: &CoupledProblem, seed: u64) -> (f64, f64) {
    let (x, w) = generic_state(p, seed, 0.05, 0.2);
    let mut rng = stream(seed, 5, Purpose::Probe);
    let q = p.motion_per_frame();
    let dims = p.dim();
    // angles of order 1e-2, shifts of order half a cell
    let dw: Vec<f64> = normal_vec(&mut rng, w.len())
        .iter()
        .enumerate()
        .map(|(i, v)| if i % q < q - dims { 0.01 * v } else { 0.5 * v })
        .collect();
    let dx: Vec<f64> = normal_vec(&mut rng, x.len()).iter().map(|v| 0.05 * v).collect();
    let pt = Point::new(p, x.clone(), w.clone());
    let jdw = pt.jw.apply(&dw);
    let phi0 = p.residual_and_objective(&x, &w).1;
    let slope = dot(&pt.gx, &dx) + dot(&pt.gw, &dw);
    let (mut ej, mut eg) = (Vec::new(), Vec::new());
    for k in 0..=5 {
        let h = 0.5f64.powi(k);
        let wh: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + h * b).collect();
        let xh: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + h * b).collect();
        let rh = p.residual(&x, &wh);
        let e: Vec<f64> = rh.iter().zip(&pt.r).zip(&jdw).map(|((a, b), c)| a - b - h * c).collect();
        ej.push(norm2(&e));
        let ph = p.residual_and_objective(&xh, &wh).1;
        eg.push((ph - phi0 - h * slope).abs());
    }
    (mean_order(&ej), mean_order(&eg))
}

#[test]
fn c03_derivative_suite() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [ProblemKind::Sr2d, ProblemKind::Mri] {
        let mut cfg = ExperimentConfig::new(kind, Method::Lap, "unused");
        cfg.regularizer = Regularizer::Grad;
        let p = generate(&cfg.problem_spec(), 3, 0).unwrap().problem;
        let (mut jw_min, mut g_min) = (f64::INFINITY, f64::INFINITY);
        for s in 0..5 {
            let (oj, og) = taylor_orders(&p, 400 + s);
            jw_min = jw_min.min(oj);
            g_min = g_min.min(og);
        }
        pass &= jw_min >= 1.9 && g_min >= 1.9;
        lines.push(format!("{} J_w order {jw_min:.2}, gradient order {g_min:.2}", cfg.problem.name()));
    }
    let t = start.elapsed();
    pass &= secs(t) < 30.0;
    finish(
        3,
        "derivative suite",
        pass,
        format!("{} (min over 5 states, need 1.9), {:.1}s", lines.join("; "), secs(t)),
    );
}

struct SrRuns {
    summary: SummaryRow,
    elapsed: Duration,
}

fn sr2d_runs(method: Method) -> SrRuns {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ProblemKind::Sr2d, method, dir.path());
    cfg.regularizer = Regularizer::Grad;
    cfg.alpha = 0.01;
    cfg.noise = 0.02;
    cfg.trials = 5;
    let start = Instant::now();
    let res = run_experiment(&cfg).unwrap();
    SrRuns {
        summary: res.summary,
        elapsed: start.elapsed(),
    }
}

static LAP_RUNS: OnceLock<SrRuns> = OnceLock::new();
static VARPRO_RUNS: OnceLock<SrRuns> = OnceLock::new();
static BCD_RUNS: OnceLock<SrRuns> = OnceLock::new();

#[test]
fn c04_super_resolution_2d() {
    let lap = LAP_RUNS.get_or_init(|| sr2d_runs(Method::Lap));
    let s = &lap.summary;
    let pass = s.failed == 0 && s.mean_relerr_x <= 6.0e-2 && s.mean_relerr_w <= 3.0e-2 && secs(lap.elapsed) <= 600.0;
    finish(
        4,
        "2D super-resolution",
        pass,
        format!(
            "LAP mean relerr_x {:.3e} (6.0e-2), relerr_w {:.3e} (3.0e-2) over {} seeds, {:.1} iterations, {:.0}s",
            s.mean_relerr_x,
            s.mean_relerr_w,
            s.trials,
            s.mean_iters,
            secs(lap.elapsed)
        ),
    );
}

#[test]
fn c05_method_ordering() {
    let lap = &LAP_RUNS.get_or_init(|| sr2d_runs(Method::Lap)).summary;
    let vp = &VARPRO_RUNS.get_or_init(|| sr2d_runs(Method::VarPro)).summary;
    let bcd = &BCD_RUNS.get_or_init(|| sr2d_runs(Method::Bcd)).summary;
    let mv = vp.mean_matvecs / lap.mean_matvecs;
    let it = bcd.mean_iters / lap.mean_iters;
    let pass = vp.failed == 0 && bcd.failed == 0 && mv >= 4.0 && it >= 1.5;
    finish(
        5,
        "method ordering",
        pass,
        format!(
            "matvecs VarPro/LAP {:.1}/{:.1} = {mv:.2} (4), iterations BCD/LAP {:.1}/{:.1} = {it:.2} (1.5)",
            vp.mean_matvecs, lap.mean_matvecs, bcd.mean_iters, lap.mean_iters
        ),
    );
}

#[test]
fn c06_mri_improvement() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(ProblemKind::Mri, Method::Lap, "unused");
    cfg.regularizer = Regularizer::Hybrid;
    cfg.noise = 0.1;
    let (_, _, res) = run_trial(&cfg, 0).unwrap();
    let last = res.report.last();
    let t = start.elapsed();
    let ratio = last.relerr_x / res.initial_relerr_x;
    let pass = res.initial_relerr_w == 1.0
        && ratio <= 0.25
        && last.relerr_w <= 5e-2
        && res.report.iterations() <= 200
        && secs(t) <= 900.0;
    finish(
        6,
        "MRI improvement",
        pass,
        format!(
            "relerr_x {:.3e} -> {:.3e} (ratio {ratio:.3}, need 0.25), relerr_w {:.3e} -> {:.3e} (5e-2), {} iterations, {:.0}s",
            res.initial_relerr_x,
            last.relerr_x,
            res.initial_relerr_w,
            last.relerr_w,
            res.report.iterations(),
            secs(t)
        ),
    );
}

#[test]
fn c07_hybrid_regularization() {
    let start = Instant::now();
    let n = 64;
    // singular values spanning ten decades, smooth solution (discrete Picard condition)
    let sigma: Vec<f64> = (0..n).map(|i| 10f64.powf(-10.0 * i as f64 / (n - 1) as f64)).collect();
    let x_true: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let mut a = DenseBlock::zeros(n, n);
    for i in 0..n {
        a.set(i, i, sigma[i]);
    }
    let clean = a.matvec(&x_true);
    let mut rng = stream(7, 0, Purpose::Noise);
    let e = normal_vec(&mut rng, n);
    let s = 0.01 * norm2(&clean) / norm2(&e);
    let b: Vec<f64> = clean.iter().zip(&e).map(|(c, v)| c + s * v).collect();
    let err = |x: &[f64]| rel_diff(x, &x_true);
    // oracle: best error over every plain LSQR iterate
    let best = (1..=n)
        .map(|k| err(&lsqr(&a, &b, &LsqrOptions::new(0.0, 0.0, k)).0))
        .fold(f64::INFINITY, f64::min);
    let (xh, st) = hybrid_lsqr(&a, &b, &HybridOptions::default());
    let eh = err(&xh);
    let t = start.elapsed();
    let pass = eh <= 1.2 * best && secs(t) < 5.0;
    finish(
        7,
        "hybrid regularization",
        pass,
        format!(
            "hybrid error {eh:.3e} after {} steps, LSQR semi-convergence minimum {best:.3e}, ratio {:.3} (1.2)",
            st.iterations,
            eh / best
        ),
    );
}

fn sr2d_problem(bounds: Option<Bounds>) -> (CoupledProblem, Vec<f64>, Vec<f64>) {
    let spec = ProblemSpec {
        scenario: Scenario::sr2d(),
        regularizer: Regularizer::Grad,
        alpha: 0.01,
        noise: 0.02,
        bounds_x: bounds,
    };
    let p = generate(&spec, 7, 0).unwrap().problem;
    let (x0, w0) = initial_guess(&p, &spec.scenario).unwrap();
    (p, x0, w0)
}

fn same_history(a: &SolveReport, b: &SolveReport) -> bool {
    let key = |r: &IterationRecord| {
        [
            r.objective,
            r.data_misfit,
            r.relerr_x,
            r.relerr_w,
            r.matvecs as f64,
            r.alpha,
            r.eta,
            r.step_norm,
            r.pgrad_norm,
            r.iterate_norm,
        ]
        .map(f64::to_bits)
    };
    a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(u, v)| key(u) == key(v))
        && a.x == b.x
        && a.w == b.w
        && a.termination == b.termination
}

#[test]
fn c08_constraints() {
    let b = Bounds::new(0.0, 1.0).unwrap();
    let (p, x0, w0) = sr2d_problem(Some(b));
    let x0: Vec<f64> = x0.iter().map(|&v| b.clamp(v)).collect();
    let mut infeasible = 0usize;
    let mut increases = 0usize;
    let mut prev = f64::INFINITY;
    let mut obs = |r: &IterationRecord, x: &[f64], _: &[f64]| {
        infeasible += x.iter().filter(|&&v| !(0.0..=1.0).contains(&v)).count();
        if r.objective > prev {
            increases += 1;
        }
        prev = r.objective;
    };
    let rep = solve_observed(&p, &x0, &w0, &SolverConfig::new(Method::Lap), Some(&mut obs)).unwrap();
    let active = rep.x.iter().filter(|&&v| v == 0.0 || v == 1.0).count();

    // infinite bounds, no bounds and the active-set switch turned off
    let mut cfg = SolverConfig::new(Method::Lap);
    cfg.max_outer = 6;
    let (pu, xu, wu) = sr2d_problem(Some(Bounds::unbounded()));
    let (pn, _, _) = sr2d_problem(None);
    let inf = solve(&pu, &xu, &wu, &cfg).unwrap();
    let none = solve(&pn, &xu, &wu, &cfg).unwrap();
    cfg.active_set = false;
    let off = solve(&pn, &xu, &wu, &cfg).unwrap();
    let identical = same_history(&inf, &none) && same_history(&inf, &off);
    let pass = infeasible == 0 && increases == 0 && identical;
    finish(
        8,
        "constraint correctness",
        pass,
        format!(
            "{} iterates, {infeasible} infeasible values, {increases} objective increases, {active} pixels on a bound; \
             unbounded trajectory identical: {identical}",
            rep.history.len()
        ),
    );
}

#[test]
fn c09_noise_formulas() {
    let mut worst_sr = 0.0_f64;
    for mu in [0.01, 0.02, 0.03] {
        let spec = ProblemSpec {
            scenario: Scenario::sr2d(),
            regularizer: Regularizer::Grad,
            alpha: 0.01,
            noise: mu,
            bounds_x: None,
        };
        let inst = generate(&spec, 11, 0).unwrap();
        let p = &inst.problem;
        for k in 0..p.n_frames() {
            let d = p.frame_data(k);
            let range = p.offsets[k]..p.offsets[k + 1];
            let clean = &inst.clean_data[range];
            let diff: Vec<f64> = d.iter().zip(clean).map(|(a, b)| a - b).collect();
            worst_sr = worst_sr.max((norm2(&diff) / norm2(clean) - mu).abs());
        }
    }
    let mut worst_mri = 0.0_f64;
    for mu in [0.05, 0.1, 0.15] {
        let spec = ProblemSpec {
            scenario: Scenario::mri(),
            regularizer: Regularizer::Hybrid,
            alpha: 0.0,
            noise: mu,
            bounds_x: None,
        };
        let inst = generate(&spec, 11, 0).unwrap();
        let clean = &inst.clean_data;
        let inf = clean.chunks(2).fold(0.0_f64, |m, c| m.max(c[0].hypot(c[1])));
        let diff: Vec<f64> = inst.problem.data.iter().zip(clean).map(|(a, b)| a - b).collect();
        worst_mri = worst_mri.max((norm2(&diff) - mu * inf).abs() / (mu * inf));
    }
    let pass = worst_sr <= 1e-12 && worst_mri <= 1e-12;
    finish(
        9,
        "noise formulas",
        pass,
        format!("super-resolution max deviation {worst_sr:.1e}, MRI max relative deviation {worst_mri:.1e} (1e-12)"),
    );
}

/// Convergence CSV with the timing column removed.
fn csv_without_time(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let header: Vec<&str> = CONVERGENCE_HEADER.split(',').collect();
    let col = header.iter().position(|&h| h == "time_s").unwrap();
    text.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(col);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn c10_determinism() {
    let mut compared = 0;
    let mut identical = true;
    let mut configs = Vec::new();
    for method in [Method::Lap, Method::VarPro, Method::Bcd] {
        let mut cfg = ExperimentConfig::new(ProblemKind::Sr2d, method, "unused");
        cfg.trials = 2;
        cfg.max_outer = Some(4);
        configs.push(cfg);
    }
    let mut mri = ExperimentConfig::new(ProblemKind::Mri, Method::Lap, "unused");
    mri.regularizer = Regularizer::Hybrid;
    mri.noise = 0.1;
    mri.trials = 1;
    mri.max_outer = Some(3);
    configs.push(mri);
    for cfg in &mut configs {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            cfg.out_dir = d.path().to_path_buf();
            run_experiment(cfg).unwrap();
        }
        for t in 0..cfg.trials {
            let a = trial_dir(dirs[0].path(), t);
            let b = trial_dir(dirs[1].path(), t);
            identical &= csv_without_time(&a.join("convergence.csv")) == csv_without_time(&b.join("convergence.csv"));
            identical &= std::fs::read(a.join("motion_est.csv")).unwrap() == std::fs::read(b.join("motion_est.csv")).unwrap();
            compared += 1;
        }
    }
    finish(
        10,
        "determinism",
        identical,
        format!("{compared} trial pairs across LAP, VarPro, BCD and MRI; byte-identical: {identical}"),
    );
}
