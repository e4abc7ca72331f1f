//! LAP, VarPro and BCD on top of shared projected Gauss-Newton pieces:
//! active sets, projected gradients, the gamma-weighted combination of
//! inactive and active steps, and a projected Armijo line search.

use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};

use crate::krylov::{hybrid_lsqr_offset, lsqr, tikhonov_stack, tikhonov_stack_with_offset, HybridOptions, LsqrOptions};
use crate::linops::{ColumnMask, Composed, LinearMap, MapRef, MatvecCounter};
use crate::models::{Bounds, CoupledProblem, JwBlocks, JwFactors, ProjectorPerp};
use crate::vecops::{dot, norm2, norm2_pair, norm_inf};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Lap,
    VarPro,
    Bcd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lap => "lap",
            Method::VarPro => "varpro",
            Method::Bcd => "bcd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lap" => Ok(Method::Lap),
            "varpro" => Ok(Method::VarPro),
            "bcd" => Ok(Method::Bcd),
            _ => Err(Error::Config(format!("unknown solver '{s}'"))),
        }
    }
}

/// Accuracy of the image solve inside every VarPro function evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VarProInner {
    FixedIters(usize),
    Tolerance { tol: f64, max_iters: usize },
}

impl VarProInner {
    fn lsqr_options(self) -> LsqrOptions {
        match self {
            VarProInner::FixedIters(k) => LsqrOptions::new(0.0, 0.0, k),
            VarProInner::Tolerance { tol, max_iters } => LsqrOptions::new(tol, tol, max_iters),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopFixed {
    pub obj_rel_tol: f64,
    pub pgrad_rel_tol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopHybrid {
    pub step_tol: f64,
    pub misfit_change_tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub lsqr: LsqrOptions,
    pub hybrid: HybridOptions,
    pub varpro_inner: VarProInner,
    pub max_outer: usize,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    pub armijo_max_backtracks: usize,
    pub stop_fixed: StopFixed,
    pub stop_hybrid: StopHybrid,
    /// Bound handling; when off, bounds are ignored entirely.
    pub active_set: bool,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        SolverConfig {
            method,
            lsqr: LsqrOptions::new(1e-2, 1e-2, 50),
            hybrid: HybridOptions {
                max_iters: 50,
                wgcv_adaptive: true,
                gcv_flat_tol: 1e-6,
                atol: 1e-2,
                btol: 1e-2,
                fixed_alpha: None,
            },
            varpro_inner: VarProInner::FixedIters(20),
            max_outer: 50,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            armijo_max_backtracks: 20,
            stop_fixed: StopFixed {
                obj_rel_tol: 1e-6,
                pgrad_rel_tol: 1e-6,
            },
            stop_hybrid: StopHybrid {
                step_tol: 1e-6,
                misfit_change_tol: 1e-6,
            },
            active_set: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::Config(format!("Armijo constant {} outside (0, 1)", self.armijo_c)));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::Config(format!("Armijo shrink {} outside (0, 1)", self.armijo_shrink)));
        }
        let tols = [
            self.stop_fixed.obj_rel_tol,
            self.stop_fixed.pgrad_rel_tol,
            self.stop_hybrid.step_tol,
            self.stop_hybrid.misfit_change_tol,
        ];
        if tols.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("stopping tolerances must be positive".into()));
        }
        if self.lsqr.max_iters == 0 || self.hybrid.max_iters < 2 {
            return Err(Error::Config("inner iteration limits too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub data_misfit: f64,
    pub relerr_x: f64,
    pub relerr_w: f64,
    pub matvecs: u64,
    pub alpha: f64,
    pub eta: f64,
    pub step_norm: f64,
    pub pgrad_norm: f64,
    pub iterate_norm: f64,
    pub time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    ConvergedFixed,
    StagnatedHybrid,
    MaxIters,
    LineSearchFailure,
    RankDeficientJw,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::ConvergedFixed => "converged",
            Termination::StagnatedHybrid => "stagnated",
            Termination::MaxIters => "max_iters",
            Termination::LineSearchFailure => "line_search_failure",
            Termination::RankDeficientJw => "rank_deficient_jw",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub history: Vec<IterationRecord>,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub termination: Termination,
}

impl SolveReport {
    pub fn last(&self) -> &IterationRecord {
        self.history.last().expect("history is never empty")
    }

    /// Outer iterations performed (the initial record is iteration 0).
    pub fn iterations(&self) -> usize {
        self.last().iter
    }
}

/// `||a - b|| / ||b||`, `NaN` for a zero reference.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let nb = norm2(b);
    if nb == 0.0 {
        return f64::NAN;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d.sqrt() / nb
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSets {
    pub image: Vec<bool>,
    pub motion: Vec<bool>,
}

impl ActiveSets {
    pub fn none(n: usize, p: usize) -> Self {
        ActiveSets {
            image: vec![false; n],
            motion: vec![false; p],
        }
    }

    pub fn any(&self) -> bool {
        self.image.iter().chain(&self.motion).any(|&a| a)
    }
}

fn active_mask(v: &[f64], bounds: Option<Bounds>) -> Vec<bool> {
    match bounds {
        Some(b) => v.iter().map(|&x| b.is_active(x)).collect(),
        None => vec![false; v.len()],
    }
}

/// Components sitting on a bound (within `ACTIVE_TOL`).
pub fn split_active(x: &[f64], w: &[f64], bx: Option<Bounds>, bw: Option<Bounds>) -> ActiveSets {
    ActiveSets {
        image: active_mask(x, bx),
        motion: active_mask(w, bw),
    }
}

/// Gradient with the components that would push an active variable out of
/// the box set to zero.
pub fn projected_gradient(g: &[f64], z: &[f64], bounds: Option<Bounds>) -> Vec<f64> {
    let Some(b) = bounds else {
        return g.to_vec();
    };
    g.iter()
        .zip(z)
        .map(|(&gi, &zi)| {
            if (b.at_lower(zi) && gi > 0.0) || (b.at_upper(zi) && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

/// Full step `inactive + gamma * active` with
/// `gamma = max(|dx_I|_inf, |dw_I|_inf) / max(|dx_A|_inf, |dw_A|_inf)`,
/// and `gamma = 0` when the active step vanishes.
pub fn combine_gamma(
    dx_inactive: &[f64],
    dw_inactive: &[f64],
    dx_active: &[f64],
    dw_active: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    let num = norm_inf(dx_inactive).max(norm_inf(dw_inactive));
    let den = norm_inf(dx_active).max(norm_inf(dw_active));
    let gamma = if den == 0.0 { 0.0 } else { num / den };
    let comb = |i: &[f64], a: &[f64]| -> Vec<f64> {
        if gamma == 0.0 {
            i.to_vec()
        } else {
            i.iter().zip(a).map(|(u, v)| u + gamma * v).collect()
        }
    };
    (comb(dx_inactive, dx_active), comb(dw_inactive, dw_active), gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopMode {
    Fixed,
    Hybrid,
}

/// Decides whether to stop after the last record in `history`.
pub fn stopping_check(history: &[IterationRecord], cfg: &SolverConfig, mode: StopMode) -> Option<Termination> {
    let k = history.len().checked_sub(1)?;
    if k == 0 {
        return None;
    }
    let (first, prev, cur) = (&history[0], &history[k - 1], &history[k]);
    match mode {
        StopMode::Fixed => {
            let dphi = (cur.objective - prev.objective).abs();
            if dphi < cfg.stop_fixed.obj_rel_tol * first.objective.abs() {
                return Some(Termination::ConvergedFixed);
            }
            if cur.pgrad_norm < cfg.stop_fixed.pgrad_rel_tol * first.pgrad_norm {
                return Some(Termination::ConvergedFixed);
            }
        }
        StopMode::Hybrid => {
            if cur.step_norm < cfg.stop_hybrid.step_tol * cur.iterate_norm {
                return Some(Termination::StagnatedHybrid);
            }
            let dm = (cur.data_misfit - prev.data_misfit).abs();
            if dm < cfg.stop_hybrid.misfit_change_tol * first.data_misfit {
                return Some(Termination::StagnatedHybrid);
            }
        }
    }
    if cur.iter >= cfg.max_outer {
        return Some(Termination::MaxIters);
    }
    None
}

/// Residual, objective pieces, motion Jacobian and gradient at one iterate.
#[derive(Clone)]
pub struct Point {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub r: Vec<f64>,
    pub misfit: f64,
    /// Line-search merit: the objective in fixed mode, the misfit in hybrid mode.
    pub merit: f64,
    pub jw: JwBlocks,
    pub gx: Vec<f64>,
    pub gw: Vec<f64>,
}

struct Eval {
    r: Vec<f64>,
    misfit: f64,
    merit: f64,
}

fn evaluate(problem: &CoupledProblem, x: &[f64], w: &[f64]) -> Eval {
    let r = problem.residual(x, w);
    let misfit = 0.5 * dot(&r, &r);
    let merit = problem.objective_from_residual(x, &r);
    Eval { r, misfit, merit }
}

impl Point {
    pub fn new(problem: &CoupledProblem, x: Vec<f64>, w: Vec<f64>) -> Self {
        let ev = evaluate(problem, &x, &w);
        Point::from_eval(problem, x, w, ev)
    }

    fn from_eval(problem: &CoupledProblem, x: Vec<f64>, w: Vec<f64>, ev: Eval) -> Self {
        let jw = problem.assemble_jw(&x, &w);
        let (gx, gw) = problem.gradient(&x, &w, &ev.r, &jw);
        Point {
            x,
            w,
            r: ev.r,
            misfit: ev.misfit,
            merit: ev.merit,
            jw,
            gx,
            gw,
        }
    }
}

/// Which variable blocks a Gauss-Newton step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Blocks {
    Joint,
    Image,
    Motion,
}

/// Step on the inactive set.
#[derive(Clone, Debug)]
pub struct InactiveStep {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    /// Tikhonov parameter used (the hybrid choice in hybrid mode).
    pub alpha: f64,
}

fn counted_jx(problem: &CoupledProblem, w: &[f64], counter: &MatvecCounter) -> MapRef {
    Arc::new(counter.wrap(Arc::new(problem.jx_operator(w))))
}

/// Gauss-Newton step restricted to the inactive set.
///
/// For `Blocks::Joint` the motion is eliminated with the projector onto the
/// complement of range(J_w): the image step solves
/// `min 1/2 ||P(J_x dx + r)||^2 + alpha/2 ||L (x + dx)||^2` and then
/// `dw = -(J_w^T J_w)^{-1} J_w^T (J_x dx + r)`.
pub fn lap_step(
    problem: &CoupledProblem,
    pt: &Point,
    act: &ActiveSets,
    cfg: &SolverConfig,
    blocks: Blocks,
    counter: &MatvecCounter,
) -> Result<InactiveStep> {
    let n = problem.n_image();
    let p = problem.n_motion();
    let alpha_fixed = problem.alpha;
    if blocks == Blocks::Motion {
        let f = pt.jw.factor(Some(&act.motion))?;
        let mut dw = f.solve_normal(&pt.jw.t_apply(&pt.r))?;
        dw.iter_mut().for_each(|v| *v = -*v);
        return Ok(InactiveStep {
            dx: vec![0.0; n],
            dw,
            alpha: alpha_fixed,
        });
    }
    let any_img_active = act.image.iter().any(|&a| a);
    let drop = Arc::new(act.image.clone());
    let jx = counted_jx(problem, &pt.w, counter);
    let jx_i: MapRef = if any_img_active {
        Arc::new(ColumnMask::new(jx.clone(), drop.clone())?)
    } else {
        jx.clone()
    };
    let factors: Option<Arc<JwFactors>> = if blocks == Blocks::Joint && p > 0 {
        let motion_active = if act.motion.iter().any(|&a| a) {
            Some(act.motion.as_slice())
        } else {
            None
        };
        Some(Arc::new(pt.jw.factor(motion_active)?))
    } else {
        None
    };
    let (a, rhs0): (MapRef, Vec<f64>) = match &factors {
        Some(f) => {
            let proj: MapRef = Arc::new(ProjectorPerp::new(f.clone(), problem.field()));
            (Arc::new(Composed::new(proj, jx_i)?), f.project_perp(&pt.r))
        }
        None => (jx_i, pt.r.clone()),
    };
    let (mut dx, alpha) = if problem.is_hybrid() {
        let b: Vec<f64> = rhs0.iter().map(|v| -v).collect();
        let x0: Vec<f64> = pt.x.iter().zip(&act.image).map(|(&v, &a)| if a { 0.0 } else { v }).collect();
        let (dx, st) = hybrid_lsqr_offset(a.as_ref(), &b, &x0, &cfg.hybrid);
        debug!("hybrid inner: {} iterations, alpha {:?}", st.iterations, st.alpha_history.last());
        (dx, st.alpha_history.last().copied().unwrap_or(0.0))
    } else {
        let l = problem.reg_op();
        let lx0 = if alpha_fixed > 0.0 { l.apply(&pt.x) } else { Vec::new() };
        let l_i: MapRef = if any_img_active {
            Arc::new(ColumnMask::new(l, drop)?)
        } else {
            l
        };
        let (aug, b) = tikhonov_stack_with_offset(a, l_i, alpha_fixed, &lx0, &rhs0)?;
        let (dx, st) = lsqr(aug.as_ref(), &b, &cfg.lsqr);
        debug!("lsqr inner: {} iterations", st.iterations);
        (dx, alpha_fixed)
    };
    for (d, &a) in dx.iter_mut().zip(&act.image) {
        if a {
            *d = 0.0;
        }
    }
    let dw = match &factors {
        Some(f) => {
            let mut t = jx.apply(&dx);
            for (ti, ri) in t.iter_mut().zip(&pt.r) {
                *ti += ri;
            }
            let mut dw = f.solve_normal(&pt.jw.t_apply(&t))?;
            dw.iter_mut().for_each(|v| *v = -*v);
            dw
        }
        None => vec![0.0; p],
    };
    Ok(InactiveStep { dx, dw, alpha })
}

/// Scaled projected gradient descent step on the active set:
/// `dx_A = -(J_x^T r + alpha L^T L x)_A`, `dw_A = -(J_w^T r)_A`.
pub fn projected_gradient_step(
    problem: &CoupledProblem,
    pt: &Point,
    act: &ActiveSets,
    alpha_used: f64,
    blocks: Blocks,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; pt.x.len()];
    let mut dw = vec![0.0; pt.w.len()];
    if blocks != Blocks::Motion && act.image.iter().any(|&a| a) {
        // in hybrid mode the merit gradient carries no regularization term;
        // the active step uses the hybrid parameter with L = I
        let extra = if problem.is_hybrid() { alpha_used } else { 0.0 };
        for i in 0..dx.len() {
            if act.image[i] {
                dx[i] = -(pt.gx[i] + extra * pt.x[i]);
            }
        }
    }
    if blocks != Blocks::Image {
        for j in 0..dw.len() {
            if act.motion[j] {
                dw[j] = -pt.gw[j];
            }
        }
    }
    (dx, dw)
}

fn project(v: &[f64], b: Option<Bounds>) -> Vec<f64> {
    match b {
        Some(b) => v.iter().map(|&x| b.clamp(x)).collect(),
        None => v.to_vec(),
    }
}

/// Result of an accepted line search.
pub struct Accepted {
    pub eta: f64,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    eval: Eval,
}

/// Backtracking on `merit(P(x + eta dx), P(w + eta dw)) <=
/// merit + c eta min(Q(g)^T (dx; dw), 0)`.
pub fn projected_armijo(
    problem: &CoupledProblem,
    pt: &Point,
    dx: &[f64],
    dw: &[f64],
    bx: Option<Bounds>,
    bw: Option<Bounds>,
    cfg: &SolverConfig,
) -> Result<Accepted> {
    armijo_penalized(problem, pt, dx, dw, bx, bw, cfg, 0.0)
}

/// Projected Armijo on `merit + penalty/2 ||x||^2`.
#[allow(clippy::too_many_arguments)]
fn armijo_penalized(
    problem: &CoupledProblem,
    pt: &Point,
    dx: &[f64],
    dw: &[f64],
    bx: Option<Bounds>,
    bw: Option<Bounds>,
    cfg: &SolverConfig,
    penalty: f64,
) -> Result<Accepted> {
    if dx.iter().chain(dw).all(|&v| v == 0.0) {
        return Err(Error::ZeroStep);
    }
    let gx: Vec<f64> = pt.gx.iter().zip(&pt.x).map(|(g, x)| g + penalty * x).collect();
    let qx = projected_gradient(&gx, &pt.x, bx);
    let qw = projected_gradient(&pt.gw, &pt.w, bw);
    let slope = (dot(&qx, dx) + dot(&qw, dw)).min(0.0);
    let base = pt.merit + 0.5 * penalty * dot(&pt.x, &pt.x);
    let mut eta = 1.0;
    for _ in 0..=cfg.armijo_max_backtracks {
        let xt: Vec<f64> = pt.x.iter().zip(dx).map(|(a, b)| a + eta * b).collect();
        let wt: Vec<f64> = pt.w.iter().zip(dw).map(|(a, b)| a + eta * b).collect();
        let xt = project(&xt, bx);
        let wt = project(&wt, bw);
        let ev = evaluate(problem, &xt, &wt);
        if ev.merit + 0.5 * penalty * dot(&xt, &xt) <= base + cfg.armijo_c * eta * slope {
            return Ok(Accepted {
                eta,
                x: xt,
                w: wt,
                eval: ev,
            });
        }
        eta *= cfg.armijo_shrink;
    }
    Err(Error::LineSearch(cfg.armijo_max_backtracks))
}

/// Called with every recorded iterate `(record, x, w)`, including the start.
pub type Observer<'o> = &'o mut dyn FnMut(&IterationRecord, &[f64], &[f64]);

struct Recorder<'a, 'o> {
    problem: &'a CoupledProblem,
    observer: Option<Observer<'o>>,
    start: Instant,
    history: Vec<IterationRecord>,
    bx: Option<Bounds>,
    bw: Option<Bounds>,
}

impl<'a, 'o> Recorder<'a, 'o> {
    fn new(problem: &'a CoupledProblem, bx: Option<Bounds>, bw: Option<Bounds>, observer: Option<Observer<'o>>) -> Self {
        Recorder {
            problem,
            observer,
            start: Instant::now(),
            history: Vec::new(),
            bx,
            bw,
        }
    }

    /// `pgrad` overrides the projected-gradient norm (VarPro uses the
    /// reduced gradient).
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, pt: &Point, alpha: f64, eta: f64, step_norm: f64, matvecs: u64, pgrad: Option<f64>) {
        let (relerr_x, relerr_w) = match &self.problem.truth {
            Some(t) => (relative_error(&pt.x, &t.x), relative_error(&pt.w, &t.w)),
            None => (f64::NAN, f64::NAN),
        };
        let pgrad_norm = pgrad.unwrap_or_else(|| {
            norm2_pair(
                &projected_gradient(&pt.gx, &pt.x, self.bx),
                &projected_gradient(&pt.gw, &pt.w, self.bw),
            )
        });
        let objective = if self.problem.is_hybrid() {
            pt.misfit + 0.5 * alpha * dot(&pt.x, &pt.x)
        } else {
            pt.merit
        };
        self.history.push(IterationRecord {
            iter: self.history.len(),
            objective,
            data_misfit: pt.misfit,
            relerr_x,
            relerr_w,
            matvecs,
            alpha,
            eta,
            step_norm,
            pgrad_norm,
            iterate_norm: norm2_pair(&pt.x, &pt.w),
            time_s: self.start.elapsed().as_secs_f64(),
        });
        let last = self.history.last().expect("just pushed");
        debug!(
            "iter {}: objective {:.6e}, misfit {:.6e}, relerr_x {:.3e}, relerr_w {:.3e}, matvecs {}, eta {}",
            last.iter, last.objective, last.data_misfit, last.relerr_x, last.relerr_w, last.matvecs, last.eta
        );
        if let Some(obs) = self.observer.as_mut() {
            obs(self.history.last().expect("just pushed"), &pt.x, &pt.w);
        }
    }
}

fn effective_bounds(problem: &CoupledProblem, cfg: &SolverConfig) -> (Option<Bounds>, Option<Bounds>) {
    if cfg.active_set {
        (problem.bounds_x, problem.bounds_w)
    } else {
        (None, None)
    }
}

fn stop_mode(problem: &CoupledProblem) -> StopMode {
    if problem.is_hybrid() {
        StopMode::Hybrid
    } else {
        StopMode::Fixed
    }
}

fn initial_alpha(problem: &CoupledProblem) -> f64 {
    if problem.is_hybrid() {
        0.0
    } else {
        problem.alpha
    }
}

fn check_start(problem: &CoupledProblem, x0: &[f64], w0: &[f64]) -> Result<()> {
    if x0.len() != problem.n_image() || w0.len() != problem.n_motion() {
        return Err(Error::Dimension(format!(
            "start point has {} image and {} motion values, problem needs {} and {}",
            x0.len(),
            w0.len(),
            problem.n_image(),
            problem.n_motion()
        )));
    }
    Ok(())
}

/// Runs the configured method from `(x0, w0)`.
pub fn solve(problem: &CoupledProblem, x0: &[f64], w0: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    solve_observed(problem, x0, w0, cfg, None)
}

/// As [`solve`], reporting every recorded iterate to `observer`.
pub fn solve_observed(
    problem: &CoupledProblem,
    x0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
    observer: Option<Observer<'_>>,
) -> Result<SolveReport> {
    match cfg.method {
        Method::Lap => lap_loop(problem, x0, w0, cfg, observer),
        Method::VarPro => varpro_loop(problem, x0, w0, cfg, observer),
        Method::Bcd => bcd_loop(problem, x0, w0, cfg, observer),
    }
}

/// One projected Gauss-Newton update of the chosen blocks: inactive step,
/// active step, gamma combination and projected Armijo.
fn pgn_update(
    problem: &CoupledProblem,
    pt: &Point,
    cfg: &SolverConfig,
    blocks: Blocks,
    counter: &MatvecCounter,
    bx: Option<Bounds>,
    bw: Option<Bounds>,
) -> Result<(Accepted, f64, f64)> {
    let act = if cfg.active_set {
        split_active(&pt.x, &pt.w, bx, bw)
    } else {
        ActiveSets::none(pt.x.len(), pt.w.len())
    };
    let inactive = lap_step(problem, pt, &act, cfg, blocks, counter)?;
    let (dx, dw) = if act.any() {
        let (ax, aw) = projected_gradient_step(problem, pt, &act, inactive.alpha, blocks);
        let (dx, dw, _) = combine_gamma(&inactive.dx, &inactive.dw, &ax, &aw);
        (dx, dw)
    } else {
        (inactive.dx, inactive.dw)
    };
    let penalty = if problem.is_hybrid() && blocks != Blocks::Motion {
        inactive.alpha
    } else {
        0.0
    };
    let acc = armijo_penalized(problem, pt, &dx, &dw, bx, bw, cfg, penalty)?;
    let moved = {
        let sx: Vec<f64> = acc.x.iter().zip(&pt.x).map(|(a, b)| a - b).collect();
        let sw: Vec<f64> = acc.w.iter().zip(&pt.w).map(|(a, b)| a - b).collect();
        norm2_pair(&sx, &sw)
    };
    Ok((acc, inactive.alpha, moved))
}

fn termination_for(e: &Error) -> Option<Termination> {
    match e {
        Error::RankDeficient { .. } | Error::Singular => Some(Termination::RankDeficientJw),
        Error::LineSearch(_) => Some(Termination::LineSearchFailure),
        _ => None,
    }
}

fn converged_for(mode: StopMode) -> Termination {
    match mode {
        StopMode::Fixed => Termination::ConvergedFixed,
        StopMode::Hybrid => Termination::StagnatedHybrid,
    }
}

/// Linearize and project (projected Gauss-Newton on the joint problem with
/// the motion eliminated from every linearized system).
pub fn solve_lap(problem: &CoupledProblem, x0: &[f64], w0: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    lap_loop(problem, x0, w0, cfg, None)
}

fn lap_loop(
    problem: &CoupledProblem,
    x0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
    observer: Option<Observer<'_>>,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_start(problem, x0, w0)?;
    let (bx, bw) = effective_bounds(problem, cfg);
    let mode = stop_mode(problem);
    let counter = MatvecCounter::new();
    let mut rec = Recorder::new(problem, bx, bw, observer);
    let mut pt = Point::new(problem, project(x0, bx), project(w0, bw));
    rec.push(&pt, initial_alpha(problem), 0.0, 0.0, 0, None);
    let termination = loop {
        let (acc, alpha, moved) = match pgn_update(problem, &pt, cfg, Blocks::Joint, &counter, bx, bw) {
            Ok(v) => v,
            Err(Error::ZeroStep) => {
                // stationary point: record the unchanged iterate and stop
                let a = rec.history.last().map_or(0.0, |r| r.alpha);
                rec.push(&pt, a, 0.0, 0.0, counter.total(), None);
                break converged_for(mode);
            }
            Err(e) => match termination_for(&e) {
                Some(t) => {
                    warn!("LAP stopped: {e}");
                    break t;
                }
                None => return Err(e),
            },
        };
        pt = Point::from_eval(problem, acc.x, acc.w, acc.eval);
        rec.push(&pt, alpha, acc.eta, moved, counter.total(), None);
        if let Some(t) = stopping_check(&rec.history, cfg, mode) {
            break t;
        }
    };
    Ok(SolveReport {
        history: rec.history,
        x: pt.x,
        w: pt.w,
        termination,
    })
}

/// Block coordinate descent: one projected Gauss-Newton step in the image
/// with the motion frozen, then one in the motion with the image frozen.
pub fn solve_bcd(problem: &CoupledProblem, x0: &[f64], w0: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    bcd_loop(problem, x0, w0, cfg, None)
}

fn bcd_loop(
    problem: &CoupledProblem,
    x0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
    observer: Option<Observer<'_>>,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_start(problem, x0, w0)?;
    let (bx, bw) = effective_bounds(problem, cfg);
    let mode = stop_mode(problem);
    let counter = MatvecCounter::new();
    let mut rec = Recorder::new(problem, bx, bw, observer);
    let mut pt = Point::new(problem, project(x0, bx), project(w0, bw));
    rec.push(&pt, initial_alpha(problem), 0.0, 0.0, 0, None);
    let termination = loop {
        let before = (pt.x.clone(), pt.w.clone());
        let mut alpha = initial_alpha(problem);
        let mut eta = 0.0;
        let mut zero_steps = 0;
        let mut failure = None;
        for blocks in [Blocks::Image, Blocks::Motion] {
            match pgn_update(problem, &pt, cfg, blocks, &counter, bx, bw) {
                Ok((acc, a, _)) => {
                    if blocks == Blocks::Image {
                        alpha = a;
                    }
                    eta = acc.eta;
                    pt = Point::from_eval(problem, acc.x, acc.w, acc.eval);
                }
                Err(Error::ZeroStep) => zero_steps += 1,
                Err(e) => match termination_for(&e) {
                    Some(t) => {
                        warn!("BCD stopped: {e}");
                        failure = Some(t);
                        break;
                    }
                    None => return Err(e),
                },
            }
        }
        if let Some(t) = failure {
            break t;
        }
        if zero_steps == 2 {
            rec.push(&pt, alpha, 0.0, 0.0, counter.total(), None);
            break converged_for(mode);
        }
        let sx: Vec<f64> = pt.x.iter().zip(&before.0).map(|(a, b)| a - b).collect();
        let sw: Vec<f64> = pt.w.iter().zip(&before.1).map(|(a, b)| a - b).collect();
        rec.push(&pt, alpha, eta, norm2_pair(&sx, &sw), counter.total(), None);
        if let Some(t) = stopping_check(&rec.history, cfg, mode) {
            break t;
        }
    };
    Ok(SolveReport {
        history: rec.history,
        x: pt.x,
        w: pt.w,
        termination,
    })
}

/// Image solve of a VarPro function evaluation, warm-started at `x_start`.
fn varpro_image(
    problem: &CoupledProblem,
    w: &[f64],
    x_start: &[f64],
    opts: &LsqrOptions,
    counter: &MatvecCounter,
) -> Result<Vec<f64>> {
    let jx = counted_jx(problem, w, counter);
    let mut r = jx.apply(x_start);
    for (ri, di) in r.iter_mut().zip(&problem.data) {
        *ri -= di;
    }
    let (aug, b) = tikhonov_stack(jx, problem.reg_op(), problem.alpha, x_start, &r)?;
    let (dx, st) = lsqr(aug.as_ref(), &b, opts);
    if st.iterations >= opts.max_iters && opts.atol > 0.0 {
        debug!("VarPro inner solve hit its iteration cap; reduced gradient is approximate");
    }
    Ok(x_start.iter().zip(&dx).map(|(a, b)| a + b).collect())
}

/// Variable projection: Gauss-Newton in the motion on the reduced objective
/// `f(w) = Phi(x(w), w)`, with `x(w)` from an inner Tikhonov solve and the
/// motion Jacobian evaluated at `(x(w), w)`.
pub fn solve_varpro(problem: &CoupledProblem, x0: &[f64], w0: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    varpro_loop(problem, x0, w0, cfg, None)
}

fn varpro_loop(
    problem: &CoupledProblem,
    x0: &[f64],
    w0: &[f64],
    cfg: &SolverConfig,
    observer: Option<Observer<'_>>,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_start(problem, x0, w0)?;
    if problem.is_hybrid() {
        return Err(Error::Config("VarPro needs a fixed regularization parameter".into()));
    }
    if problem.bounds_x.is_some() || problem.bounds_w.is_some() {
        warn!("VarPro ignores bound constraints");
    }
    let counter = MatvecCounter::new();
    let opts = cfg.varpro_inner.lsqr_options();
    let mut rec = Recorder::new(problem, None, None, observer);
    let start = Point::new(problem, x0.to_vec(), w0.to_vec());
    rec.push(&start, problem.alpha, 0.0, 0.0, 0, Some(norm2(&start.gw)));
    let x = varpro_image(problem, w0, x0, &opts, &counter)?;
    let mut pt = Point::new(problem, x, w0.to_vec());
    // reference values for the relative stopping tests
    rec.history[0].objective = pt.merit;
    rec.history[0].pgrad_norm = norm2(&pt.gw);
    let termination = loop {
        let f = match pt.jw.factor(None) {
            Ok(f) => f,
            Err(e) => {
                warn!("VarPro stopped: {e}");
                break Termination::RankDeficientJw;
            }
        };
        let mut dw = match f.solve_normal(&pt.gw) {
            Ok(v) => v,
            Err(e) => {
                warn!("VarPro stopped: {e}");
                break Termination::RankDeficientJw;
            }
        };
        dw.iter_mut().for_each(|v| *v = -*v);
        if dw.iter().all(|&v| v == 0.0) {
            rec.push(&pt, problem.alpha, 0.0, 0.0, counter.total(), Some(norm2(&pt.gw)));
            break Termination::ConvergedFixed;
        }
        let slope = dot(&pt.gw, &dw).min(0.0);
        let mut eta = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.armijo_max_backtracks {
            let wt: Vec<f64> = pt.w.iter().zip(&dw).map(|(a, b)| a + eta * b).collect();
            let xt = varpro_image(problem, &wt, &pt.x, &opts, &counter)?;
            let ev = evaluate(problem, &xt, &wt);
            if ev.merit <= pt.merit + cfg.armijo_c * eta * slope {
                accepted = Some((xt, wt, ev));
                break;
            }
            eta *= cfg.armijo_shrink;
        }
        let Some((xt, wt, ev)) = accepted else {
            warn!("VarPro line search failed");
            break Termination::LineSearchFailure;
        };
        let sx: Vec<f64> = xt.iter().zip(&pt.x).map(|(a, b)| a - b).collect();
        let sw: Vec<f64> = wt.iter().zip(&pt.w).map(|(a, b)| a - b).collect();
        let moved = norm2_pair(&sx, &sw);
        pt = Point::from_eval(problem, xt, wt, ev);
        let g = norm2(&pt.gw);
        rec.push(&pt, problem.alpha, eta, moved, counter.total(), Some(g));
        if let Some(t) = stopping_check(&rec.history, cfg, StopMode::Fixed) {
            break t;
        }
    };
    Ok(SolveReport {
        history: rec.history,
        x: pt.x,
        w: pt.w,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize, objective: f64, misfit: f64, pgrad: f64, step: f64, xnorm: f64) -> IterationRecord {
        IterationRecord {
            iter,
            objective,
            data_misfit: misfit,
            relerr_x: 0.0,
            relerr_w: 0.0,
            matvecs: 0,
            alpha: 0.0,
            eta: 1.0,
            step_norm: step,
            pgrad_norm: pgrad,
            iterate_norm: xnorm,
            time_s: 0.0,
        }
    }

    #[test]
    fn split_active_examples() {
        let b = Bounds::new(0.0, 1.0).ok();
        let a = split_active(&[0.0, 0.5, 1.0], &[0.2], b, None);
        assert_eq!(a.image, vec![true, false, true]);
        assert_eq!(a.motion, vec![false]);
        let none = split_active(&[0.0, 1.0], &[0.0], None, None);
        assert!(!none.any());
    }

    #[test]
    fn projected_gradient_examples() {
        let b = Bounds::new(0.0, 1.0).ok();
        let g = [1.0, -1.0, 1.0, -1.0, 0.3];
        let z = [0.0, 0.0, 1.0, 1.0, 0.5];
        assert_eq!(projected_gradient(&g, &z, b), vec![0.0, -1.0, 1.0, 0.0, 0.3]);
        assert_eq!(projected_gradient(&g, &z, None), g.to_vec());
    }

    #[test]
    fn gamma_examples() {
        let (dx, dw, g) = combine_gamma(&[1.0, 0.0], &[0.5], &[0.0, 1.0], &[0.0]);
        assert_eq!(g, 1.0);
        assert_eq!(dx, vec![1.0, 1.0]);
        assert_eq!(dw, vec![0.5]);
        let (_, _, g) = combine_gamma(&[2.0, 0.0], &[], &[0.0, -0.5], &[]);
        assert_eq!(g, 4.0);
        let (dx, dw, g) = combine_gamma(&[0.3, -0.2], &[0.1], &[0.0, 0.0], &[0.0]);
        assert_eq!(g, 0.0);
        assert_eq!((dx, dw), (vec![0.3, -0.2], vec![0.1]));
    }

    #[test]
    fn stopping_fixed_on_flat_objective() {
        let cfg = SolverConfig::new(Method::Lap);
        let h = vec![record(0, 1.0, 1.0, 1.0, 0.0, 1.0), record(1, 0.5, 0.5, 0.5, 1.0, 1.0), record(2, 0.5, 0.5, 0.4, 1.0, 1.0)];
        assert_eq!(stopping_check(&h[..2], &cfg, StopMode::Fixed), None);
        assert_eq!(stopping_check(&h, &cfg, StopMode::Fixed), Some(Termination::ConvergedFixed));
    }

    #[test]
    fn stopping_hybrid_on_zero_step() {
        let cfg = SolverConfig::new(Method::Lap);
        let h = vec![record(0, 1.0, 1.0, 1.0, 0.0, 1.0), record(1, 0.5, 0.5, 0.5, 0.0, 1.0)];
        assert_eq!(stopping_check(&h, &cfg, StopMode::Hybrid), Some(Termination::StagnatedHybrid));
    }

    #[test]
    fn stopping_at_scripted_index() {
        let cfg = SolverConfig::new(Method::Lap);
        // objective decreases by 10^-k; the change drops below 1e-6 at k = 7
        let mut h = vec![record(0, 1.0, 1.0, 1.0, 0.0, 1.0)];
        let mut phi = 1.0;
        for k in 1..20 {
            phi -= 10f64.powi(-(k as i32));
            h.push(record(k, phi, phi, 1.0, 1.0, 1.0));
            if let Some(t) = stopping_check(&h, &cfg, StopMode::Fixed) {
                assert_eq!(t, Termination::ConvergedFixed);
                assert_eq!(k, 7);
                return;
            }
        }
        panic!("did not stop");
    }

    #[test]
    fn stopping_at_max_outer() {
        let mut cfg = SolverConfig::new(Method::Lap);
        cfg.max_outer = 2;
        let h = vec![record(0, 1.0, 1.0, 1.0, 0.0, 1.0), record(1, 0.5, 0.5, 0.5, 1.0, 1.0), record(2, 0.2, 0.2, 0.2, 1.0, 1.0)];
        assert_eq!(stopping_check(&h, &cfg, StopMode::Fixed), Some(Termination::MaxIters));
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[2.0, 4.0], &[1.0, 2.0]), 1.0);
        assert!(relative_error(&[1.0], &[0.0]).is_nan());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::new(Method::Bcd);
        assert!(cfg.validate().is_ok());
        cfg.armijo_c = 1.5;
        assert!(cfg.validate().is_err());
        assert_eq!("varpro".parse::<Method>().unwrap(), Method::VarPro);
        assert!("newton".parse::<Method>().is_err());
    }
}
