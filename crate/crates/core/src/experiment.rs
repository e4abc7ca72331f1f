//! Experiment harness: seeded trials, solver dispatch, metrics and the
//! on-disk artifacts (CSV logs, PGM images, raw volumes, summaries).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use crate::geometry::Grid;
use crate::models::simulate::{self, InitialImageOptions, ProblemSpec, Scenario};
use crate::models::{Bounds, CoupledProblem, Regularizer, Truth};
use crate::solvers::{self, IterationRecord, Method, SolveReport, SolverConfig, VarProInner};
use crate::vecops::norm2;
use crate::{Error, Result};

pub const CONVERGENCE_HEADER: &str = "iter,objective,data_misfit,relerr_x,relerr_w,matvecs,alpha,eta,time_s";
pub const SUMMARY_HEADER: &str =
    "problem,solver,regularizer,noise,trials,failed,mean_iters,mean_relerr_x,mean_relerr_w,mean_matvecs,mean_time_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Sr2d,
    Sr3d,
    Mri,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Sr2d => "sr2d",
            ProblemKind::Sr3d => "sr3d",
            ProblemKind::Mri => "mri",
        }
    }
}

impl FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr2d" => Ok(ProblemKind::Sr2d),
            "sr3d" => Ok(ProblemKind::Sr3d),
            "mri" => Ok(ProblemKind::Mri),
            _ => Err(Error::Config(format!("unknown problem '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!("unknown scale '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub solver: Method,
    pub regularizer: Regularizer,
    pub alpha: f64,
    pub noise: f64,
    pub seed: u64,
    pub trials: usize,
    pub scale: Scale,
    pub out_dir: PathBuf,
    /// Debug: start the solver at the true image and motion.
    pub start_at_truth: bool,
    /// Replaces the default scenario (e.g. a smaller grid for quick runs).
    pub scenario_override: Option<Scenario>,
    /// Replaces the default outer iteration cap.
    pub max_outer: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemKind, solver: Method, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            problem,
            solver,
            regularizer: Regularizer::Grad,
            alpha: 0.01,
            noise: 0.02,
            seed: 7,
            trials: 1,
            scale: Scale::Desk,
            out_dir: out_dir.into(),
            start_at_truth: false,
            scenario_override: None,
            max_outer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be nonnegative", self.noise)));
        }
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be nonnegative", self.alpha)));
        }
        if self.solver == Method::VarPro && self.regularizer == Regularizer::Hybrid {
            return Err(Error::Config("VarPro cannot use hybrid regularization".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        if let Some(s) = &self.scenario_override {
            return s.clone();
        }
        match (self.problem, self.scale) {
            (ProblemKind::Sr2d, _) => Scenario::sr2d(),
            (ProblemKind::Sr3d, Scale::Desk) => Scenario::sr3d_desk(),
            (ProblemKind::Sr3d, Scale::Paper) => Scenario::sr3d_paper(),
            (ProblemKind::Mri, _) => Scenario::mri(),
        }
    }

    /// Image bounds `[0, 1]` for LAP and BCD on super-resolution; none for
    /// VarPro or complex images.
    pub fn problem_spec(&self) -> ProblemSpec {
        let bounded = self.problem != ProblemKind::Mri && self.solver != Method::VarPro;
        ProblemSpec {
            scenario: self.scenario(),
            regularizer: self.regularizer,
            alpha: self.alpha,
            noise: self.noise,
            bounds_x: if bounded { Bounds::new(0.0, 1.0).ok() } else { None },
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::new(self.solver);
        match self.problem {
            ProblemKind::Sr2d => cfg.varpro_inner = VarProInner::FixedIters(20),
            ProblemKind::Sr3d => cfg.varpro_inner = VarProInner::FixedIters(50),
            ProblemKind::Mri => {
                cfg.varpro_inner = VarProInner::Tolerance {
                    tol: 1e-8,
                    max_iters: 100,
                };
                cfg.max_outer = 200;
            }
        }
        if let Some(m) = self.max_outer {
            cfg.max_outer = m;
        }
        cfg
    }

    /// `key=value` lines, one per field.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "problem={}", self.problem.name());
        let _ = writeln!(s, "solver={}", self.solver.name());
        let _ = writeln!(s, "reg={}", self.regularizer.name());
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "trials={}", self.trials);
        let _ = writeln!(s, "scale={}", self.scale.name());
        let _ = writeln!(s, "start_at_truth={}", self.start_at_truth);
        if let Some(m) = self.max_outer {
            let _ = writeln!(s, "max_outer={m}");
        }
        s
    }
}

/// `(||x - x*|| / ||x*||, ||w - w*|| / ||w*||)`; complex images are compared
/// through their interleaved real coordinates, which gives the modulus norm.
pub fn relative_errors(x: &[f64], w: &[f64], truth: &Truth) -> Result<(f64, f64)> {
    if x.len() != truth.x.len() || w.len() != truth.w.len() {
        return Err(Error::Dimension("estimate and truth differ in length".into()));
    }
    if norm2(&truth.x) == 0.0 || norm2(&truth.w) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((solvers::relative_error(x, &truth.x), solvers::relative_error(w, &truth.w)))
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub initial_relerr_x: f64,
    pub initial_relerr_w: f64,
    pub report: SolveReport,
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub result: std::result::Result<TrialResult, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub problem: String,
    pub solver: String,
    pub regularizer: String,
    pub noise: f64,
    pub trials: usize,
    pub failed: usize,
    pub mean_iters: f64,
    pub mean_relerr_x: f64,
    pub mean_relerr_w: f64,
    pub mean_matvecs: f64,
    pub mean_time_s: f64,
}

impl SummaryRow {
    /// Means over the successful trials.
    pub fn from_outcomes(cfg: &ExperimentConfig, outcomes: &[TrialOutcome]) -> Self {
        let ok: Vec<&IterationRecord> = outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok().map(|r| r.report.last()))
            .collect();
        let mean = |f: &dyn Fn(&IterationRecord) -> f64| -> f64 {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        SummaryRow {
            problem: cfg.problem.name().into(),
            solver: cfg.solver.name().into(),
            regularizer: cfg.regularizer.name().into(),
            noise: cfg.noise,
            trials: outcomes.len(),
            failed: outcomes.len() - ok.len(),
            mean_iters: mean(&|r| r.iter as f64),
            mean_relerr_x: mean(&|r| r.relerr_x),
            mean_relerr_w: mean(&|r| r.relerr_w),
            mean_matvecs: mean(&|r| r.matvecs as f64),
            mean_time_s: mean(&|r| r.time_s),
        }
    }

    fn to_record(&self) -> Vec<String> {
        vec![
            self.problem.clone(),
            self.solver.clone(),
            self.regularizer.clone(),
            self.noise.to_string(),
            self.trials.to_string(),
            self.failed.to_string(),
            self.mean_iters.to_string(),
            self.mean_relerr_x.to_string(),
            self.mean_relerr_w.to_string(),
            self.mean_matvecs.to_string(),
            self.mean_time_s.to_string(),
        ]
    }
}

pub struct ExperimentResult {
    pub summary: SummaryRow,
    pub outcomes: Vec<TrialOutcome>,
}

/// Initial guess: registration of every frame onto the first plus a linear
/// image solve for super-resolution; zero motion plus the image solve for MRI.
pub fn initial_guess(problem: &CoupledProblem, scenario: &Scenario) -> Result<(Vec<f64>, Vec<f64>)> {
    let w0 = match (scenario, &problem.data_grid) {
        (Scenario::SuperRes { .. }, Some(grid)) => {
            let frames: Vec<&[f64]> = (0..problem.n_frames()).map(|k| problem.frame_data(k)).collect();
            simulate::register_frames_init(&frames, grid).flatten()
        }
        _ => vec![0.0; problem.n_motion()],
    };
    let x0 = simulate::initial_image(problem, &w0, &InitialImageOptions::default())?;
    Ok((x0, w0))
}

/// Generates, initializes and solves one trial.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<(CoupledProblem, Vec<f64>, TrialResult)> {
    let spec = cfg.problem_spec();
    let inst = simulate::generate(&spec, cfg.seed, trial as u64)?;
    let problem = inst.problem;
    let truth = problem.truth.clone().expect("simulated problems carry the truth");
    let (x0, w0) = if cfg.start_at_truth {
        (truth.x.clone(), truth.w.clone())
    } else {
        initial_guess(&problem, &spec.scenario)?
    };
    let (ex, ew) = relative_errors(&x0, &w0, &truth)?;
    info!("trial {trial}: initial relerr_x {ex:.3e}, relerr_w {ew:.3e}");
    let report = solvers::solve(&problem, &x0, &w0, &cfg.solver_config())?;
    info!(
        "trial {trial}: {} after {} iterations, relerr_x {:.3e}, relerr_w {:.3e}",
        report.termination.name(),
        report.iterations(),
        report.last().relerr_x,
        report.last().relerr_w
    );
    Ok((
        problem,
        x0,
        TrialResult {
            trial,
            initial_relerr_x: ex,
            initial_relerr_w: ew,
            report,
        },
    ))
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial:03}"))
}

/// Runs every trial, writes per-trial artifacts, `summary.csv` and
/// `config.txt`. Failed trials are logged and left out of the means.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_key_values())?;
    let mut outcomes = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let result = match run_trial(cfg, t) {
            Ok((problem, x0, res)) => {
                emit_trial_artifacts(&trial_dir(&cfg.out_dir, t), &problem, &x0, &res.report)?;
                Ok(res)
            }
            Err(e) => {
                warn!("trial {t} failed: {e}");
                Err(e.to_string())
            }
        };
        outcomes.push(TrialOutcome { trial: t, result });
    }
    let summary = SummaryRow::from_outcomes(cfg, &outcomes);
    write_summary(&cfg.out_dir.join("summary.csv"), std::slice::from_ref(&summary))?;
    Ok(ExperimentResult { summary, outcomes })
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// convergence.csv, motion CSVs, PGM images (2D or mid-slice) and, in 3D,
/// raw f32 volumes with a sidecar.
pub fn emit_trial_artifacts(dir: &Path, problem: &CoupledProblem, x0: &[f64], report: &SolveReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_convergence_csv(&dir.join("convergence.csv"), &report.history)?;
    let q = problem.motion_per_frame();
    write_motion_csv(&dir.join("motion_est.csv"), &report.w, q)?;
    let mut images: Vec<(&str, &[f64])> = vec![("x_init", x0), ("x_est", &report.x)];
    if let Some(t) = &problem.truth {
        write_motion_csv(&dir.join("motion_true.csv"), &t.w, q)?;
        images.push(("x_true", &t.x));
    }
    for (name, v) in images {
        let (w, h, pix) = image_slice(&problem.grid, problem.components, v);
        write_pgm(&dir.join(format!("{name}.pgm")), w, h, &pix)?;
        if problem.dim() == 3 {
            write_raw_volume(&dir.join(format!("{name}.raw")), &problem.grid, problem.components, v)?;
        }
    }
    let note = format!("termination={}\niterations={}\n", report.termination.name(), report.iterations());
    write_text(&dir.join("result.txt"), &note)
}

pub fn write_convergence_csv(path: &Path, history: &[IterationRecord]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Config(format!("empty history for {}", path.display())));
    }
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CONVERGENCE_HEADER.split(',')).map_err(csv_err)?;
    for r in history {
        w.write_record([
            r.iter.to_string(),
            r.objective.to_string(),
            r.data_misfit.to_string(),
            r.relerr_x.to_string(),
            r.relerr_w.to_string(),
            r.matvecs.to_string(),
            r.alpha.to_string(),
            r.eta.to_string(),
            r.time_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns of one convergence.csv row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub iter: usize,
    pub objective: f64,
    pub data_misfit: f64,
    pub relerr_x: f64,
    pub relerr_w: f64,
    pub matvecs: u64,
    pub alpha: f64,
    pub eta: f64,
    pub time_s: f64,
}

impl From<&IterationRecord> for ConvergenceRow {
    fn from(r: &IterationRecord) -> Self {
        ConvergenceRow {
            iter: r.iter,
            objective: r.objective,
            data_misfit: r.data_misfit,
            relerr_x: r.relerr_x,
            relerr_w: r.relerr_w,
            matvecs: r.matvecs,
            alpha: r.alpha,
            eta: r.eta,
            time_s: r.time_s,
        }
    }
}

fn parse_field<T: FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("bad field {i} in {rec:?}"),
    })
}

pub fn read_convergence_csv(path: &Path) -> Result<Vec<ConvergenceRow>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != CONVERGENCE_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("unexpected header '{header}'"),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(ConvergenceRow {
            iter: parse_field(path, &rec, 0)?,
            objective: parse_field(path, &rec, 1)?,
            data_misfit: parse_field(path, &rec, 2)?,
            relerr_x: parse_field(path, &rec, 3)?,
            relerr_w: parse_field(path, &rec, 4)?,
            matvecs: parse_field(path, &rec, 5)?,
            alpha: parse_field(path, &rec, 6)?,
            eta: parse_field(path, &rec, 7)?,
            time_s: parse_field(path, &rec, 8)?,
        });
    }
    Ok(out)
}

/// One row per frame: `frame,p0,p1,...` (angles first, then shifts).
pub fn write_motion_csv(path: &Path, w: &[f64], per_frame: usize) -> Result<()> {
    let mut s = String::from("frame");
    for j in 0..per_frame {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for (k, chunk) in w.chunks(per_frame).enumerate() {
        let _ = write!(s, "{k}");
        for v in chunk {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write_text(path, &s)
}

/// Pixel values of a 2D image, or of the middle slice along the last axis
/// of a 3D volume; modulus for complex images. Returns `(width, height, values)`.
pub fn image_slice(grid: &Grid, components: usize, v: &[f64]) -> (usize, usize, Vec<f64>) {
    let c = grid.cells();
    let (w, h) = (c[0], c[1]);
    let base = if grid.dim() == 3 { (c[2] / 2) * w * h } else { 0 };
    let vals = (0..w * h)
        .map(|i| {
            let j = base + i;
            if components == 2 {
                v[2 * j].hypot(v[2 * j + 1])
            } else {
                v[j]
            }
        })
        .collect();
    (w, h, vals)
}

/// Binary 8-bit PGM; values clamped to `[0, 1]` and mapped to
/// `floor(255 v + 0.5)`.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} pixel values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    // rows are written top to bottom, the second axis pointing down
    out.extend(values.iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0 + 0.5).floor() as u8
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = pgm_bytes(width, height, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian f32 values (modulus for complex images), first axis
/// fastest, with a `<name>.txt` sidecar giving the shape.
pub fn write_raw_volume(path: &Path, grid: &Grid, components: usize, v: &[f64]) -> Result<()> {
    let n = grid.len();
    let mut bytes = Vec::with_capacity(4 * n);
    for j in 0..n {
        let x = if components == 2 { v[2 * j].hypot(v[2 * j + 1]) } else { v[j] };
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let shape: Vec<String> = grid.cells().iter().map(|c| c.to_string()).collect();
    let side = format!("dtype=f32le\nshape={}\norder=first_axis_fastest\n", shape.join("x"));
    write_text(&path.with_extension("txt"), &side)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.to_record()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(SummaryRow {
            problem: parse_field(path, &rec, 0)?,
            solver: parse_field(path, &rec, 1)?,
            regularizer: parse_field(path, &rec, 2)?,
            noise: parse_field(path, &rec, 3)?,
            trials: parse_field(path, &rec, 4)?,
            failed: parse_field(path, &rec, 5)?,
            mean_iters: parse_field(path, &rec, 6)?,
            mean_relerr_x: parse_field(path, &rec, 7)?,
            mean_relerr_w: parse_field(path, &rec, 8)?,
            mean_matvecs: parse_field(path, &rec, 9)?,
            mean_time_s: parse_field(path, &rec, 10)?,
        });
    }
    Ok(out)
}

/// Fixed-width comparison table of the summaries found in `dirs`, sorted by
/// problem, noise, solver and regularizer.
pub fn merge_tables(dirs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(read_summary(&d.join("summary.csv"))?);
    }
    rows.sort_by(|a, b| {
        (a.problem.as_str(), a.solver.as_str(), a.regularizer.as_str())
            .cmp(&(b.problem.as_str(), b.solver.as_str(), b.regularizer.as_str()))
    });
    rows.sort_by(|a, b| a.noise.total_cmp(&b.noise));
    rows.sort_by(|a, b| a.problem.cmp(&b.problem));
    let mut s = format!(
        "{:<6} {:>6} {:<8} {:<9} {:>7} {:>10} {:>10} {:>9} {:>9} {:>6}\n",
        "prob", "noise", "solver", "reg", "iters", "relerr_x", "relerr_w", "matvecs", "time_s", "failed"
    );
    for r in &rows {
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:<8} {:<9} {:>7.1} {:>10.2e} {:>10.2e} {:>9.1} {:>9.2} {:>3}/{:<2}",
            r.problem,
            format!("{}%", r.noise * 100.0),
            r.solver,
            r.regularizer,
            r.mean_iters,
            r.mean_relerr_x,
            r.mean_relerr_w,
            r.mean_matvecs,
            r.mean_time_s,
            r.failed,
            r.trials
        );
    }
    Ok(s)
}
