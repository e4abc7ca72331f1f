//! Synthetic test problems: phantoms, random motion, noisy data and the
//! initial guesses used by the experiments.

use std::f64::consts::PI;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Bounds, CoupledProblem, MriModel, Regularizer, SuperResModel, Truth};
use crate::geometry::{n_motion_params, transformed_image_jacobian, Grid, MotionStack, RigidMotion, WarpOperator};
use crate::krylov::{hybrid_lsqr, lsqr, tikhonov_stack, HybridOptions, LsqrOptions};
use crate::linops::{chol_solve_normal, thin_qr, LinearMap, MapRef};
use crate::rng::{normal_vec, stream, Purpose};
use crate::vecops::{dot, norm2};
use crate::{Error, Result};

/// Largest simulated rotation, per angle.
const MAX_ANGLE: f64 = 5.0 * PI / 180.0;
/// Largest simulated shift, in data-grid cells.
const MAX_SHIFT_CELLS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Scenario {
    SuperRes {
        fine_cells: Vec<usize>,
        factor: Vec<usize>,
        n_frames: usize,
    },
    Mri {
        cells: Vec<usize>,
        n_coils: usize,
        n_frames: usize,
    },
}

impl Scenario {
    /// 128x128 image, 32 frames of 32x32.
    pub fn sr2d() -> Self {
        Scenario::SuperRes {
            fine_cells: vec![128, 128],
            factor: vec![4, 4],
            n_frames: 32,
        }
    }

    /// 80x48x72 image, 64 frames of 20x12x24.
    pub fn sr3d_desk() -> Self {
        Scenario::SuperRes {
            fine_cells: vec![80, 48, 72],
            factor: vec![4, 4, 3],
            n_frames: 64,
        }
    }

    /// 160x96x144 image, 128 frames of 40x24x48.
    pub fn sr3d_paper() -> Self {
        Scenario::SuperRes {
            fine_cells: vec![160, 96, 144],
            factor: vec![4, 4, 3],
            n_frames: 128,
        }
    }

    /// 128x128 complex image, 32 coils, 16 interleaved samplings.
    pub fn mri() -> Self {
        Scenario::Mri {
            cells: vec![128, 128],
            n_coils: 32,
            n_frames: 16,
        }
    }

    pub fn is_mri(&self) -> bool {
        matches!(self, Scenario::Mri { .. })
    }
}

/// Domain box for an image with `cells` cells: one length unit per cell.
fn extent_for(cells: &[usize]) -> Vec<f64> {
    cells.iter().map(|&c| c as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub scenario: Scenario,
    pub regularizer: Regularizer,
    pub alpha: f64,
    pub noise: f64,
    /// Image bounds; ignored for complex images.
    pub bounds_x: Option<Bounds>,
}

pub struct Instance {
    pub problem: CoupledProblem,
    pub clean_data: Vec<f64>,
}

/// Builds a seeded synthetic problem: phantom, random motion, noisy data.
pub fn generate(spec: &ProblemSpec, seed: u64, trial: u64) -> Result<Instance> {
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise level {} must be nonnegative", spec.noise)));
    }
    let mut rng_img = stream(seed, trial, Purpose::Phantom);
    let mut rng_motion = stream(seed, trial, Purpose::Motion);
    let mut rng_noise = stream(seed, trial, Purpose::Noise);
    match &spec.scenario {
        Scenario::SuperRes {
            fine_cells,
            factor,
            n_frames,
        } => {
            let model = SuperResModel::new(fine_cells, factor, &extent_for(fine_cells), *n_frames)?;
            let k: MapRef = Arc::new(model.block_average_operator());
            let ops = vec![k; *n_frames];
            let grid = model.fine_grid.clone();
            let x = phantom(&grid, &mut rng_img, false);
            let shifts: Vec<f64> = (0..grid.dim())
                .map(|a| MAX_SHIFT_CELLS * model.coarse_grid.cell_size(a))
                .collect();
            let w = random_motion(grid.dim(), *n_frames, &shifts, &mut rng_motion, Gauge::PinFirst).flatten();
            let m = ops[0].rows() * n_frames;
            let mut problem = CoupledProblem::new(grid, 1, ops, vec![0.0; m], spec.regularizer, spec.alpha)?;
            let clean = problem.forward(&x, &w);
            problem.data = add_frame_noise(&clean, &problem.offsets, spec.noise, &mut rng_noise);
            problem.bounds_x = spec.bounds_x;
            problem.truth = Some(Truth { x, w });
            problem.data_grid = Some(model.coarse_grid);
            Ok(Instance {
                problem,
                clean_data: clean,
            })
        }
        Scenario::Mri {
            cells,
            n_coils,
            n_frames,
        } => {
            let grid = Grid::with_extent(cells, &extent_for(cells))?;
            let model = MriModel::new(&grid, *n_coils, *n_frames)?;
            let ops: Vec<MapRef> = (0..*n_frames)
                .map(|k| -> MapRef { Arc::new(model.frame_operator(k)) })
                .collect();
            let x = phantom(&grid, &mut rng_img, true);
            let shifts: Vec<f64> = (0..2).map(|a| MAX_SHIFT_CELLS * grid.cell_size(a)).collect();
            let w = random_motion(2, *n_frames, &shifts, &mut rng_motion, Gauge::ZeroMean).flatten();
            let m: usize = ops.iter().map(|o| o.rows()).sum();
            let mut problem = CoupledProblem::new(grid, 2, ops, vec![0.0; m], spec.regularizer, spec.alpha)?;
            let clean = problem.forward(&x, &w);
            problem.data = add_global_noise(&clean, spec.noise, true, &mut rng_noise);
            problem.truth = Some(Truth { x, w });
            Ok(Instance {
                problem,
                clean_data: clean,
            })
        }
    }
}

const PHANTOM_BLUR_CELLS: f64 = 1.0;

/// Separable Gaussian filter with standard deviation `sigma` cells,
/// truncated at three deviations, zero outside the lattice.
pub fn gaussian_smooth(v: &mut [f64], cells: &[usize], sigma: f64) {
    let r = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|t| {
            let s = t as f64 - r as f64;
            (-s * s / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let ks: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= ks);
    let mut stride = 1;
    let mut line = Vec::new();
    for &n in cells {
        let block = stride * n;
        for start in 0..v.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| v[start + i * stride]));
            for i in 0..n {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let j = i as isize + t as isize - r as isize;
                    if j >= 0 && (j as usize) < n {
                        acc += w * line[j as usize];
                    }
                }
                v[start + i * stride] = acc;
            }
        }
        stride = block;
    }
}

struct Ellipse {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, u: &[f64; 3], dim: usize) -> bool {
        let (s, c) = self.angle.sin_cos();
        let d = [u[0] - self.center[0], u[1] - self.center[1], u[2] - self.center[2]];
        let r = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        (0..dim).map(|a| (r[a] / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Phantom of nested ellipses (ellipsoids in 3D) with constant values in
/// `[0, 1]` on a zero background, blurred by a Gaussian of
/// `PHANTOM_BLUR_CELLS` cells. Complex phantoms multiply the
/// magnitude by a smooth phase.
pub fn phantom(grid: &Grid, rng: &mut ChaCha8Rng, complex: bool) -> Vec<f64> {
    let d = grid.dim();
    let mut shapes = vec![
        Ellipse {
            center: [0.0; 3],
            radii: [0.72, 0.84, 0.78],
            angle: 0.0,
            value: 1.0,
        },
        Ellipse {
            center: [0.0, -0.02, 0.0],
            radii: [0.64, 0.76, 0.70],
            angle: 0.0,
            value: rng.random_range(0.35..0.55),
        },
    ];
    for i in 0..7 {
        let value = match i {
            0 => 1.0,
            1 => 0.0,
            _ => rng.random_range(0.0..1.0),
        };
        shapes.push(Ellipse {
            center: [
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.35..0.35),
            ],
            radii: [
                rng.random_range(0.06..0.25),
                rng.random_range(0.06..0.25),
                rng.random_range(0.06..0.25),
            ],
            angle: rng.random_range(0.0..PI),
            value,
        });
    }
    let c = grid.center();
    let nc = if complex { 2 } else { 1 };
    let phase_tilt = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
    let mut mag = vec![0.0; grid.len()];
    let mut u_of = vec![[0.0; 3]; grid.len()];
    for i in 0..grid.len() {
        let xi = grid.cell_center(i);
        let u = &mut u_of[i];
        for a in 0..d {
            u[a] = (xi[a] - c[a]) / (0.5 * grid.extent(a));
        }
        for s in &shapes {
            if s.contains(u, d) {
                mag[i] = s.value;
            }
        }
    }
    gaussian_smooth(&mut mag, grid.cells(), PHANTOM_BLUR_CELLS);
    let mut x = vec![0.0; grid.len() * nc];
    for (i, (&v, u)) in mag.iter().zip(&u_of).enumerate() {
        if complex {
            let phi = PI / 4.0 * (phase_tilt[0] * u[0] + phase_tilt[1] * u[1] + 0.3 * (u[0] * u[0] - u[1] * u[1]));
            x[2 * i] = v * phi.cos();
            x[2 * i + 1] = v * phi.sin();
        } else {
            x[i] = v;
        }
    }
    x
}

/// How simulated motion fixes the common rigid motion shared by all frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    /// First frame is the identity.
    PinFirst,
    /// Every parameter has zero mean over the frames.
    ZeroMean,
}

/// Uniform random rigid motions: angles within 5 degrees, shifts within
/// `max_shift[a]` along axis `a`, then normalized by `gauge`.
pub fn random_motion(
    dim: usize,
    n_frames: usize,
    max_shift: &[f64],
    rng: &mut ChaCha8Rng,
    gauge: Gauge,
) -> MotionStack {
    let na = n_motion_params(dim) - dim;
    let mut params: Vec<(Vec<f64>, Vec<f64>)> = (0..n_frames)
        .map(|_| {
            let angles: Vec<f64> = (0..na).map(|_| rng.random_range(-MAX_ANGLE..MAX_ANGLE)).collect();
            let shift: Vec<f64> = (0..dim)
                .map(|a| rng.random_range(-max_shift[a]..max_shift[a]))
                .collect();
            (angles, shift)
        })
        .collect();
    match gauge {
        Gauge::PinFirst => {
            if let Some(first) = params.first_mut() {
                first.0.iter_mut().chain(first.1.iter_mut()).for_each(|v| *v = 0.0);
            }
        }
        Gauge::ZeroMean if n_frames > 0 => {
            let nf = n_frames as f64;
            for j in 0..na {
                let m = params.iter().map(|p| p.0[j]).sum::<f64>() / nf;
                params.iter_mut().for_each(|p| p.0[j] -= m);
            }
            for a in 0..dim {
                let m = params.iter().map(|p| p.1[a]).sum::<f64>() / nf;
                params.iter_mut().for_each(|p| p.1[a] -= m);
            }
        }
        Gauge::ZeroMean => {}
    }
    let frames = params
        .iter()
        .map(|(angles, shift)| RigidMotion::new(dim, angles, shift).expect("motion dimensions"))
        .collect();
    MotionStack { frames }
}

/// `d_k = dbar_k + mu ||dbar_k|| / ||n_k|| n_k` with standard normal `n_k`.
pub fn add_frame_noise(clean: &[f64], offsets: &[usize], mu: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = clean.to_vec();
    for k in 0..offsets.len() - 1 {
        let seg = &mut out[offsets[k]..offsets[k + 1]];
        let n = normal_vec(rng, seg.len());
        let s = mu * norm2(seg) / norm2(&n);
        if mu > 0.0 {
            for (v, e) in seg.iter_mut().zip(&n) {
                *v += s * e;
            }
        }
    }
    out
}

/// `d = dbar + mu ||dbar||_inf / ||n|| n`; for complex data the infinity
/// norm is the largest modulus and `n` has standard normal real and
/// imaginary parts.
pub fn add_global_noise(clean: &[f64], mu: f64, complex: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let inf = if complex {
        clean
            .chunks(2)
            .fold(0.0_f64, |m, v| m.max(v[0].hypot(v[1])))
    } else {
        crate::vecops::norm_inf(clean)
    };
    let n = normal_vec(rng, clean.len());
    let s = mu * inf / norm2(&n);
    if mu == 0.0 {
        return clean.to_vec();
    }
    clean.iter().zip(&n).map(|(c, e)| c + s * e).collect()
}

const REG_MAX_ITERS: usize = 50;
const SEARCH_CELLS: usize = 3;

/// Registers every frame onto the first one: `w_1 = 0` and for `k >= 2`
/// Gauss-Newton with Armijo backtracking on `1/2 ||T(w) d_1 - d_k||^2`,
/// with all frames seen as images on `grid`.
pub fn register_frames_init(frames: &[&[f64]], grid: &Grid) -> MotionStack {
    let dim = grid.dim();
    let mut out = vec![RigidMotion::identity(dim)];
    let reference = frames[0];
    for (k, target) in frames.iter().enumerate().skip(1) {
        match register_pair(reference, target, grid) {
            Some(m) => out.push(m),
            None => {
                warn!("registration of frame {k} failed; starting it from zero motion");
                out.push(RigidMotion::identity(dim));
            }
        }
    }
    MotionStack { frames: out }
}

fn register_pair(reference: &[f64], target: &[f64], grid: &Grid) -> Option<RigidMotion> {
    let dim = grid.dim();
    let q = n_motion_params(dim);
    let misfit = |w: &[f64]| -> (Vec<f64>, f64) {
        let m = RigidMotion::from_params(dim, w).expect("parameter count");
        let mut r = WarpOperator::new(grid, &m, 1).apply(reference);
        for (ri, ti) in r.iter_mut().zip(target) {
            *ri -= ti;
        }
        let f = 0.5 * dot(&r, &r);
        (r, f)
    };
    let (mut w, (mut r, mut f)) = shift_search(dim, q, grid, &misfit);
    for _ in 0..REG_MAX_ITERS {
        let m = RigidMotion::from_params(dim, &w).expect("parameter count");
        let j = transformed_image_jacobian(reference, &m, grid);
        let g = j.t_matvec(&r);
        let (_, rf) = thin_qr(&j).ok()?;
        let mut dw = chol_solve_normal(&rf, &g).ok()?;
        dw.iter_mut().for_each(|v| *v = -*v);
        let slope = dot(&g, &dw);
        if !slope.is_finite() || slope >= 0.0 {
            break;
        }
        let mut eta = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let trial: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + eta * b).collect();
            let (rt, ft) = misfit(&trial);
            if ft <= f + 1e-4 * eta * slope {
                w = trial;
                r = rt;
                let done = (f - ft) <= 1e-10 * f.max(f64::MIN_POSITIVE);
                f = ft;
                accepted = true;
                if done {
                    return finite_motion(dim, &w);
                }
                break;
            }
            eta *= 0.5;
        }
        if !accepted || norm2(&dw) * eta <= 1e-10 * (1.0 + norm2(&w)) {
            break;
        }
    }
    finite_motion(dim, &w)
}

/// Best integer-cell translation within `SEARCH_CELLS` on every axis, as a
/// starting point away from the local minima of large shifts.
fn shift_search(
    dim: usize,
    q: usize,
    grid: &Grid,
    misfit: &dyn Fn(&[f64]) -> (Vec<f64>, f64),
) -> (Vec<f64>, (Vec<f64>, f64)) {
    let na = q - dim;
    let side = 2 * SEARCH_CELLS + 1;
    let mut best_w = vec![0.0; q];
    let mut best = misfit(&best_w);
    for code in 0..side.pow(dim as u32) {
        let mut c = code;
        let mut w = vec![0.0; q];
        for a in 0..dim {
            let k = (c % side) as f64 - SEARCH_CELLS as f64;
            c /= side;
            w[na + a] = k * grid.cell_size(a);
        }
        let cand = misfit(&w);
        if cand.1 < best.1 {
            best = cand;
            best_w = w;
        }
    }
    (best_w, best)
}

fn finite_motion(dim: usize, w: &[f64]) -> Option<RigidMotion> {
    if w.iter().all(|v| v.is_finite()) {
        RigidMotion::from_params(dim, w).ok()
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialImageOptions {
    pub lsqr: LsqrOptions,
    pub hybrid: HybridOptions,
}

impl Default for InitialImageOptions {
    fn default() -> Self {
        InitialImageOptions {
            lsqr: LsqrOptions::new(1e-2, 1e-2, 100),
            hybrid: HybridOptions {
                atol: 1e-2,
                btol: 1e-2,
                max_iters: 100,
                ..HybridOptions::default()
            },
        }
    }
}

/// Image reconstruction with the motion frozen at `w0`:
/// `min 1/2 ||K T(w0) x - d||^2 + alpha/2 ||L x||^2`, or the hybrid
/// Krylov solve of the unregularized system in hybrid mode.
pub fn initial_image(problem: &CoupledProblem, w0: &[f64], opts: &InitialImageOptions) -> Result<Vec<f64>> {
    let jx: MapRef = Arc::new(problem.jx_operator(w0));
    if problem.is_hybrid() {
        let (x, _) = hybrid_lsqr(jx.as_ref(), &problem.data, &opts.hybrid);
        return Ok(x);
    }
    let n = problem.n_image();
    let neg_d: Vec<f64> = problem.data.iter().map(|v| -v).collect();
    let (a, b) = tikhonov_stack(jx, problem.reg_op(), problem.alpha, &vec![0.0; n], &neg_d)?;
    let (x, _) = lsqr(a.as_ref(), &b, &opts.lsqr);
    Ok(x)
}
