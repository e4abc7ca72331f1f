#![allow(dead_code)]

use lap_core::linops::{DenseBlock, LinearMap};
use lap_core::models::simulate::{generate, ProblemSpec, Scenario};
use lap_core::models::{Bounds, CoupledProblem, Regularizer};
use lap_core::rng::{normal_vec, stream, Purpose};
use nalgebra::{DMatrix, DVector};

pub fn small_sr(seed: u64, frames: usize, noise: f64, reg: Regularizer, alpha: f64, bounds: Option<Bounds>) -> CoupledProblem {
    let spec = ProblemSpec {
        scenario: Scenario::SuperRes {
            fine_cells: vec![16, 16],
            factor: vec![2, 2],
            n_frames: frames,
        },
        regularizer: reg,
        alpha,
        noise,
        bounds_x: bounds,
    };
    generate(&spec, seed, 0).unwrap().problem
}

pub fn small_mri(seed: u64, noise: f64, reg: Regularizer, alpha: f64) -> CoupledProblem {
    let spec = ProblemSpec {
        scenario: Scenario::Mri {
            cells: vec![16, 16],
            n_coils: 4,
            n_frames: 4,
        },
        regularizer: reg,
        alpha,
        noise,
        bounds_x: None,
    };
    generate(&spec, seed, 0).unwrap().problem
}

/// Truth moved by Gaussian perturbations so that no point sits on a cell face.
pub fn generic_state(problem: &CoupledProblem, seed: u64, sx: f64, sw: f64) -> (Vec<f64>, Vec<f64>) {
    let t = problem.truth.as_ref().unwrap();
    let mut rng = stream(seed, 99, Purpose::Probe);
    let ex = normal_vec(&mut rng, t.x.len());
    let ew = normal_vec(&mut rng, t.w.len());
    let x = t.x.iter().zip(&ex).map(|(a, e)| a + sx * e).collect();
    let w = t.w.iter().zip(&ew).map(|(a, e)| a + sw * e).collect();
    (x, w)
}

pub fn to_nalgebra(b: &DenseBlock) -> DMatrix<f64> {
    DMatrix::from_row_slice(b.n_rows(), b.n_cols(), b.data())
}

/// Dense `[J_x, J_w]` at `(x, w)`.
pub fn dense_jacobians(problem: &CoupledProblem, x: &[f64], w: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let jx = to_nalgebra(&DenseBlock::from_map(&problem.jx_operator(w)));
    let jw = problem.assemble_jw(x, w);
    let p = problem.n_motion();
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            jw.apply(&e)
        })
        .collect();
    let jwd = to_nalgebra(&DenseBlock::from_columns(problem.data.len(), &cols).unwrap());
    (jx, jwd)
}

/// Minimizer of `1/2 ||J_x dx + J_w dw + r||^2 + alpha/2 ||L (x + dx)||^2`
/// by a dense SVD solve of the stacked system.
pub fn dense_coupled_step(problem: &CoupledProblem, x: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (jx, jw) = dense_jacobians(problem, x, w);
    let r = problem.residual(x, w);
    let n = jx.ncols();
    let p = jw.ncols();
    let m = jx.nrows();
    let alpha = problem.alpha_eff();
    let l = to_nalgebra(&DenseBlock::from_map(problem.reg_op().as_ref()));
    let lrows = if alpha > 0.0 { l.nrows() } else { 0 };
    let mut a = DMatrix::zeros(m + lrows, n + p);
    a.view_mut((0, 0), (m, n)).copy_from(&jx);
    a.view_mut((0, n), (m, p)).copy_from(&jw);
    let mut b = DVector::zeros(m + lrows);
    for i in 0..m {
        b[i] = -r[i];
    }
    if lrows > 0 {
        let sa = alpha.sqrt();
        a.view_mut((m, 0), (lrows, n)).copy_from(&(l.clone() * sa));
        let lx = &l * DVector::from_column_slice(x);
        for i in 0..lrows {
            b[m + i] = -sa * lx[i];
        }
    }
    let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
    (sol.as_slice()[..n].to_vec(), sol.as_slice()[n..].to_vec())
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let nb: f64 = b.iter().map(|y| y * y).sum();
    (d / nb).sqrt()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Asymptotic order of a Taylor remainder sequence taken at step sizes
/// halving each time: the largest mean order over three consecutive pairs.
pub fn taylor_order(errs: &[f64]) -> f64 {
    let orders: Vec<f64> = errs.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    orders
        .windows(3)
        .map(|o| o.iter().sum::<f64>() / 3.0)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn map_dense(map: &dyn LinearMap) -> DMatrix<f64> {
    to_nalgebra(&DenseBlock::from_map(map))
}
