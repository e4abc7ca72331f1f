//! LSQR, Tikhonov stacking and hybrid Golub-Kahan regularization with
//! weighted GCV.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::linops::{vstack, DenseBlock, LinearMap, MapRef, Scaled};
use crate::vecops::{axpy, dot, norm2};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LsqrOptions {
    pub atol: f64,
    pub btol: f64,
    pub max_iters: usize,
}

impl LsqrOptions {
    pub fn new(atol: f64, btol: f64, max_iters: usize) -> Self {
        LsqrOptions { atol, btol, max_iters }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridOptions {
    pub max_iters: usize,
    /// Update the GCV weight from the data at every step; otherwise `omega = 1`.
    pub wgcv_adaptive: bool,
    /// Stop once the GCV value changed by less than this (relative to the
    /// first value) for three consecutive steps.
    pub gcv_flat_tol: f64,
    /// LSQR-style tolerances on the unregularized iterate of the same
    /// bidiagonalization; 0 disables them.
    pub atol: f64,
    pub btol: f64,
    /// Use this regularization parameter at every step instead of GCV.
    pub fixed_alpha: Option<f64>,
}

impl Default for HybridOptions {
    fn default() -> Self {
        HybridOptions {
            max_iters: 50,
            wgcv_adaptive: true,
            gcv_flat_tol: 1e-6,
            atol: 0.0,
            btol: 0.0,
            fixed_alpha: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub alpha_history: Vec<f64>,
    /// Operator applications, forward plus adjoint.
    pub matvecs: usize,
    pub breakdown: bool,
}

/// Paige-Saunders LSQR for `min ||A x - b||` started from `x = 0`.
pub fn lsqr(a: &dyn LinearMap, b: &[f64], opts: &LsqrOptions) -> (Vec<f64>, SolveStats) {
    lsqr_impl(a, b, opts, |_, _| {})
}

/// LSQR that reports the iterate and its residual-norm estimate after every
/// iteration.
pub fn lsqr_trace(
    a: &dyn LinearMap,
    b: &[f64],
    opts: &LsqrOptions,
    observe: impl FnMut(&[f64], f64),
) -> (Vec<f64>, SolveStats) {
    lsqr_impl(a, b, opts, observe)
}

fn lsqr_impl(
    a: &dyn LinearMap,
    b: &[f64],
    opts: &LsqrOptions,
    mut observe: impl FnMut(&[f64], f64),
) -> (Vec<f64>, SolveStats) {
    let n = a.cols();
    let mut x = vec![0.0; n];
    let mut stats = SolveStats::default();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return (x, stats);
    }
    let mut u: Vec<f64> = b.iter().map(|v| v / bnorm).collect();
    let mut v = a.adjoint(&u);
    stats.matvecs += 1;
    let mut alpha = norm2(&v);
    if alpha == 0.0 {
        stats.final_relative_residual = 1.0;
        return (x, stats);
    }
    v.iter_mut().for_each(|t| *t /= alpha);
    let mut w = v.clone();
    let mut phibar = bnorm;
    let mut rhobar = alpha;
    let mut anorm2 = 0.0;
    let mut av = vec![0.0; a.rows()];
    let mut atu = vec![0.0; n];

    for it in 1..=opts.max_iters {
        a.apply_into(&v, &mut av);
        for (ui, avi) in u.iter_mut().zip(&av) {
            *ui = avi - alpha * *ui;
        }
        let beta = norm2(&u);
        if beta > 0.0 {
            u.iter_mut().for_each(|t| *t /= beta);
        }
        anorm2 += alpha * alpha + beta * beta;
        a.adjoint_into(&u, &mut atu);
        stats.matvecs += 2;
        for (vi, ai) in v.iter_mut().zip(&atu) {
            *vi = ai - beta * *vi;
        }
        alpha = norm2(&v);
        if alpha > 0.0 {
            v.iter_mut().for_each(|t| *t /= alpha);
        }

        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        axpy(phi / rho, &w, &mut x);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi = vi - (theta / rho) * *wi;
        }

        stats.iterations = it;
        let rnorm = phibar;
        let arnorm = phibar * alpha * c.abs();
        observe(&x, rnorm);
        if rnorm <= opts.btol * bnorm {
            break;
        }
        if rnorm > 0.0 && arnorm / (anorm2.sqrt() * rnorm) <= opts.atol {
            break;
        }
        if beta == 0.0 || alpha == 0.0 {
            stats.breakdown = true;
            break;
        }
    }
    stats.final_relative_residual = phibar / bnorm;
    (x, stats)
}

/// Builds `A_aug = [A; sqrt(alpha) L]` and `b_aug = -[r0; sqrt(alpha) L x0]`,
/// so that `min ||A_aug d - b_aug||` is
/// `min 1/2 ||A d + r0||^2 + alpha/2 ||L (x0 + d)||^2`.
pub fn tikhonov_stack(
    a: MapRef,
    l: MapRef,
    alpha: f64,
    x0: &[f64],
    r0: &[f64],
) -> Result<(MapRef, Vec<f64>)> {
    let lx0 = if alpha > 0.0 { l.apply(x0) } else { Vec::new() };
    tikhonov_stack_with_offset(a, l, alpha, &lx0, r0)
}

/// As [`tikhonov_stack`] with `L x0` supplied by the caller.
pub fn tikhonov_stack_with_offset(
    a: MapRef,
    l: MapRef,
    alpha: f64,
    lx0: &[f64],
    r0: &[f64],
) -> Result<(MapRef, Vec<f64>)> {
    let mut rhs: Vec<f64> = r0.iter().map(|v| -v).collect();
    if alpha == 0.0 {
        return Ok((a, rhs));
    }
    let s = alpha.sqrt();
    rhs.extend(lx0.iter().map(|v| -s * v));
    let reg: MapRef = Arc::new(Scaled::new(l, s));
    let aug: MapRef = Arc::new(vstack(vec![a, reg])?);
    Ok((aug, rhs))
}

/// Golub-Kahan bidiagonalization of `(A, b)` with full reorthogonalization.
///
/// After `k` calls to [`step`](Self::step), `A V_k = U_{k+1} B_k` where
/// `B_k` is the `(k+1) x k` lower bidiagonal matrix with diagonal
/// `alphas[0..k]` and subdiagonal `betas[1..=k]`.
pub struct GolubKahan<'a> {
    a: &'a dyn LinearMap,
    pub us: Vec<Vec<f64>>,
    pub vs: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub matvecs: usize,
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = dot(q, v);
        axpy(-c, q, v);
    }
}

impl<'a> GolubKahan<'a> {
    pub fn new(a: &'a dyn LinearMap, b: &[f64]) -> Self {
        let beta = norm2(b);
        let mut gk = GolubKahan {
            a,
            us: Vec::new(),
            vs: Vec::new(),
            alphas: Vec::new(),
            betas: vec![beta],
            matvecs: 0,
        };
        if beta == 0.0 {
            return gk;
        }
        let u: Vec<f64> = b.iter().map(|v| v / beta).collect();
        let mut v = a.adjoint(&u);
        gk.matvecs += 1;
        let alpha = norm2(&v);
        if alpha > 0.0 {
            v.iter_mut().for_each(|t| *t /= alpha);
        }
        gk.us.push(u);
        gk.vs.push(v);
        gk.alphas.push(alpha);
        gk
    }

    /// Number of completed steps `k`.
    pub fn len(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extends the factorization by one step. Returns `false` if a zero
    /// `beta` or `alpha` appeared, meaning the Krylov space is exhausted.
    pub fn step(&mut self) -> bool {
        let k = self.len();
        let mut u = self.a.apply(&self.vs[k]);
        axpy(-self.alphas[k], &self.us[k], &mut u);
        for _ in 0..2 {
            orthogonalize(&mut u, &self.us);
        }
        let beta = norm2(&u);
        if beta > 0.0 {
            u.iter_mut().for_each(|t| *t /= beta);
        }
        let mut v = self.a.adjoint(&u);
        self.matvecs += 2;
        axpy(-beta, &self.vs[k], &mut v);
        for _ in 0..2 {
            orthogonalize(&mut v, &self.vs);
        }
        let alpha = norm2(&v);
        if alpha > 0.0 {
            v.iter_mut().for_each(|t| *t /= alpha);
        }
        self.us.push(u);
        self.betas.push(beta);
        self.vs.push(v);
        self.alphas.push(alpha);
        beta > 0.0 && alpha > 0.0
    }

    /// The `(k+1) x k` bidiagonal matrix.
    pub fn bidiagonal(&self, k: usize) -> DenseBlock {
        let mut b = DenseBlock::zeros(k + 1, k);
        for i in 0..k {
            b.set(i, i, self.alphas[i]);
            b.set(i + 1, i, self.betas[i + 1]);
        }
        b
    }

    /// `V_k y`
    pub fn combine(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.a.cols()];
        for (vi, &yi) in self.vs.iter().zip(y) {
            axpy(yi, vi, &mut x);
        }
        x
    }
}

/// Spectral data of the projected right-hand side: singular values of
/// `B`, coefficients `c = beta * U^T e1` and the norm of the part of
/// `beta e1` outside the range of `B`.
struct Spectrum {
    sigma: Vec<f64>,
    coef: Vec<f64>,
    perp: f64,
    right: DMatrix<f64>,
}

fn spectrum(b: &DenseBlock, beta: f64) -> Spectrum {
    let mut g = vec![0.0; b.n_rows()];
    g[0] = beta;
    spectrum_rhs(b, &g)
}

/// SVD data of `B` against an arbitrary projected right-hand side `g`.
fn spectrum_rhs(b: &DenseBlock, g: &[f64]) -> Spectrum {
    let (m, k) = (b.n_rows(), b.n_cols());
    let mat = DMatrix::from_fn(m, k, |i, j| b.get(i, j));
    let svd = mat.svd(true, true);
    let u = svd.u.expect("left singular vectors");
    let vt = svd.v_t.expect("right singular vectors");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let coef: Vec<f64> = (0..sigma.len())
        .map(|j| (0..m).map(|i| u[(i, j)] * g[i]).sum())
        .collect();
    // part of g outside range(B), formed explicitly to avoid cancellation
    let perp = (0..m)
        .map(|i| {
            let proj: f64 = (0..sigma.len()).map(|j| u[(i, j)] * coef[j]).sum();
            (g[i] - proj).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    Spectrum {
        perp,
        sigma,
        coef,
        right: vt.transpose(),
    }
}

fn wgcv_value_spec(sp: &Spectrum, omega: f64, alpha: f64) -> f64 {
    let k = sp.sigma.len() as f64;
    let mut resid = sp.perp * sp.perp;
    let mut fit = 0.0;
    for (&s, &c) in sp.sigma.iter().zip(&sp.coef) {
        let s2 = s * s;
        let f = alpha / (s2 + alpha);
        resid += (f * c).powi(2);
        fit += s2 / (s2 + alpha);
    }
    let trace = (k + 1.0) - omega * fit;
    k * resid / (trace * trace)
}

/// Weighted GCV functional of the projected Tikhonov problem
/// `min ||B y - beta e1||^2 + alpha ||y||^2`.
pub fn wgcv_value(b: &DenseBlock, beta: f64, omega: f64, alpha: f64) -> f64 {
    wgcv_value_spec(&spectrum(b, beta), omega, alpha)
}

/// Minimizer of the weighted GCV functional over a logarithmic grid,
/// refined by golden-section search in `log(alpha)`.
pub fn wgcv_select(b: &DenseBlock, beta: f64, omega: f64) -> f64 {
    select_alpha(&spectrum(b, beta), omega)
}

const GRID_POINTS: usize = 200;

fn select_alpha(sp: &Spectrum, omega: f64) -> f64 {
    let smax = sp.sigma.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0.0;
    }
    let smin = sp.sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let lo = (smin * smin * 1e-3).min(smax * smax * 1e-10).max(f64::MIN_POSITIVE);
    let hi = smax * smax * 1e3;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| llo + (lhi - llo) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let g = |la: f64| wgcv_value_spec(sp, omega, la.exp());
    let vals: Vec<f64> = grid.iter().map(|&la| g(la)).collect();
    let best = (0..GRID_POINTS)
        .min_by(|&i, &j| vals[i].total_cmp(&vals[j]))
        .unwrap_or(0);
    let mut a = grid[best.saturating_sub(1)];
    let mut bnd = grid[(best + 1).min(GRID_POINTS - 1)];
    let ratio = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = bnd - ratio * (bnd - a);
    let mut d = a + ratio * (bnd - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..60 {
        if gc < gd {
            bnd = d;
            d = c;
            gd = gc;
            c = bnd - ratio * (bnd - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + ratio * (bnd - a);
            gd = g(d);
        }
    }
    let (lbest, gbest) = if gc < gd { (c, gc) } else { (d, gd) };
    if gbest <= vals[best] {
        lbest.exp()
    } else {
        grid[best].exp()
    }
}

/// GCV-optimal weight estimate at the current step, taking the Tikhonov
/// parameter equal to the smallest squared singular value.
fn estimate_omega(sp: &Spectrum) -> f64 {
    let k = sp.sigma.len();
    let m = (k + 1) as f64;
    let smin = sp.sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let alpha = smin;
    let alpha2 = alpha * alpha;
    let t0 = sp.perp * sp.perp;
    let (mut t1, mut t3, mut t4, mut t5, mut v2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&s, &c) in sp.sigma.iter().zip(&sp.coef) {
        let s2 = s * s;
        let tt = 1.0 / (s2 + alpha2);
        t1 += s2 * tt;
        t3 += (c * alpha * s).powi(2) * tt.powi(3);
        t4 += (s * tt).powi(2);
        t5 += (alpha2 * c * tt).powi(2);
        v2 += (c * s).powi(2) * tt.powi(3);
    }
    let den = t1 * t3 + t4 * (t5 + t0);
    if den > 0.0 && den.is_finite() {
        m * alpha2 * v2 / den
    } else {
        1.0
    }
}

fn tikhonov_coefficients(sp: &Spectrum, alpha: f64) -> Vec<f64> {
    let k = sp.right.nrows();
    let mut y = vec![0.0; k];
    for (i, (&s, &c)) in sp.sigma.iter().zip(&sp.coef).enumerate() {
        let den = s * s + alpha;
        if den == 0.0 {
            continue;
        }
        let f = s * c / den;
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += f * sp.right[(j, i)];
        }
    }
    y
}

/// Hybrid LSQR: Golub-Kahan bidiagonalization of `(A, b)` where each step
/// solves `min ||B_k y - beta e1||^2 + alpha_k ||y||^2` with `alpha_k` chosen
/// by weighted GCV, and returns `x = V_k y_k`.
pub fn hybrid_lsqr(a: &dyn LinearMap, b: &[f64], opts: &HybridOptions) -> (Vec<f64>, SolveStats) {
    hybrid_core(a, b, None, opts)
}

/// Hybrid LSQR for a step `d` with the penalty on `x0 + d`:
/// `min ||A d - b||^2 + alpha ||x0 + d||^2`. The Krylov space is built from
/// `b` and the projected problem is solved in `u = y + V_k^T x0`, so GCV
/// judges the regularized point rather than the step.
pub fn hybrid_lsqr_offset(a: &dyn LinearMap, b: &[f64], x0: &[f64], opts: &HybridOptions) -> (Vec<f64>, SolveStats) {
    hybrid_core(a, b, Some(x0), opts)
}

fn hybrid_core(a: &dyn LinearMap, b: &[f64], x0: Option<&[f64]>, opts: &HybridOptions) -> (Vec<f64>, SolveStats) {
    let mut stats = SolveStats::default();
    let mut gk = GolubKahan::new(a, b);
    let beta1 = gk.betas[0];
    stats.matvecs = gk.matvecs;
    if beta1 == 0.0 || gk.alphas[0] == 0.0 {
        stats.final_relative_residual = if beta1 == 0.0 { 0.0 } else { 1.0 };
        return (vec![0.0; a.cols()], stats);
    }
    let rows = a.rows() as f64;
    let cols = a.cols() as f64;
    let mut omegas: Vec<f64> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut g_first = None;
    let mut g_prev = 0.0;
    let mut flat_steps = 0;
    let mut anorm2 = 0.0;
    let mut rhobar = gk.alphas[0];
    let mut phibar = beta1;

    for k in 1..=opts.max_iters.max(1) {
        let ok = gk.step();
        stats.matvecs = gk.matvecs;
        stats.iterations = k;

        let (alpha_k, beta_k1, alpha_k1) = (gk.alphas[k - 1], gk.betas[k], gk.alphas[k]);
        anorm2 += alpha_k * alpha_k + beta_k1 * beta_k1;
        let rho = rhobar.hypot(beta_k1);
        let cs = rhobar / rho;
        let sn = beta_k1 / rho;
        rhobar = -cs * alpha_k1;
        phibar *= sn;
        let arnorm = phibar * alpha_k1 * cs.abs();

        let bk = gk.bidiagonal(k);
        let offset: Vec<f64> = match x0 {
            Some(x0) => gk.vs[..k].iter().map(|v| dot(v, x0)).collect(),
            None => Vec::new(),
        };
        let sp = if offset.is_empty() {
            spectrum(&bk, beta1)
        } else {
            let mut g = vec![0.0; k + 1];
            g[0] = beta1;
            for i in 0..=k {
                for (j, c) in offset.iter().enumerate() {
                    g[i] += bk.get(i, j) * c;
                }
            }
            spectrum_rhs(&bk, &g)
        };
        let omega = if opts.wgcv_adaptive {
            omegas.push(estimate_omega(&sp).min(1.0));
            omegas.iter().sum::<f64>() / omegas.len() as f64
        } else {
            1.0
        };
        let alpha = opts.fixed_alpha.unwrap_or_else(|| select_alpha(&sp, omega));
        stats.alpha_history.push(alpha);
        y = tikhonov_coefficients(&sp, alpha);
        for (yj, c) in y.iter_mut().zip(&offset) {
            *yj -= c;
        }

        let mut resid2 = sp.perp * sp.perp;
        let mut fit = 0.0;
        for (&s, &c) in sp.sigma.iter().zip(&sp.coef) {
            let s2 = s * s;
            resid2 += (alpha / (s2 + alpha) * c).powi(2);
            fit += s2 / (s2 + alpha);
        }
        stats.final_relative_residual = if offset.is_empty() {
            resid2.sqrt() / beta1
        } else {
            let r2: f64 = (0..=k)
                .map(|i| {
                    let by: f64 = (0..k).map(|j| bk.get(i, j) * y[j]).sum();
                    (by - if i == 0 { beta1 } else { 0.0 }).powi(2)
                })
                .sum();
            r2.sqrt() / beta1
        };
        let g = (resid2 / cols) / ((rows - fit) / rows).powi(2);

        if !ok {
            stats.breakdown = true;
            break;
        }
        if opts.btol > 0.0 && phibar <= opts.btol * beta1 {
            break;
        }
        if opts.atol > 0.0 && phibar > 0.0 && arnorm / (anorm2.sqrt() * phibar) <= opts.atol {
            break;
        }
        match g_first {
            None => g_first = Some(g),
            Some(g1) => {
                if g1 > 0.0 && (g - g_prev).abs() / g1 < opts.gcv_flat_tol {
                    flat_steps += 1;
                } else {
                    flat_steps = 0;
                }
                if flat_steps >= 3 {
                    break;
                }
            }
        }
        g_prev = g;
    }
    log::debug!(
        "hybrid: {} iterations, alpha {:?}, relres {:.3e}",
        stats.iterations,
        stats.alpha_history.last(),
        stats.final_relative_residual
    );
    (gk.combine(&y), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{Identity, ZeroMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseBlock {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseBlock::from_row_major(rows, cols, data).unwrap()
    }

    fn to_na(a: &DenseBlock) -> DMatrix<f64> {
        DMatrix::from_fn(a.n_rows(), a.n_cols(), |i, j| a.get(i, j))
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm2(&d) / norm2(b).max(1e-300)
    }

    #[test]
    fn lsqr_identity_and_zero_rhs() {
        let b = vec![1.0, -2.0, 3.5];
        let (x, st) = lsqr(&Identity::new(3), &b, &LsqrOptions::new(1e-12, 1e-12, 10));
        assert_eq!(st.iterations, 1);
        assert!(rel_err(&x, &b) < 1e-15);
        let (x, st) = lsqr(&Identity::new(3), &[0.0; 3], &LsqrOptions::new(1e-12, 1e-12, 10));
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(st.iterations, 0);
    }

    #[test]
    fn lsqr_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_dense(40, 20, &mut rng);
        let b: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (x, st) = lsqr(&a, &b, &LsqrOptions::new(1e-14, 1e-14, 200));
        assert_eq!(st.matvecs, 1 + 2 * st.iterations);
        let na = to_na(&a);
        let ata = na.transpose() * &na;
        let atb = na.transpose() * nalgebra::DVector::from_vec(b);
        let expect = ata.cholesky().unwrap().solve(&atb);
        assert!(rel_err(&x, expect.as_slice()) < 1e-8);
    }

    #[test]
    fn lsqr_residual_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_dense(60, 30, &mut rng);
        let b: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut prev = norm2(&b);
        lsqr_trace(&a, &b, &LsqrOptions::new(0.0, 0.0, 30), |x, _| {
            let r: Vec<f64> = a.apply(x).iter().zip(&b).map(|(u, v)| v - u).collect();
            let rn = norm2(&r);
            assert!(rn <= prev * (1.0 + 1e-12));
            prev = rn;
        });
    }

    #[test]
    fn tikhonov_stack_alpha_zero_is_plain() {
        let a: MapRef = Arc::new(Identity::new(3));
        let l: MapRef = Arc::new(Identity::new(3));
        let (aug, rhs) = tikhonov_stack(a, l, 0.0, &[1.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(aug.rows(), 3);
        assert_eq!(rhs, vec![-1.0, -2.0, -3.0]);
    }

    #[test]
    fn tikhonov_stack_zero_map_pulls_to_minus_x0() {
        let a: MapRef = Arc::new(ZeroMap::new(4, 3));
        let l: MapRef = Arc::new(Identity::new(3));
        let x0 = [0.5, -1.0, 2.0];
        let (aug, rhs) = tikhonov_stack(a, l, 0.3, &x0, &[1.0; 4]).unwrap();
        let (d, _) = lsqr(aug.as_ref(), &rhs, &LsqrOptions::new(1e-14, 1e-14, 50));
        for (di, xi) in d.iter().zip(&x0) {
            assert!((di + xi).abs() < 1e-12);
        }
    }

    #[test]
    fn tikhonov_stack_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_dense(15, 10, &mut rng);
        let l = random_dense(9, 10, &mut rng);
        let x0: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r0: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = 0.7;
        let (aug, rhs) =
            tikhonov_stack(Arc::new(a.clone()), Arc::new(l.clone()), alpha, &x0, &r0).unwrap();
        let (d, _) = lsqr(aug.as_ref(), &rhs, &LsqrOptions::new(1e-15, 1e-15, 500));
        let (na, nl) = (to_na(&a), to_na(&l));
        let lhs = na.transpose() * &na + alpha * nl.transpose() * &nl;
        let x0v = nalgebra::DVector::from_vec(x0);
        let r0v = nalgebra::DVector::from_vec(r0);
        let rhs2 = -(na.transpose() * r0v + alpha * nl.transpose() * (&nl * x0v));
        let expect = lhs.cholesky().unwrap().solve(&rhs2);
        assert!(rel_err(&d, expect.as_slice()) < 1e-8);
    }

    #[test]
    fn golub_kahan_orthogonality_and_fidelity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_dense(80, 40, &mut rng);
        let b: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut gk = GolubKahan::new(&a, &b);
        for k in 1..=30 {
            assert!(gk.step());
            let vmat = DMatrix::from_fn(40, k, |i, j| gk.vs[j][i]);
            let gram = vmat.transpose() * &vmat;
            let dev = (gram - DMatrix::identity(k, k)).abs().max();
            assert!(dev <= 1e-8);
            if k <= 10 {
                let umat = DMatrix::from_fn(80, k + 1, |i, j| gk.us[j][i]);
                let av = to_na(&a) * &vmat;
                let ub = umat * to_na(&gk.bidiagonal(k));
                assert!((av - ub).abs().max() <= 1e-10);
            }
        }
    }

    /// GCV evaluated straight from the influence matrix `B (B^T B + a I)^-1 B^T`.
    fn direct_gcv(b: &DenseBlock, beta: f64, alpha: f64) -> f64 {
        let nb = to_na(b);
        let k = nb.ncols();
        let inner = (nb.transpose() * &nb + alpha * DMatrix::identity(k, k)).try_inverse().unwrap();
        let h = &nb * inner * nb.transpose();
        let ih = DMatrix::identity(k + 1, k + 1) - h;
        let mut e1 = nalgebra::DVector::zeros(k + 1);
        e1[0] = beta;
        let r = &ih * e1;
        k as f64 * r.norm_squared() / ih.trace().powi(2)
    }

    fn random_bidiagonal(k: usize, rng: &mut ChaCha8Rng) -> DenseBlock {
        let mut b = DenseBlock::zeros(k + 1, k);
        for i in 0..k {
            b.set(i, i, rng.random_range(0.1..2.0));
            b.set(i + 1, i, rng.random_range(0.1..2.0));
        }
        b
    }

    #[test]
    fn wgcv_unit_weight_is_standard_gcv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_bidiagonal(6, &mut rng);
        for i in 0..10 {
            let alpha = 10f64.powf(-4.0 + 0.6 * i as f64);
            let got = wgcv_value(&b, 1.7, 1.0, alpha);
            let want = direct_gcv(&b, 1.7, alpha);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300), "{got} vs {want}");
        }
    }

    #[test]
    fn wgcv_picks_tiny_alpha_for_consistent_rhs() {
        // columns of B orthonormal, e1 in the range
        let mut b = DenseBlock::zeros(4, 3);
        for i in 0..3 {
            b.set(i, i, 1.0);
        }
        let alpha = wgcv_select(&b, 2.0, 1.0);
        assert!(alpha <= 1e-8, "{alpha}");
    }

    #[test]
    fn wgcv_two_singular_values_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let q = g.qr().q();
        let b = DenseBlock::from_row_major(
            3,
            2,
            (0..3).flat_map(|i| [q[(i, 0)], 1e-3 * q[(i, 1)]]).collect(),
        )
        .unwrap();
        let beta = 1.0;
        let selected = wgcv_select(&b, beta, 1.0);
        let (lo, hi) = (1e-10_f64, 1e3_f64);
        let samples = 10_000;
        let (mut best_a, mut best_g) = (lo, f64::INFINITY);
        for i in 0..samples {
            let a = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (samples - 1) as f64).exp();
            let g = direct_gcv(&b, beta, a);
            if g < best_g {
                best_g = g;
                best_a = a;
            }
        }
        let step = (hi.ln() - lo.ln()) / (GRID_POINTS - 1) as f64;
        assert!((selected.ln() - best_a.ln()).abs() <= step, "{selected} vs {best_a}");
    }

    #[test]
    fn hybrid_identity_noiseless() {
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() + 1.5).collect();
        let (x, st) = hybrid_lsqr(&Identity::new(20), &b, &HybridOptions::default());
        assert!(rel_err(&x, &b) < 1e-6);
        assert!(st.alpha_history.iter().take(3).last().copied().unwrap() <= 1e-6);
        let (x, _) = hybrid_lsqr(&Identity::new(20), &[0.0; 20], &HybridOptions::default());
        assert_eq!(x, vec![0.0; 20]);
    }

    #[test]
    fn hybrid_with_fixed_alpha_equals_tikhonov_lsqr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_dense(30, 20, &mut rng);
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = 0.05;
        for k in [3, 6] {
            let opts = HybridOptions {
                max_iters: k,
                gcv_flat_tol: 0.0,
                fixed_alpha: Some(alpha),
                ..HybridOptions::default()
            };
            let (xh, _) = hybrid_lsqr(&a, &b, &opts);
            let r0: Vec<f64> = b.iter().map(|v| -v).collect();
            let (aug, rhs) = tikhonov_stack(
                Arc::new(a.clone()),
                Arc::new(Identity::new(20)),
                alpha,
                &[0.0; 20],
                &r0,
            )
            .unwrap();
            let (xl, _) = lsqr(aug.as_ref(), &rhs, &LsqrOptions::new(0.0, 0.0, k));
            assert!(rel_err(&xh, &xl) < 1e-8);
        }
    }

    #[test]
    fn offset_hybrid_penalizes_the_shifted_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_dense(30, 12, &mut rng);
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = 0.3;
        // full Krylov dimension, so the projected problem is the whole problem
        let opts = HybridOptions {
            max_iters: 12,
            gcv_flat_tol: 0.0,
            fixed_alpha: Some(alpha),
            ..HybridOptions::default()
        };
        let (d, _) = hybrid_lsqr_offset(&a, &b, &x0, &opts);
        let am = to_na(&a);
        let h = am.transpose() * &am + DMatrix::identity(12, 12) * alpha;
        let g = am.transpose() * nalgebra::DVector::from_column_slice(&b) - nalgebra::DVector::from_column_slice(&x0) * alpha;
        let want = h.lu().solve(&g).unwrap();
        assert!(rel_err(&d, want.as_slice()) < 1e-8);
        let (d0, _) = hybrid_lsqr_offset(&a, &b, &[0.0; 12], &HybridOptions::default());
        let (h0, _) = hybrid_lsqr(&a, &b, &HybridOptions::default());
        assert!(rel_err(&d0, &h0) < 1e-12);
    }
}
