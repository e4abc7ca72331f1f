//! Forward models and the coupled residual `r(x, w) = K T(w) x - d`.

pub mod mri;
pub mod simulate;
pub mod superres;

use std::sync::Arc;

use rayon::prelude::*;

pub use mri::{sampling_masks, synth_coils, MriFrameOperator, MriModel};
pub use simulate::{
    add_frame_noise, add_global_noise, generate, initial_image, phantom, random_motion, Gauge,
    register_frames_init, InitialImageOptions, Instance, ProblemSpec, Scenario,
};
pub use superres::{BlockAverage, SuperResModel};

use crate::geometry::{n_motion_params, transformed_image_jacobian, Grid, MotionStack, WarpOperator};
use crate::linops::{
    chol_solve_normal, thin_qr, vstack, Composed, DenseBlock, Field, GradientOperator, Identity,
    LinearMap, MapRef, VStack,
};
use crate::vecops::dot;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    /// `L` is the forward-difference gradient, fixed `alpha`.
    Grad,
    /// `L = I`, fixed `alpha`.
    Identity,
    /// Tikhonov parameter chosen inside the Krylov solver at every step.
    Hybrid,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::Grad => "grad",
            Regularizer::Identity => "identity",
            Regularizer::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Regularizer::Grad),
            "identity" => Ok(Regularizer::Identity),
            "hybrid" => Ok(Regularizer::Hybrid),
            _ => Err(Error::Config(format!("unknown regularizer '{s}'"))),
        }
    }
}

/// Scalar box `[lo, hi]` applied to every component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

/// Distance to a bound at which a component counts as active.
pub const ACTIVE_TOL: f64 = 1e-12;

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("empty bound interval [{lo}, {hi}]")));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn unbounded() -> Self {
        Bounds {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn project(&self, v: &mut [f64]) {
        v.iter_mut().for_each(|x| *x = self.clamp(*x));
    }

    #[inline]
    pub fn at_lower(&self, v: f64) -> bool {
        (v - self.lo).abs() <= ACTIVE_TOL
    }

    #[inline]
    pub fn at_upper(&self, v: f64) -> bool {
        (self.hi - v).abs() <= ACTIVE_TOL
    }

    #[inline]
    pub fn is_active(&self, v: f64) -> bool {
        self.at_lower(v) || self.at_upper(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

/// `min 1/2 ||K T(w) x - d||^2 + alpha/2 ||L x||^2` over `x in Cx, w in Cw`.
#[derive(Clone)]
pub struct CoupledProblem {
    pub grid: Grid,
    /// 1 for real images, 2 for complex images.
    pub components: usize,
    pub frame_ops: Vec<MapRef>,
    pub data: Vec<f64>,
    /// Start of each frame's data; one extra entry holds the total length.
    pub offsets: Vec<usize>,
    pub regularizer: Regularizer,
    pub alpha: f64,
    pub bounds_x: Option<Bounds>,
    pub bounds_w: Option<Bounds>,
    pub truth: Option<Truth>,
    /// Grid on which single frames live, when they are images.
    pub data_grid: Option<Grid>,
    reg_op: MapRef,
}

impl CoupledProblem {
    pub fn new(
        grid: Grid,
        components: usize,
        frame_ops: Vec<MapRef>,
        data: Vec<f64>,
        regularizer: Regularizer,
        alpha: f64,
    ) -> Result<Self> {
        if !(1..=2).contains(&components) {
            return Err(Error::Config("images have one or two components".into()));
        }
        let n = grid.len() * components;
        let mut offsets = vec![0];
        for (k, op) in frame_ops.iter().enumerate() {
            if op.cols() != n {
                return Err(Error::Dimension(format!(
                    "frame {k} operator takes {} values, image has {n}",
                    op.cols()
                )));
            }
            offsets.push(offsets[k] + op.rows());
        }
        if *offsets.last().unwrap() != data.len() {
            return Err(Error::Dimension(format!(
                "data has {} values, operators produce {}",
                data.len(),
                offsets.last().unwrap()
            )));
        }
        let field = if components == 2 { Field::Complex } else { Field::Real };
        let reg_op: MapRef = match regularizer {
            Regularizer::Grad => Arc::new(GradientOperator::new(&grid, components)),
            Regularizer::Identity | Regularizer::Hybrid => Arc::new(Identity::with_field(n, field)),
        };
        Ok(CoupledProblem {
            grid,
            components,
            frame_ops,
            data,
            offsets,
            regularizer,
            alpha,
            bounds_x: None,
            bounds_w: None,
            truth: None,
            data_grid: None,
            reg_op,
        })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn n_frames(&self) -> usize {
        self.frame_ops.len()
    }

    pub fn n_image(&self) -> usize {
        self.grid.len() * self.components
    }

    pub fn motion_per_frame(&self) -> usize {
        n_motion_params(self.dim())
    }

    pub fn n_motion(&self) -> usize {
        self.motion_per_frame() * self.n_frames()
    }

    pub fn field(&self) -> Field {
        if self.components == 2 {
            Field::Complex
        } else {
            Field::Real
        }
    }

    pub fn is_hybrid(&self) -> bool {
        self.regularizer == Regularizer::Hybrid
    }

    /// Weight of `||L x||^2` in the reported objective; zero in hybrid mode.
    pub fn alpha_eff(&self) -> f64 {
        if self.is_hybrid() {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn reg_op(&self) -> MapRef {
        self.reg_op.clone()
    }

    pub fn frame_data(&self, k: usize) -> &[f64] {
        &self.data[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn motion(&self, w: &[f64]) -> Result<MotionStack> {
        if w.len() != self.n_motion() {
            return Err(Error::Dimension(format!(
                "motion vector of length {} for {} parameters",
                w.len(),
                self.n_motion()
            )));
        }
        MotionStack::from_flat(self.dim(), w)
    }

    fn warps(&self, w: &[f64]) -> Vec<WarpOperator> {
        let ms = self.motion(w).expect("motion vector length");
        ms.frames
            .iter()
            .map(|m| WarpOperator::new(&self.grid, m, self.components))
            .collect()
    }

    /// `K T(w) x`, frame by frame.
    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let warps = self.warps(w);
        let mut out = vec![0.0; self.data.len()];
        let mut chunks = Vec::with_capacity(self.n_frames());
        let mut rest = out.as_mut_slice();
        for k in 0..self.n_frames() {
            let (head, tail) = rest.split_at_mut(self.offsets[k + 1] - self.offsets[k]);
            chunks.push(head);
            rest = tail;
        }
        chunks
            .into_par_iter()
            .zip(warps.par_iter().zip(self.frame_ops.par_iter()))
            .for_each(|(y, (t, op))| {
                let tx = t.apply(x);
                op.apply_into(&tx, y);
            });
        out
    }

    pub fn residual(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut r = self.forward(x, w);
        for (ri, di) in r.iter_mut().zip(&self.data) {
            *ri -= di;
        }
        r
    }

    /// `1/2 ||r||^2 + alpha_eff/2 ||L x||^2`
    pub fn objective_from_residual(&self, x: &[f64], r: &[f64]) -> f64 {
        let mut phi = 0.5 * dot(r, r);
        let a = self.alpha_eff();
        if a > 0.0 {
            let lx = self.reg_op.apply(x);
            phi += 0.5 * a * dot(&lx, &lx);
        }
        phi
    }

    pub fn residual_and_objective(&self, x: &[f64], w: &[f64]) -> (Vec<f64>, f64) {
        let r = self.residual(x, w);
        let phi = self.objective_from_residual(x, &r);
        (r, phi)
    }

    /// `J_x = K T(w)` as a stacked operator over frames.
    pub fn jx_operator(&self, w: &[f64]) -> VStack {
        let blocks: Vec<MapRef> = self
            .warps(w)
            .into_iter()
            .zip(&self.frame_ops)
            .map(|(t, op)| -> MapRef {
                Arc::new(Composed::new(op.clone(), Arc::new(t)).expect("frame operator shape"))
            })
            .collect();
        vstack(blocks).expect("frame operators share the image size")
    }

    /// Per-frame `K_k d(T(y(w_k)) x)/dw_k`.
    pub fn assemble_jw(&self, x: &[f64], w: &[f64]) -> JwBlocks {
        let ms = self.motion(w).expect("motion vector length");
        let blocks: Vec<DenseBlock> = ms
            .frames
            .par_iter()
            .zip(self.frame_ops.par_iter())
            .map(|(m, op)| {
                let dt = transformed_image_jacobian(x, m, &self.grid);
                let cols: Vec<Vec<f64>> = (0..dt.n_cols()).map(|j| op.apply(&dt.column(j))).collect();
                DenseBlock::from_columns(op.rows(), &cols).expect("column lengths")
            })
            .collect();
        JwBlocks {
            blocks,
            offsets: self.offsets.clone(),
        }
    }

    /// Gradient of the objective: `(J_x^T r + alpha_eff L^T L x, J_w^T r)`.
    pub fn gradient(&self, x: &[f64], w: &[f64], r: &[f64], jw: &JwBlocks) -> (Vec<f64>, Vec<f64>) {
        let mut gx = self.jx_operator(w).adjoint(r);
        let a = self.alpha_eff();
        if a > 0.0 {
            let ltlx = self.reg_op.adjoint(&self.reg_op.apply(x));
            crate::vecops::axpy(a, &ltlx, &mut gx);
        }
        (gx, jw.t_apply(r))
    }
}

/// Motion Jacobian, one dense `m_k x q` block per frame.
#[derive(Clone, Debug)]
pub struct JwBlocks {
    pub blocks: Vec<DenseBlock>,
    offsets: Vec<usize>,
}

impl JwBlocks {
    pub fn new(blocks: Vec<DenseBlock>) -> Self {
        let mut offsets = vec![0];
        for b in &blocks {
            offsets.push(offsets.last().unwrap() + b.n_rows());
        }
        JwBlocks { blocks, offsets }
    }

    pub fn q(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.n_cols())
    }

    pub fn n_params(&self) -> usize {
        self.q() * self.blocks.len()
    }

    pub fn apply(&self, dw: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut out = Vec::with_capacity(*self.offsets.last().unwrap());
        for (k, b) in self.blocks.iter().enumerate() {
            out.extend(b.matvec(&dw[k * q..(k + 1) * q]));
        }
        out
    }

    pub fn t_apply(&self, r: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (k, b) in self.blocks.iter().enumerate() {
            out.extend(b.t_matvec(&r[self.offsets[k]..self.offsets[k + 1]]));
        }
        out
    }

    /// Thin QR of every block, keeping only the columns with
    /// `active[j] == false` (all columns when `active` is `None`).
    pub fn factor(&self, active: Option<&[bool]>) -> Result<JwFactors> {
        let q = self.q();
        let factors = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(k, b)| {
                let keep: Vec<bool> = match active {
                    Some(a) => a[k * q..(k + 1) * q].iter().map(|&v| !v).collect(),
                    None => vec![true; q],
                };
                let kept: Vec<usize> = (0..q).filter(|&j| keep[j]).collect();
                if kept.is_empty() {
                    return Ok(FrameFactor { q: None, r: None, kept });
                }
                match thin_qr(&b.select_columns(&keep)) {
                    Ok((qm, rm)) => Ok(FrameFactor {
                        q: Some(qm),
                        r: Some(rm),
                        kept,
                    }),
                    Err(Error::RankDeficient { value, .. }) => Err(Error::RankDeficient { frame: k, value }),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JwFactors {
            frames: factors,
            offsets: self.offsets.clone(),
            q,
        })
    }
}

#[derive(Clone, Debug)]
struct FrameFactor {
    q: Option<DenseBlock>,
    r: Option<DenseBlock>,
    kept: Vec<usize>,
}

/// Thin-QR factors of the (inactive part of the) motion Jacobian.
#[derive(Clone, Debug)]
pub struct JwFactors {
    frames: Vec<FrameFactor>,
    offsets: Vec<usize>,
    q: usize,
}

impl JwFactors {
    /// `v - Q Q^T v`, frame by frame.
    pub fn project_perp(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.project_perp_in_place(&mut out);
        out
    }

    pub fn project_perp_in_place(&self, v: &mut [f64]) {
        for (k, f) in self.frames.iter().enumerate() {
            if let Some(q) = &f.q {
                let seg = &mut v[self.offsets[k]..self.offsets[k + 1]];
                let c = q.t_matvec(seg);
                let qc = q.matvec(&c);
                for (s, t) in seg.iter_mut().zip(&qc) {
                    *s -= t;
                }
            }
        }
    }

    /// Solves `(J^T J) dw = rhs` per frame on the kept columns; entries of
    /// `rhs` for dropped columns are ignored and the result is zero there.
    pub fn solve_normal(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.frames.len() * self.q];
        for (k, f) in self.frames.iter().enumerate() {
            if let Some(r) = &f.r {
                let sub: Vec<f64> = f.kept.iter().map(|&j| rhs[k * self.q + j]).collect();
                let sol = chol_solve_normal(r, &sub)?;
                for (&j, v) in f.kept.iter().zip(sol) {
                    out[k * self.q + j] = v;
                }
            }
        }
        Ok(out)
    }
}

/// `P_perp` as a linear operator.
pub struct ProjectorPerp {
    factors: Arc<JwFactors>,
    len: usize,
    field: Field,
}

impl ProjectorPerp {
    pub fn new(factors: Arc<JwFactors>, field: Field) -> Self {
        let len = *factors.offsets.last().unwrap();
        ProjectorPerp { factors, len, field }
    }
}

impl LinearMap for ProjectorPerp {
    fn rows(&self) -> usize {
        self.len
    }
    fn cols(&self) -> usize {
        self.len
    }
    fn field(&self) -> Field {
        self.field
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
        self.factors.project_perp_in_place(y);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.apply_into(y, x)
    }
}
