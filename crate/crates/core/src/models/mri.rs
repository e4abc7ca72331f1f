use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::geometry::Grid;
use crate::linops::{Field, LinearMap};
use crate::{Error, Result};

/// Multi-coil Cartesian MRI with interleaved line sampling.
///
/// Images are complex and stored interleaved. Sensitivities are stored
/// coil-major: coil `j`, pixel `i` at complex index `j * n + i`.
#[derive(Clone)]
pub struct MriModel {
    pub grid: Grid,
    pub n_coils: usize,
    pub sensitivities: Arc<Vec<Complex64>>,
    /// Sampled Fourier rows (axis-1 frequency indices) for each frame.
    pub masks: Vec<Vec<usize>>,
}

impl MriModel {
    pub fn new(grid: &Grid, n_coils: usize, n_frames: usize) -> Result<Self> {
        Ok(MriModel {
            grid: grid.clone(),
            n_coils,
            sensitivities: Arc::new(synth_coils(grid, n_coils)?),
            masks: sampling_masks(grid, n_frames)?,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.masks.len()
    }

    pub fn frame_operator(&self, k: usize) -> MriFrameOperator {
        MriFrameOperator::new(&self.grid, self.sensitivities.clone(), self.n_coils, &self.masks[k])
    }
}

/// Smooth synthetic coil profiles: Gaussian magnitudes centered on a circle
/// around the image with a linear phase ramp per coil, normalized so that
/// the sum of squared magnitudes is one at every pixel.
pub fn synth_coils(grid: &Grid, n_coils: usize) -> Result<Vec<Complex64>> {
    if n_coils == 0 {
        return Err(Error::Config("at least one coil is required".into()));
    }
    if grid.dim() != 2 {
        return Err(Error::Config("coil profiles are defined for 2D grids".into()));
    }
    let n = grid.len();
    let c = grid.center();
    let ext = grid.extent(0).min(grid.extent(1));
    let radius = 0.45 * ext;
    let width = 0.5 * ext;
    let mut s = vec![Complex64::new(0.0, 0.0); n_coils * n];
    for j in 0..n_coils {
        let th = 2.0 * PI * j as f64 / n_coils as f64;
        let (dir_y, dir_x) = th.sin_cos();
        let p = [c[0] + radius * dir_x, c[1] + radius * dir_y];
        for i in 0..n {
            let xi = grid.cell_center(i);
            let d2 = (xi[0] - p[0]).powi(2) + (xi[1] - p[1]).powi(2);
            let mag = (-d2 / (2.0 * width * width)).exp();
            let phase = PI * ((xi[0] - c[0]) * dir_x + (xi[1] - c[1]) * dir_y) / ext;
            s[j * n + i] = Complex64::from_polar(mag, phase);
        }
    }
    for i in 0..n {
        let ss: f64 = (0..n_coils).map(|j| s[j * n + i].norm_sqr()).sum::<f64>().sqrt();
        for j in 0..n_coils {
            s[j * n + i] /= ss;
        }
    }
    Ok(s)
}

/// Frame `k` samples the Fourier rows `k, k + N, k + 2N, ...` along axis 1.
pub fn sampling_masks(grid: &Grid, n_frames: usize) -> Result<Vec<Vec<usize>>> {
    let ny = grid.cells()[1];
    if n_frames == 0 || ny % n_frames != 0 {
        return Err(Error::Config(format!(
            "{n_frames} samplings do not divide {ny} Fourier rows"
        )));
    }
    Ok((0..n_frames)
        .map(|k| (k..ny).step_by(n_frames).collect())
        .collect())
}

/// `A_k F S`: coil weighting, unitary 2D DFT per coil and selection of the
/// frame's Fourier rows. Output layout: coil, then sampled row, then axis-0
/// frequency.
pub struct MriFrameOperator {
    nx: usize,
    ny: usize,
    n_coils: usize,
    sens: Arc<Vec<Complex64>>,
    rows: Vec<usize>,
    /// `exp(-2 pi i k i1 / ny)` for each sampled row `k`, row-major.
    twiddle: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl MriFrameOperator {
    pub fn new(grid: &Grid, sens: Arc<Vec<Complex64>>, n_coils: usize, rows: &[usize]) -> Self {
        let (nx, ny) = (grid.cells()[0], grid.cells()[1]);
        let mut planner = FftPlanner::new();
        let mut twiddle = Vec::with_capacity(rows.len() * ny);
        for &k in rows {
            for i1 in 0..ny {
                let ang = -2.0 * PI * ((k * i1) % ny) as f64 / ny as f64;
                twiddle.push(Complex64::from_polar(1.0, ang));
            }
        }
        MriFrameOperator {
            nx,
            ny,
            n_coils,
            sens,
            rows: rows.to_vec(),
            twiddle,
            fwd: planner.plan_fft_forward(nx),
            inv: planner.plan_fft_inverse(nx),
            scale: 1.0 / ((nx * ny) as f64).sqrt(),
        }
    }

    fn coil_forward(&self, j: usize, x: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let n = nx * ny;
        let s = &self.sens[j * n..(j + 1) * n];
        let nr = self.rows.len();
        let mut lines = vec![Complex64::new(0.0, 0.0); nr * nx];
        for i1 in 0..ny {
            for i0 in 0..nx {
                let i = i1 * nx + i0;
                let z = s[i] * Complex64::new(x[2 * i], x[2 * i + 1]);
                for r in 0..nr {
                    lines[r * nx + i0] += z * self.twiddle[r * ny + i1];
                }
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        for line in lines.chunks_mut(nx) {
            self.fwd.process_with_scratch(line, &mut scratch);
        }
        for (o, v) in out.chunks_mut(2).zip(&lines) {
            o[0] = v.re * self.scale;
            o[1] = v.im * self.scale;
        }
    }

    fn coil_adjoint(&self, j: usize, y: &[f64]) -> Vec<Complex64> {
        let (nx, ny) = (self.nx, self.ny);
        let n = nx * ny;
        let nr = self.rows.len();
        let mut lines: Vec<Complex64> = y.chunks(2).map(|v| Complex64::new(v[0], v[1])).collect();
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        for line in lines.chunks_mut(nx) {
            self.inv.process_with_scratch(line, &mut scratch);
        }
        let s = &self.sens[j * n..(j + 1) * n];
        let mut img = vec![Complex64::new(0.0, 0.0); n];
        for i1 in 0..ny {
            for i0 in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..nr {
                    acc += lines[r * nx + i0] * self.twiddle[r * ny + i1].conj();
                }
                let i = i1 * nx + i0;
                img[i] = s[i].conj() * acc * self.scale;
            }
        }
        img
    }
}

impl LinearMap for MriFrameOperator {
    fn rows(&self) -> usize {
        2 * self.n_coils * self.rows.len() * self.nx
    }
    fn cols(&self) -> usize {
        2 * self.nx * self.ny
    }
    fn field(&self) -> Field {
        Field::Complex
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let per_coil = 2 * self.rows.len() * self.nx;
        y.par_chunks_mut(per_coil)
            .enumerate()
            .for_each(|(j, out)| self.coil_forward(j, x, out));
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let per_coil = 2 * self.rows.len() * self.nx;
        let parts: Vec<Vec<Complex64>> = (0..self.n_coils)
            .into_par_iter()
            .map(|j| self.coil_adjoint(j, &y[j * per_coil..(j + 1) * per_coil]))
            .collect();
        x.fill(0.0);
        for p in &parts {
            for (o, v) in x.chunks_mut(2).zip(p) {
                o[0] += v.re;
                o[1] += v.im;
            }
        }
    }
}
