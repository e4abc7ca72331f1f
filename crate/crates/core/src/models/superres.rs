use crate::geometry::Grid;
use crate::linops::LinearMap;
use crate::{Error, Result};

/// Multi-frame super-resolution: every frame is a block average of the
/// moved high-resolution image.
#[derive(Clone, Debug)]
pub struct SuperResModel {
    pub fine_grid: Grid,
    pub coarse_grid: Grid,
    pub factor: Vec<usize>,
    pub n_frames: usize,
}

impl SuperResModel {
    /// Both grids cover the same box `[0, extent]`.
    pub fn new(fine_cells: &[usize], factor: &[usize], extent: &[f64], n_frames: usize) -> Result<Self> {
        if factor.len() != fine_cells.len() {
            return Err(Error::Dimension("one downsampling factor per axis".into()));
        }
        let mut coarse = Vec::with_capacity(factor.len());
        for (a, (&c, &f)) in fine_cells.iter().zip(factor).enumerate() {
            if f == 0 || c % f != 0 {
                return Err(Error::Config(format!(
                    "factor {f} does not divide {c} cells on axis {a}"
                )));
            }
            coarse.push(c / f);
        }
        Ok(SuperResModel {
            fine_grid: Grid::with_extent(fine_cells, extent)?,
            coarse_grid: Grid::with_extent(&coarse, extent)?,
            factor: factor.to_vec(),
            n_frames,
        })
    }

    pub fn block_average_operator(&self) -> BlockAverage {
        BlockAverage::new(&self.fine_grid, &self.coarse_grid)
    }
}

/// Mean over `factor^dim` blocks of fine cells.
#[derive(Clone, Debug)]
pub struct BlockAverage {
    fine: [usize; 3],
    coarse: [usize; 3],
    factor: [usize; 3],
    weight: f64,
}

impl BlockAverage {
    pub fn new(fine: &Grid, coarse: &Grid) -> Self {
        let mut f = [1; 3];
        let mut c = [1; 3];
        let mut k = [1; 3];
        for a in 0..fine.dim() {
            f[a] = fine.cells()[a];
            c[a] = coarse.cells()[a];
            k[a] = f[a] / c[a];
        }
        BlockAverage {
            fine: f,
            coarse: c,
            factor: k,
            weight: 1.0 / (k[0] * k[1] * k[2]) as f64,
        }
    }

    #[inline]
    fn for_each_cell(&self, mut f: impl FnMut(usize, usize)) {
        let mut i = 0;
        for i2 in 0..self.fine[2] {
            let c2 = i2 / self.factor[2];
            for i1 in 0..self.fine[1] {
                let c1 = i1 / self.factor[1];
                let row = (c2 * self.coarse[1] + c1) * self.coarse[0];
                for i0 in 0..self.fine[0] {
                    f(i, row + i0 / self.factor[0]);
                    i += 1;
                }
            }
        }
    }
}

impl LinearMap for BlockAverage {
    fn rows(&self) -> usize {
        self.coarse.iter().product()
    }
    fn cols(&self) -> usize {
        self.fine.iter().product()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        self.for_each_cell(|i, c| y[c] += x[i]);
        y.iter_mut().for_each(|v| *v *= self.weight);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.for_each_cell(|i, c| x[i] = y[c] * self.weight);
    }
}
