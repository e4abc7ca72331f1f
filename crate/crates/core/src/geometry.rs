//! Cell-centered grids, rigid motions and bilinear/trilinear resampling.
//!
//! Images live on a rectangular cell-centered grid with lexicographic cell
//! ordering (axis 0 fastest). A rigid motion maps every cell center `xi` to
//!
//! ```text
//! y = Q(angles) (xi - c) + c + t
//! ```
//!
//! with `c` the center of the domain box. Resampling an image at the moved
//! points uses multilinear interpolation with zero extension outside the
//! lattice.

use crate::linops::{DenseBlock, Field, LinearMap, SparseMatrix};
use crate::{Error, Result};

/// Snap continuous lattice coordinates this close to an integer.
const SNAP_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    cells: [usize; 3],
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Grid {
    pub fn new(cells: &[usize], lo: &[f64], hi: &[f64]) -> Result<Self> {
        let dim = cells.len();
        if !(2..=3).contains(&dim) || lo.len() != dim || hi.len() != dim {
            return Err(Error::Dimension(format!(
                "grid needs 2 or 3 axes with matching bounds, got {} cells, {} lo, {} hi",
                cells.len(),
                lo.len(),
                hi.len()
            )));
        }
        let mut g = Grid {
            dim,
            cells: [1; 3],
            lo: [0.0; 3],
            hi: [1.0; 3],
        };
        for a in 0..dim {
            if cells[a] == 0 || !(hi[a] > lo[a]) {
                return Err(Error::Dimension(format!(
                    "axis {a}: {} cells on [{}, {}]",
                    cells[a], lo[a], hi[a]
                )));
            }
            g.cells[a] = cells[a];
            g.lo[a] = lo[a];
            g.hi[a] = hi[a];
        }
        Ok(g)
    }

    /// Grid on the box `[0, extent_a]` along each axis.
    pub fn with_extent(cells: &[usize], extent: &[f64]) -> Result<Self> {
        let lo = vec![0.0; cells.len()];
        Grid::new(cells, &lo, extent)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo[..self.dim]
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi[..self.dim]
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.cells[axis] as f64
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Center of the domain box; rotations are about this point.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..self.dim {
            c[a] = 0.5 * (self.lo[a] + self.hi[a]);
        }
        c
    }

    /// Linear index of the cell with per-axis indices `idx`.
    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for a in (0..self.dim).rev() {
            lin = lin * self.cells[a] + idx[a];
        }
        lin
    }

    /// Per-axis indices of linear cell `i`.
    pub fn multi_index(&self, mut i: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        for a in 0..self.dim {
            idx[a] = i % self.cells[a];
            i /= self.cells[a];
        }
        idx
    }

    #[inline]
    pub(crate) fn center_coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.cell_size(axis)
    }

    /// Coordinates of cell center `i`.
    #[inline]
    pub fn cell_center(&self, i: usize) -> [f64; 3] {
        let idx = self.multi_index(i);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.center_coord(a, idx[a]);
        }
        p
    }
}

/// Rigid motion: rotation angles (radians) and translation (domain units).
///
/// In 2D there is a single angle; in 3D the rotation is `Rz(a3) Ry(a2) Rx(a1)`.
/// The parameter vector is `[angles..., translation...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidMotion {
    dim: usize,
    angles: [f64; 3],
    translation: [f64; 3],
}

pub fn n_motion_params(dim: usize) -> usize {
    if dim == 2 {
        3
    } else {
        6
    }
}

fn n_angles(dim: usize) -> usize {
    if dim == 2 {
        1
    } else {
        3
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

impl RigidMotion {
    pub fn identity(dim: usize) -> Self {
        RigidMotion {
            dim,
            angles: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn new(dim: usize, angles: &[f64], translation: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dim) || angles.len() != n_angles(dim) || translation.len() != dim {
            return Err(Error::Dimension(format!(
                "{dim}D rigid motion needs {} angles and {dim} shifts",
                n_angles(dim)
            )));
        }
        let mut m = RigidMotion::identity(dim);
        m.angles[..angles.len()].copy_from_slice(angles);
        m.translation[..dim].copy_from_slice(translation);
        Ok(m)
    }

    pub fn from_params(dim: usize, params: &[f64]) -> Result<Self> {
        let na = n_angles(dim);
        if params.len() != n_motion_params(dim) {
            return Err(Error::Dimension(format!(
                "{dim}D rigid motion has {} parameters, got {}",
                n_motion_params(dim),
                params.len()
            )));
        }
        RigidMotion::new(dim, &params[..na], &params[na..])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles[..n_angles(self.dim)]
    }

    pub fn translation(&self) -> &[f64] {
        &self.translation[..self.dim]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.angles().to_vec();
        p.extend_from_slice(self.translation());
        p
    }

    /// Rotation matrix (upper-left `dim x dim` block is meaningful).
    pub fn rotation(&self) -> Mat3 {
        if self.dim == 2 {
            let (s, c) = self.angles[0].sin_cos();
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        } else {
            let [rx, ry, rz] = self.axis_rotations();
            matmul3(&rz, &matmul3(&ry, &rx))
        }
    }

    fn axis_rotations(&self) -> [Mat3; 3] {
        let (s1, c1) = self.angles[0].sin_cos();
        let (s2, c2) = self.angles[1].sin_cos();
        let (s3, c3) = self.angles[2].sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, c1, -s1], [0.0, s1, c1]];
        let ry = [[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]];
        let rz = [[c3, -s3, 0.0], [s3, c3, 0.0], [0.0, 0.0, 1.0]];
        [rx, ry, rz]
    }

    /// Derivatives of the rotation matrix with respect to each angle.
    pub fn rotation_derivatives(&self) -> Vec<Mat3> {
        if self.dim == 2 {
            let (s, c) = self.angles[0].sin_cos();
            vec![[[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]]
        } else {
            let (s1, c1) = self.angles[0].sin_cos();
            let (s2, c2) = self.angles[1].sin_cos();
            let (s3, c3) = self.angles[2].sin_cos();
            let [rx, ry, rz] = self.axis_rotations();
            let drx = [[0.0, 0.0, 0.0], [0.0, -s1, -c1], [0.0, c1, -s1]];
            let dry = [[-s2, 0.0, c2], [0.0, 0.0, 0.0], [-c2, 0.0, -s2]];
            let drz = [[-s3, -c3, 0.0], [c3, -s3, 0.0], [0.0, 0.0, 0.0]];
            vec![
                matmul3(&rz, &matmul3(&ry, &drx)),
                matmul3(&rz, &matmul3(&dry, &rx)),
                matmul3(&drz, &matmul3(&ry, &rx)),
            ]
        }
    }

    /// Point map `xi -> xi + (Q - I)(xi - c) + t`.
    ///
    /// Written as an increment so that the zero motion reproduces the cell
    /// centers bit for bit.
    pub(crate) fn mapper(&self, grid: &Grid) -> PointMap {
        let mut q = self.rotation();
        for (a, row) in q.iter_mut().enumerate() {
            row[a] -= 1.0;
        }
        PointMap {
            dim: self.dim,
            q_minus_i: q,
            center: grid.center(),
            shift: self.translation,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PointMap {
    dim: usize,
    q_minus_i: Mat3,
    center: [f64; 3],
    shift: [f64; 3],
}

impl PointMap {
    #[inline]
    pub(crate) fn map(&self, xi: &[f64; 3]) -> [f64; 3] {
        let d = self.dim;
        let mut u = [0.0; 3];
        for a in 0..d {
            u[a] = xi[a] - self.center[a];
        }
        let mut y = [0.0; 3];
        for a in 0..d {
            let mut inc = 0.0;
            for b in 0..d {
                inc += self.q_minus_i[a][b] * u[b];
            }
            y[a] = xi[a] + inc + self.shift[a];
        }
        y
    }
}

/// Motion parameters for all frames, in frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionStack {
    pub frames: Vec<RigidMotion>,
}

impl MotionStack {
    pub fn identity(dim: usize, n_frames: usize) -> Self {
        MotionStack {
            frames: vec![RigidMotion::identity(dim); n_frames],
        }
    }

    pub fn from_flat(dim: usize, w: &[f64]) -> Result<Self> {
        let q = n_motion_params(dim);
        if w.len() % q != 0 {
            return Err(Error::Dimension(format!(
                "motion vector of length {} is not a multiple of {q}",
                w.len()
            )));
        }
        let frames = w
            .chunks(q)
            .map(|c| RigidMotion::from_params(dim, c))
            .collect::<Result<_>>()?;
        Ok(MotionStack { frames })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|m| m.params()).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Moved cell centers, `n x dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedGrid {
    pub dim: usize,
    pub points: Vec<f64>,
}

impl TransformedGrid {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn cell_centers(grid: &Grid) -> TransformedGrid {
    let d = grid.dim();
    let mut points = Vec::with_capacity(grid.len() * d);
    for i in 0..grid.len() {
        points.extend_from_slice(&grid.cell_center(i)[..d]);
    }
    TransformedGrid { dim: d, points }
}

pub fn rigid_apply(motion: &RigidMotion, grid: &Grid) -> TransformedGrid {
    let d = grid.dim();
    let map = motion.mapper(grid);
    let mut points = Vec::with_capacity(grid.len() * d);
    for i in 0..grid.len() {
        points.extend_from_slice(&map.map(&grid.cell_center(i))[..d]);
    }
    TransformedGrid { dim: d, points }
}

/// `dy/dw` stacked over cell centers: an `(n*dim) x q` block with row
/// `i*dim + a` holding the derivative of coordinate `a` of point `i`.
pub fn rigid_jacobian(motion: &RigidMotion, grid: &Grid) -> DenseBlock {
    let d = grid.dim();
    let q = n_motion_params(d);
    let na = n_angles(d);
    let dq = motion.rotation_derivatives();
    let c = grid.center();
    let mut jac = DenseBlock::zeros(grid.len() * d, q);
    for i in 0..grid.len() {
        let xi = grid.cell_center(i);
        for a in 0..d {
            let row = i * d + a;
            for (j, dqj) in dq.iter().enumerate() {
                let v: f64 = (0..d).map(|b| dqj[a][b] * (xi[b] - c[b])).sum();
                jac.set(row, j, v);
            }
            jac.set(row, na + a, 1.0);
        }
    }
    jac
}

/// Integer cell and fraction of a lattice coordinate, snapping values within
/// `SNAP_TOL` of an integer onto it.
#[inline]
fn split_coordinate(s: f64) -> (i64, f64) {
    // truncation-based floor; avoids a libm call on baseline x86-64
    let mut fl = s as i64;
    if (fl as f64) > s {
        fl -= 1;
    }
    let frac = s - fl as f64;
    if frac < SNAP_TOL {
        (fl, 0.0)
    } else if frac > 1.0 - SNAP_TOL {
        (fl + 1, 0.0)
    } else {
        (fl, frac)
    }
}

/// Interpolation stencil of a single point: up to `2^dim` lattice
/// neighbours with weights and weight gradients.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub len: usize,
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
}

impl Stencil {
    /// Multilinear stencil of point `p`; neighbours outside the lattice are
    /// dropped (zero extension). The containing cell is chosen with `floor`,
    /// so derivatives on cell faces are taken from the cell on the right.
    #[inline]
    pub(crate) fn at(grid: &Grid, p: &[f64; 3]) -> Stencil {
        let d = grid.dim;
        let mut base = [0_i64; 3];
        let mut frac = [0.0; 3];
        let mut inv_h = [0.0; 3];
        for a in 0..d {
            let h = grid.cell_size(a);
            (base[a], frac[a]) = split_coordinate((p[a] - grid.lo[a]) / h - 0.5);
            inv_h[a] = 1.0 / h;
        }
        let mut st = Stencil {
            len: 0,
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 3]; 8],
        };
        'corner: for corner in 0..(1usize << d) {
            let mut lin = 0usize;
            let mut fac = [0.0; 3];
            let mut dfac = [0.0; 3];
            for a in (0..d).rev() {
                let bit = (corner >> a) & 1;
                let j = base[a] + bit as i64;
                if j < 0 || j >= grid.cells[a] as i64 {
                    continue 'corner;
                }
                lin = lin * grid.cells[a] + j as usize;
                if bit == 1 {
                    fac[a] = frac[a];
                    dfac[a] = inv_h[a];
                } else {
                    fac[a] = 1.0 - frac[a];
                    dfac[a] = -inv_h[a];
                }
            }
            let mut w = 1.0;
            for f in fac.iter().take(d) {
                w *= f;
            }
            let mut dw = [0.0; 3];
            for a in 0..d {
                let mut g = dfac[a];
                for b in 0..d {
                    if b != a {
                        g *= fac[b];
                    }
                }
                dw[a] = g;
            }
            let k = st.len;
            st.idx[k] = lin;
            st.w[k] = w;
            st.dw[k] = dw;
            st.len += 1;
        }
        st
    }
}

/// Sparse interpolation matrix `T(y)`: row `i` holds the multilinear weights
/// of point `y_i` against the cell-centered lattice of `grid`.
pub fn interp_matrix(y: &TransformedGrid, grid: &Grid) -> SparseMatrix {
    let n = grid.len();
    let d = grid.dim();
    let mut indptr = Vec::with_capacity(y.len() + 1);
    let mut indices = Vec::with_capacity(y.len() << d);
    let mut values = Vec::with_capacity(y.len() << d);
    indptr.push(0);
    for i in 0..y.len() {
        let mut p = [0.0; 3];
        p[..d].copy_from_slice(y.point(i));
        let st = Stencil::at(grid, &p);
        let mut row: Vec<(usize, f64)> = (0..st.len).map(|k| (st.idx[k], st.w[k])).collect();
        row.sort_by_key(|e| e.0);
        for (j, w) in row {
            if w != 0.0 {
                indices.push(j);
                values.push(w);
            }
        }
        indptr.push(indices.len());
    }
    SparseMatrix::from_csr(y.len(), n, indptr, indices, values)
        .expect("interpolation stencil indices are in range")
}

/// Matrix-free `T(y(w))` acting on images with `components` interleaved
/// channels (1 for real images, 2 for complex ones). Points and weights are
/// recomputed on every application, so memory use does not grow with the
/// number of frames.
#[derive(Clone, Debug)]
pub struct WarpOperator {
    grid: Grid,
    cells: [usize; 3],
    // continuous lattice coordinate of point i: idx + grad * idx + offset
    grad: Mat3,
    offset: [f64; 3],
    components: usize,
}

impl WarpOperator {
    pub fn new(grid: &Grid, motion: &RigidMotion, components: usize) -> Self {
        let d = grid.dim();
        let map = motion.mapper(grid);
        let mut cells = [1; 3];
        let mut grad = [[0.0; 3]; 3];
        let mut offset = [0.0; 3];
        for a in 0..d {
            cells[a] = grid.cells[a];
            let ha = grid.cell_size(a);
            let mut c = map.shift[a];
            for b in 0..d {
                let hb = grid.cell_size(b);
                grad[a][b] = map.q_minus_i[a][b] * hb / ha;
                c += map.q_minus_i[a][b] * (grid.lo[b] + 0.5 * hb - map.center[b]);
            }
            offset[a] = c / ha;
        }
        WarpOperator {
            grid: grid.clone(),
            cells,
            grad,
            offset,
            components,
        }
    }

    /// Calls `f(row, indices, weights, len)` for every lattice point in order.
    #[inline]
    fn for_each_stencil(&self, mut f: impl FnMut(usize, &[usize; 8], &[f64; 8], usize)) {
        let d = self.grid.dim();
        let cells = self.cells;
        let mut row = 0;
        let mut idx = [0usize; 8];
        let mut wts = [0.0; 8];
        for i2 in 0..cells[2] {
            for i1 in 0..cells[1] {
                for i0 in 0..cells[0] {
                    let p = [i0 as f64, i1 as f64, i2 as f64];
                    let mut base = [0_i64; 3];
                    let mut frac = [0.0; 3];
                    for a in 0..d {
                        let g = &self.grad[a];
                        let s = p[a] + (g[0] * p[0] + g[1] * p[1] + g[2] * p[2]) + self.offset[a];
                        (base[a], frac[a]) = split_coordinate(s);
                    }
                    let mut len = 0;
                    'corner: for corner in 0..(1usize << d) {
                        let mut lin = 0usize;
                        let mut w = 1.0;
                        for a in (0..d).rev() {
                            let bit = (corner >> a) & 1;
                            let j = base[a] + bit as i64;
                            if j < 0 || j >= cells[a] as i64 {
                                continue 'corner;
                            }
                            lin = lin * cells[a] + j as usize;
                            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                        }
                        idx[len] = lin;
                        wts[len] = w;
                        len += 1;
                    }
                    f(row, &idx, &wts, len);
                    row += 1;
                }
            }
        }
    }
}

impl LinearMap for WarpOperator {
    fn rows(&self) -> usize {
        self.grid.len() * self.components
    }

    fn cols(&self) -> usize {
        self.grid.len() * self.components
    }

    fn field(&self) -> Field {
        if self.components == 2 {
            Field::Complex
        } else {
            Field::Real
        }
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let nc = self.components;
        self.for_each_stencil(|i, idx, w, len| {
            for c in 0..nc {
                let mut acc = 0.0;
                for k in 0..len {
                    acc += w[k] * x[idx[k] * nc + c];
                }
                y[i * nc + c] = acc;
            }
        });
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let nc = self.components;
        x.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_stencil(|i, idx, w, len| {
            for c in 0..nc {
                let yi = y[i * nc + c];
                for k in 0..len {
                    x[idx[k] * nc + c] += w[k] * yi;
                }
            }
        });
    }
}

/// `d(T(y(w)) x)/dw`: an `(n*components) x q` block. Row `i*components + c`
/// is the spatial gradient of channel `c` of the interpolant at `y_i`,
/// contracted with `dy_i/dw`.
pub fn transformed_image_jacobian(x: &[f64], motion: &RigidMotion, grid: &Grid) -> DenseBlock {
    let d = grid.dim();
    let n = grid.len();
    let nc = x.len() / n;
    assert_eq!(nc * n, x.len(), "image length must be a multiple of the cell count");
    let q = n_motion_params(d);
    let na = n_angles(d);
    let map = motion.mapper(grid);
    let dq = motion.rotation_derivatives();
    let c0 = grid.center();
    let mut jac = DenseBlock::zeros(n * nc, q);
    for i in 0..n {
        let xi = grid.cell_center(i);
        let st = Stencil::at(grid, &map.map(&xi));
        // dy/dw for this point: dim x q
        let mut dy = [[0.0; 6]; 3];
        for a in 0..d {
            for (j, dqj) in dq.iter().enumerate() {
                dy[a][j] = (0..d).map(|b| dqj[a][b] * (xi[b] - c0[b])).sum();
            }
            dy[a][na + a] = 1.0;
        }
        for c in 0..nc {
            let mut g = [0.0; 3];
            for k in 0..st.len {
                let v = x[st.idx[k] * nc + c];
                for a in 0..d {
                    g[a] += st.dw[k][a] * v;
                }
            }
            let row = i * nc + c;
            for j in 0..q {
                let v: f64 = (0..d).map(|a| g[a] * dy[a][j]).sum();
                jac.set(row, j, v);
            }
        }
    }
    jac
}
