//! Matrix-free linear operators and small dense factorizations.
//!
//! Every operator acts on real coordinate vectors. Complex vectors are
//! stored interleaved, so a complex `m x n` operator reports `rows() == 2m`
//! and `cols() == 2n`, and its `adjoint_into` is the conjugate transpose.
//! With this convention `<A u, v> = <u, A^H v>` holds for the real inner
//! product `Re(a^H b)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::Grid;
use crate::vecops::{dot, norm2};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Real,
    Complex,
}

pub trait LinearMap: Send + Sync {
    /// Length of output vectors (real coordinates).
    fn rows(&self) -> usize;
    /// Length of input vectors (real coordinates).
    fn cols(&self) -> usize;

    fn field(&self) -> Field {
        Field::Real
    }

    /// `y = A x`; `y` is overwritten.
    fn apply_into(&self, x: &[f64], y: &mut [f64]);

    /// `x = A^H y`; `x` is overwritten.
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows()];
        self.apply_into(x, &mut y);
        y
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols()];
        self.adjoint_into(y, &mut x);
        x
    }
}

pub type MapRef = Arc<dyn LinearMap>;

impl<T: LinearMap + ?Sized> LinearMap for Arc<T> {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn field(&self) -> Field {
        (**self).field()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply_into(x, y)
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        (**self).adjoint_into(y, x)
    }
}

/// Worst relative mismatch `|<Au,v> - <u,A^H v>| / (|Au||v|)` over
/// `probes` random pairs.
pub fn adjoint_mismatch(map: &dyn LinearMap, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        let u: Vec<f64> = (0..map.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..map.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let au = map.apply(&u);
        let ahv = map.adjoint(&v);
        let lhs = dot(&au, &v);
        let rhs = dot(&u, &ahv);
        let scale = (norm2(&au) * norm2(&v)).max(norm2(&u) * norm2(&ahv));
        if scale > 0.0 {
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct Identity {
    n: usize,
    field: Field,
}

impl Identity {
    pub fn new(n: usize) -> Self {
        Identity { n, field: Field::Real }
    }

    pub fn with_field(n: usize, field: Field) -> Self {
        Identity { n, field }
    }
}

impl LinearMap for Identity {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn field(&self) -> Field {
        self.field
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.copy_from_slice(y);
    }
}

#[derive(Clone, Debug)]
pub struct ZeroMap {
    rows: usize,
    cols: usize,
}

impl ZeroMap {
    pub fn new(rows: usize, cols: usize) -> Self {
        ZeroMap { rows, cols }
    }
}

impl LinearMap for ZeroMap {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply_into(&self, _x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
    }
    fn adjoint_into(&self, _y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
    }
}

/// `s * A`
pub struct Scaled {
    inner: MapRef,
    s: f64,
}

impl Scaled {
    pub fn new(inner: MapRef, s: f64) -> Self {
        Scaled { inner, s }
    }
}

impl LinearMap for Scaled {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn field(&self) -> Field {
        self.inner.field()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.inner.apply_into(x, y);
        y.iter_mut().for_each(|v| *v *= self.s);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.inner.adjoint_into(y, x);
        x.iter_mut().for_each(|v| *v *= self.s);
    }
}

/// `outer * inner`
pub struct Composed {
    outer: MapRef,
    inner: MapRef,
}

impl Composed {
    pub fn new(outer: MapRef, inner: MapRef) -> Result<Self> {
        if outer.cols() != inner.rows() {
            return Err(Error::Dimension(format!(
                "cannot compose {}x{} after {}x{}",
                outer.rows(),
                outer.cols(),
                inner.rows(),
                inner.cols()
            )));
        }
        Ok(Composed { outer, inner })
    }
}

impl LinearMap for Composed {
    fn rows(&self) -> usize {
        self.outer.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn field(&self) -> Field {
        self.outer.field()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let t = self.inner.apply(x);
        self.outer.apply_into(&t, y);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let t = self.outer.adjoint(y);
        self.inner.adjoint_into(&t, x);
    }
}

/// `A D` where `D` zeroes the input components flagged in `drop`.
///
/// Used to restrict an operator to the inactive set while keeping full-length
/// vectors.
pub struct ColumnMask {
    inner: MapRef,
    drop: Arc<Vec<bool>>,
}

impl ColumnMask {
    pub fn new(inner: MapRef, drop: Arc<Vec<bool>>) -> Result<Self> {
        if drop.len() != inner.cols() {
            return Err(Error::Dimension(format!(
                "mask of length {} for operator with {} columns",
                drop.len(),
                inner.cols()
            )));
        }
        Ok(ColumnMask { inner, drop })
    }
}

impl LinearMap for ColumnMask {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn field(&self) -> Field {
        self.inner.field()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let xm: Vec<f64> = x
            .iter()
            .zip(self.drop.iter())
            .map(|(&v, &d)| if d { 0.0 } else { v })
            .collect();
        self.inner.apply_into(&xm, y);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.inner.adjoint_into(y, x);
        for (v, &d) in x.iter_mut().zip(self.drop.iter()) {
            if d {
                *v = 0.0;
            }
        }
    }
}

fn split_lengths<'a>(mut buf: &'a mut [f64], lens: &[usize]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    for &l in lens {
        let (head, tail) = buf.split_at_mut(l);
        out.push(head);
        buf = tail;
    }
    out
}

fn split_lengths_ref<'a>(mut buf: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    for &l in lens {
        let (head, tail) = buf.split_at(l);
        out.push(head);
        buf = tail;
    }
    out
}

fn common_field(maps: &[MapRef]) -> Result<Field> {
    let field = maps.first().map(|m| m.field()).unwrap_or(Field::Real);
    if maps.iter().any(|m| m.field() != field) {
        return Err(Error::FieldMismatch);
    }
    Ok(field)
}

pub struct BlockDiagonal {
    blocks: Vec<MapRef>,
    row_lens: Vec<usize>,
    col_lens: Vec<usize>,
    field: Field,
}

pub fn block_diagonal(maps: Vec<MapRef>) -> Result<BlockDiagonal> {
    let field = common_field(&maps)?;
    Ok(BlockDiagonal {
        row_lens: maps.iter().map(|m| m.rows()).collect(),
        col_lens: maps.iter().map(|m| m.cols()).collect(),
        blocks: maps,
        field,
    })
}

impl BlockDiagonal {
    pub fn blocks(&self) -> &[MapRef] {
        &self.blocks
    }
}

impl LinearMap for BlockDiagonal {
    fn rows(&self) -> usize {
        self.row_lens.iter().sum()
    }
    fn cols(&self) -> usize {
        self.col_lens.iter().sum()
    }
    fn field(&self) -> Field {
        self.field
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let xs = split_lengths_ref(x, &self.col_lens);
        let ys = split_lengths(y, &self.row_lens);
        self.blocks
            .par_iter()
            .zip(xs.into_par_iter().zip(ys.into_par_iter()))
            .for_each(|(b, (xi, yi))| b.apply_into(xi, yi));
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let ys = split_lengths_ref(y, &self.row_lens);
        let xs = split_lengths(x, &self.col_lens);
        self.blocks
            .par_iter()
            .zip(ys.into_par_iter().zip(xs.into_par_iter()))
            .for_each(|(b, (yi, xi))| b.adjoint_into(yi, xi));
    }
}

/// Vertical stack `[A_1; A_2; ...]`.
pub struct VStack {
    blocks: Vec<MapRef>,
    row_lens: Vec<usize>,
    cols: usize,
    field: Field,
}

pub fn vstack(maps: Vec<MapRef>) -> Result<VStack> {
    let field = common_field(&maps)?;
    let cols = maps.first().map(|m| m.cols()).unwrap_or(0);
    if let Some(bad) = maps.iter().find(|m| m.cols() != cols) {
        return Err(Error::Dimension(format!(
            "vstack of operators with {} and {} columns",
            cols,
            bad.cols()
        )));
    }
    Ok(VStack {
        row_lens: maps.iter().map(|m| m.rows()).collect(),
        blocks: maps,
        cols,
        field,
    })
}

impl VStack {
    pub fn blocks(&self) -> &[MapRef] {
        &self.blocks
    }

    pub fn row_lens(&self) -> &[usize] {
        &self.row_lens
    }
}

impl LinearMap for VStack {
    fn rows(&self) -> usize {
        self.row_lens.iter().sum()
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn field(&self) -> Field {
        self.field
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let ys = split_lengths(y, &self.row_lens);
        self.blocks
            .par_iter()
            .zip(ys.into_par_iter())
            .for_each(|(b, yi)| b.apply_into(x, yi));
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let ys = split_lengths_ref(y, &self.row_lens);
        let parts: Vec<Vec<f64>> = self
            .blocks
            .par_iter()
            .zip(ys.into_par_iter())
            .map(|(b, yi)| b.adjoint(yi))
            .collect();
        // summed in block order so results do not depend on scheduling
        x.fill(0.0);
        for p in &parts {
            for (xi, pi) in x.iter_mut().zip(p) {
                *xi += pi;
            }
        }
    }
}

/// Wraps an operator and counts forward and adjoint applications.
///
/// Clones share the same counters.
#[derive(Clone)]
pub struct CountingMap {
    inner: MapRef,
    applies: Arc<AtomicU64>,
    adjoints: Arc<AtomicU64>,
}

#[derive(Clone, Debug, Default)]
pub struct MatvecCounter {
    applies: Arc<AtomicU64>,
    adjoints: Arc<AtomicU64>,
}

impl MatvecCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn wrap(&self, inner: MapRef) -> CountingMap {
        CountingMap {
            inner,
            applies: self.applies.clone(),
            adjoints: self.adjoints.clone(),
        }
    }

    pub fn applies(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn adjoints(&self) -> u64 {
        self.adjoints.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.applies() + self.adjoints()
    }
}

impl CountingMap {
    pub fn new(inner: MapRef) -> Self {
        MatvecCounter::new().wrap(inner)
    }

    pub fn applies(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn adjoints(&self) -> u64 {
        self.adjoints.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.applies() + self.adjoints()
    }
}

impl LinearMap for CountingMap {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn field(&self) -> Field {
        self.inner.field()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.inner.apply_into(x, y);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.adjoints.fetch_add(1, Ordering::Relaxed);
        self.inner.adjoint_into(y, x);
    }
}

/// Compressed sparse row matrix with real entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_csr(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1
            || indices.len() != values.len()
            || indptr.last() != Some(&indices.len())
            || indices.iter().any(|&j| j >= cols)
            || indptr.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Dimension("inconsistent CSR arrays".into()));
        }
        for r in 0..rows {
            let row = &indices[indptr[r]..indptr[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Dimension(format!("row {r} has unsorted or duplicate columns")));
            }
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Assembles from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        if let Some(t) = triplets.iter().find(|t| t.0 >= rows || t.1 >= cols) {
            return Err(Error::Dimension(format!(
                "triplet ({}, {}) outside {rows}x{cols}",
                t.0, t.1
            )));
        }
        let mut sorted = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        SparseMatrix::from_csr(rows, cols, indptr, indices, values)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn to_dense(&self) -> DenseBlock {
        let mut d = DenseBlock::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (c, v) = self.row(r);
            for (&j, &x) in c.iter().zip(v) {
                d.set(r, j, x);
            }
        }
        d
    }
}

impl LinearMap for SparseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let (c, v) = self.row(r);
            *yr = c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum();
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            let (c, v) = self.row(r);
            for (&j, &a) in c.iter().zip(v) {
                x[j] += a * yr;
            }
        }
    }
}

/// Small dense real matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseBlock {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseBlock {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = DenseBlock::zeros(n, n);
        for i in 0..n {
            d.set(i, i, 1.0);
        }
        d
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} block",
                data.len()
            )));
        }
        Ok(DenseBlock { rows, cols, data })
    }

    /// Builds a block from its columns.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut d = DenseBlock::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::Dimension(format!("column {j} has length {}", c.len())));
            }
            for (i, &v) in c.iter().enumerate() {
                d.set(i, j, v);
            }
        }
        Ok(d)
    }

    /// Dense matrix of an operator, by applying it to unit vectors.
    pub fn from_map(map: &dyn LinearMap) -> Self {
        let mut cols = Vec::with_capacity(map.cols());
        let mut e = vec![0.0; map.cols()];
        for j in 0..map.cols() {
            e[j] = 1.0;
            cols.push(map.apply(&e));
            e[j] = 0.0;
        }
        DenseBlock::from_columns(map.rows(), &cols).expect("operator output length")
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Keeps only the columns with `keep[j] == true`.
    pub fn select_columns(&self, keep: &[bool]) -> DenseBlock {
        let idx: Vec<usize> = (0..self.cols).filter(|&j| keep[j]).collect();
        let mut d = DenseBlock::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (jj, &j) in idx.iter().enumerate() {
                d.set(i, jj, self.get(i, j));
            }
        }
        d
    }

    pub fn transpose(&self) -> DenseBlock {
        let mut t = DenseBlock::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseBlock) -> DenseBlock {
        assert_eq!(self.cols, other.rows);
        let mut c = DenseBlock::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    c.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        c
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row_slice(i), x)).collect()
    }

    /// `A^T y`
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (xj, a) in x.iter_mut().zip(self.row_slice(i)) {
                *xj += a * yi;
            }
        }
        x
    }

    pub fn max_abs_diff(&self, other: &DenseBlock) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }
}

impl LinearMap for DenseBlock {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(self.row_slice(i), x);
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.copy_from_slice(&self.t_matvec(y));
    }
}

/// Forward-difference gradient on a cell-centered grid.
///
/// Along axis `a` each grid line contributes `cells[a] - 1` differences
/// scaled by `1 / h_a`; nothing is emitted past the far boundary. Output
/// blocks are ordered by axis, cells lexicographically within a block, and
/// the `components` channels of the image innermost.
#[derive(Clone, Debug)]
pub struct GradientOperator {
    grid: Grid,
    components: usize,
    block_lens: Vec<usize>,
}

pub fn grad_operator(grid: &Grid) -> GradientOperator {
    GradientOperator::new(grid, 1)
}

impl GradientOperator {
    pub fn new(grid: &Grid, components: usize) -> Self {
        let n = grid.len();
        let block_lens = grid
            .cells()
            .iter()
            .map(|&c| n / c * (c - 1) * components)
            .collect();
        GradientOperator {
            grid: grid.clone(),
            components,
            block_lens,
        }
    }

    /// Calls `f(out_index, lower_cell, upper_cell, 1/h)` for every difference.
    fn for_each_difference(&self, mut f: impl FnMut(usize, usize, usize, f64)) {
        let g = &self.grid;
        let n = g.len();
        let mut out = 0;
        let mut stride = 1;
        for a in 0..g.dim() {
            let c = g.cells()[a];
            let inv_h = 1.0 / g.cell_size(a);
            for i in 0..n {
                let ia = (i / stride) % c;
                if ia + 1 < c {
                    f(out, i, i + stride, inv_h);
                    out += 1;
                }
            }
            stride *= c;
        }
    }
}

impl LinearMap for GradientOperator {
    fn rows(&self) -> usize {
        self.block_lens.iter().sum()
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
        self.for_each_difference(|o, lo, hi, s| {
            for c in 0..nc {
                y[o * nc + c] = (x[hi * nc + c] - x[lo * nc + c]) * s;
            }
        });
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let nc = self.components;
        x.fill(0.0);
        self.for_each_difference(|o, lo, hi, s| {
            for c in 0..nc {
                let v = y[o * nc + c] * s;
                x[hi * nc + c] += v;
                x[lo * nc + c] -= v;
            }
        });
    }
}

/// Relative threshold on `|R_jj|` below which a QR factor counts as rank deficient.
pub const RANK_TOL: f64 = 1e-12;

/// Thin QR factorization `A = Q R` by classical Gram-Schmidt with one
/// reorthogonalization pass. `R` has a nonnegative diagonal.
///
/// Fails with [`Error::RankDeficient`] (frame 0) when some
/// `|R_jj| < RANK_TOL * max_i |R_ii|`.
pub fn thin_qr(a: &DenseBlock) -> Result<(DenseBlock, DenseBlock)> {
    let (m, n) = (a.rows, a.cols);
    if m < n {
        return Err(Error::Dimension(format!("thin QR needs rows >= cols, got {m}x{n}")));
    }
    let mut qcols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r = DenseBlock::zeros(n, n);
    for j in 0..n {
        let mut v = a.column(j);
        for _pass in 0..2 {
            for (k, qk) in qcols.iter().enumerate() {
                let c = dot(qk, &v);
                r.set(k, j, r.get(k, j) + c);
                for (vi, qi) in v.iter_mut().zip(qk) {
                    *vi -= c * qi;
                }
            }
        }
        let nv = norm2(&v);
        r.set(j, j, nv);
        if nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
        }
        qcols.push(v);
    }
    let diag_max = (0..n).map(|j| r.get(j, j)).fold(0.0_f64, f64::max);
    for j in 0..n {
        let rjj = r.get(j, j);
        if diag_max == 0.0 || rjj < RANK_TOL * diag_max {
            return Err(Error::RankDeficient { frame: 0, value: rjj });
        }
    }
    let q = DenseBlock::from_columns(m, &qcols)?;
    Ok((q, r))
}

/// Solves `(R^T R) x = rhs` with two triangular solves.
pub fn chol_solve_normal(r: &DenseBlock, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = r.cols;
    if r.rows != n || rhs.len() != n {
        return Err(Error::Dimension(format!(
            "triangular factor {}x{} with right-hand side of length {}",
            r.rows,
            r.cols,
            rhs.len()
        )));
    }
    if (0..n).any(|j| r.get(j, j) == 0.0) {
        return Err(Error::Singular);
    }
    // R^T z = rhs
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= r.get(k, i) * z[k];
        }
        z[i] = s / r.get(i, i);
    }
    // R x = z
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= r.get(i, k) * x[k];
        }
        x[i] = s / r.get(i, i);
    }
    Ok(x)
}
