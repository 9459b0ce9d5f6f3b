//! Cell-centered rectangular grids over `[0,b] x [0,c]` and the fields that live on them.
//!
//! Cell `(i, j)` has its center at `((i + 1/2) hx, (j + 1/2) hy)`; values are stored
//! row-major with `i` (the x index) varying fastest. Differential operators use
//! second-order central stencils in the interior. Integration is the midpoint rule,
//! so a field's "mass" is `sum(values) * hx * hy`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub b: f64,
    pub c: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(b: f64, c: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(b.is_finite() && b > 0.0 && c.is_finite() && c > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "domain edges must be positive, got b = {b}, c = {c}"
            )));
        }
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 cells per axis, got {nx}x{ny}"
            )));
        }
        Ok(Grid { b, c, nx, ny })
    }

    /// Square grid with `n x n` cells on `[0,side]^2`.
    pub fn square(side: f64, n: usize) -> Result<Self> {
        Self::new(side, side, n, n)
    }

    #[inline]
    pub fn hx(&self) -> f64 {
        self.b / self.nx as f64
    }

    #[inline]
    pub fn hy(&self) -> f64 {
        self.c / self.ny as f64
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.hx()
    }

    #[inline]
    pub fn y_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.hy()
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x_center(i), self.y_center(j)]
    }

    /// Cell centers in storage order.
    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| self.center(i, j)))
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (0.0..=self.b).contains(&x[0]) && (0.0..=self.c).contains(&x[1])
    }

    pub fn area(&self) -> f64 {
        self.b * self.c
    }

    /// Same domain, cell counts multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Grid {
            nx: self.nx * factor,
            ny: self.ny * factor,
            ..*self
        }
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "grids differ: {self:?} vs {other:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {}x{} grid, got {}",
                grid.len(),
                grid.nx,
                grid.ny,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "field value at cell {k} is not finite"
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ScalarField { grid, values }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// The uniform probability density `1 / (b c)`.
    pub fn uniform_density(grid: Grid) -> Self {
        Self::constant(grid, 1.0 / grid.area())
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let values = grid.centers().map(&mut f).collect();
        ScalarField { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &ScalarField) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `sqrt(integral of f^2)`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_area()).sqrt()
    }

    pub fn l2_distance(&self, other: &ScalarField) -> Result<f64> {
        Ok(self.sub(other)?.l2_norm())
    }

    /// True when the field is non-negative and integrates to one within `tol`.
    pub fn is_density(&self, tol: f64) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && (integrate(self) - 1.0).abs() <= tol
    }

    pub fn to_csv(&self) -> String {
        let mut out = csv_header(&self.grid);
        write_rows(&mut out, &self.grid, &self.values);
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (grid, rows) = parse_csv(text, 1)?;
        ScalarField::new(grid, rows.into_iter().next().unwrap_or_default())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ScalarFieldJson {
            nx: self.grid.nx,
            ny: self.grid.ny,
            b: self.grid.b,
            c: self.grid.c,
            values: self.values.clone(),
        })
        .expect("scalar field serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScalarFieldJson =
            serde_json::from_str(text).map_err(|e| Error::parse("scalar field JSON", e))?;
        let grid = Grid::new(doc.b, doc.c, doc.nx, doc.ny)?;
        ScalarField::new(grid, doc.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        x.grid.check_same(&y.grid)?;
        Ok(VectorField { x, y })
    }

    pub fn zeros(grid: Grid) -> Self {
        VectorField {
            x: ScalarField::zeros(grid),
            y: ScalarField::zeros(grid),
        }
    }

    pub fn constant(grid: Grid, v: [f64; 2]) -> Self {
        VectorField {
            x: ScalarField::constant(grid, v[0]),
            y: ScalarField::constant(grid, v[1]),
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        VectorField {
            x: ScalarField::from_fn(grid, |p| f(p)[0]),
            y: ScalarField::from_fn(grid, |p| f(p)[1]),
        }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.x.grid
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x.at(i, j), self.y.at(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Largest absolute value of each component.
    pub fn max_abs(&self) -> [f64; 2] {
        [self.x.max_abs(), self.y.max_abs()]
    }

    /// Pointwise Euclidean norm.
    pub fn magnitude(&self) -> ScalarField {
        self.x
            .zip_map(&self.y, f64::hypot)
            .expect("components share a grid")
    }

    pub fn scale_by(&self, s: &ScalarField) -> Result<Self> {
        Ok(VectorField {
            x: self.x.mul(s)?,
            y: self.y.mul(s)?,
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.x.l2_norm().hypot(self.y.l2_norm())
    }

    pub fn to_csv(&self) -> String {
        let grid = *self.grid();
        let mut out = csv_header(&grid);
        write_rows(&mut out, &grid, self.x.values());
        write_rows(&mut out, &grid, self.y.values());
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (grid, mut blocks) = parse_csv(text, 2)?;
        let y = blocks.pop().unwrap_or_default();
        let x = blocks.pop().unwrap_or_default();
        VectorField::new(ScalarField::new(grid, x)?, ScalarField::new(grid, y)?)
    }

    pub fn to_json(&self) -> String {
        let g = self.grid();
        serde_json::to_string(&VectorFieldJson {
            nx: g.nx,
            ny: g.ny,
            b: g.b,
            c: g.c,
            x: self.x.values.clone(),
            y: self.y.values.clone(),
        })
        .expect("vector field serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VectorFieldJson =
            serde_json::from_str(text).map_err(|e| Error::parse("vector field JSON", e))?;
        let grid = Grid::new(doc.b, doc.c, doc.nx, doc.ny)?;
        VectorField::new(ScalarField::new(grid, doc.x)?, ScalarField::new(grid, doc.y)?)
    }
}

/// A coefficient that is either spatially constant or sampled on the grid
/// (diffusion `sigma`, feedback gain `alpha`).
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    Field(ScalarField),
}

impl Coefficient {
    #[inline]
    pub fn at_cell(&self, k: usize) -> f64 {
        match self {
            Coefficient::Constant(v) => *v,
            Coefficient::Field(f) => f.values[k],
        }
    }

    pub fn at_point(&self, x: [f64; 2]) -> f64 {
        match self {
            Coefficient::Constant(v) => *v,
            Coefficient::Field(f) => interpolate(f, x),
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            Coefficient::Constant(v) => *v,
            Coefficient::Field(f) => f.max(),
        }
    }

    pub fn min(&self) -> f64 {
        match self {
            Coefficient::Constant(v) => *v,
            Coefficient::Field(f) => f.min(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Coefficient::Constant(v) => v.is_finite(),
            Coefficient::Field(f) => f.is_finite(),
        }
    }

    /// The coefficient sampled on `grid` (a constant is broadcast).
    pub fn to_field(&self, grid: Grid) -> Result<ScalarField> {
        match self {
            Coefficient::Constant(v) => Ok(ScalarField::constant(grid, *v)),
            Coefficient::Field(f) => {
                grid.check_same(f.grid())?;
                Ok(f.clone())
            }
        }
    }
}

impl From<f64> for Coefficient {
    fn from(v: f64) -> Self {
        Coefficient::Constant(v)
    }
}

#[derive(Serialize, Deserialize)]
struct ScalarFieldJson {
    nx: usize,
    ny: usize,
    b: f64,
    c: f64,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct VectorFieldJson {
    nx: usize,
    ny: usize,
    b: f64,
    c: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

fn csv_header(grid: &Grid) -> String {
    format!("nx,ny,b,c\n{},{},{:?},{:?}\n", grid.nx, grid.ny, grid.b, grid.c)
}

// `{:?}` on f64 prints the shortest string that parses back to the same bits.
fn write_rows(out: &mut String, grid: &Grid, values: &[f64]) {
    for row in values.chunks(grid.nx) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v:?}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
}

fn parse_csv(text: &str, blocks: usize) -> Result<(Grid, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse("field CSV", "empty input"))?;
    if header.split(',').map(str::trim).ne(["nx", "ny", "b", "c"]) {
        return Err(Error::parse("field CSV", format!("bad header `{header}`")));
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::parse("field CSV", "missing dimension row"))?;
    let dims: Vec<&str> = dims.split(',').map(str::trim).collect();
    if dims.len() != 4 {
        return Err(Error::parse("field CSV", "dimension row needs 4 entries"));
    }
    let nx = dims[0].parse().map_err(|e| Error::parse("field CSV nx", e))?;
    let ny = dims[1].parse().map_err(|e| Error::parse("field CSV ny", e))?;
    let b = dims[2].parse().map_err(|e| Error::parse("field CSV b", e))?;
    let c = dims[3].parse().map_err(|e| Error::parse("field CSV c", e))?;
    let grid = Grid::new(b, c, nx, ny)?;

    let mut out = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let mut values = Vec::with_capacity(grid.len());
        for row in 0..grid.ny {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse("field CSV", format!("missing row {row}")))?;
            let before = values.len();
            for tok in line.split(',') {
                values.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::parse("field CSV value", e))?,
                );
            }
            if values.len() - before != grid.nx {
                return Err(Error::parse(
                    "field CSV",
                    format!("row {row} has {} values, expected {}", values.len() - before, grid.nx),
                ));
            }
        }
        out.push(values);
    }
    if lines.next().is_some() {
        return Err(Error::parse("field CSV", "trailing rows"));
    }
    Ok((grid, out))
}

/// Central differences in the interior, one-sided first differences on boundary cells.
pub fn gradient(f: &ScalarField) -> VectorField {
    let g = f.grid;
    let (hx, hy) = (g.hx(), g.hy());
    let mut gx = vec![0.0; g.len()];
    let mut gy = vec![0.0; g.len()];
    let v = &f.values;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            gx[k] = if i == 0 {
                (v[k + 1] - v[k]) / hx
            } else if i + 1 == g.nx {
                (v[k] - v[k - 1]) / hx
            } else {
                (v[k + 1] - v[k - 1]) / (2.0 * hx)
            };
            gy[k] = if j == 0 {
                (v[k + g.nx] - v[k]) / hy
            } else if j + 1 == g.ny {
                (v[k] - v[k - g.nx]) / hy
            } else {
                (v[k + g.nx] - v[k - g.nx]) / (2.0 * hy)
            };
        }
    }
    VectorField {
        x: ScalarField::from_vec_unchecked(g, gx),
        y: ScalarField::from_vec_unchecked(g, gy),
    }
}

/// Finite-volume divergence: face values are averages of the adjacent cells and the
/// wall value of a boundary cell is that cell's own value. In the interior this is the
/// central difference; summed over the grid it telescopes to the wall values, so a
/// field with zero normal component on the boundary cells has zero total divergence.
pub fn divergence(field: &VectorField) -> ScalarField {
    let g = *field.grid();
    let (hx, hy) = (g.hx(), g.hy());
    let fx = field.x.values();
    let fy = field.y.values();
    let mut out = vec![0.0; g.len()];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let east = if i + 1 == g.nx { fx[k] } else { 0.5 * (fx[k] + fx[k + 1]) };
            let west = if i == 0 { fx[k] } else { 0.5 * (fx[k] + fx[k - 1]) };
            let north = if j + 1 == g.ny { fy[k] } else { 0.5 * (fy[k] + fy[k + g.nx]) };
            let south = if j == 0 { fy[k] } else { 0.5 * (fy[k] + fy[k - g.nx]) };
            out[k] = (east - west) / hx + (north - south) / hy;
        }
    }
    ScalarField::from_vec_unchecked(g, out)
}

/// Five-point Laplacian with mirrored ghost cells (zero normal derivative).
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let (ihx2, ihy2) = (1.0 / (g.hx() * g.hx()), 1.0 / (g.hy() * g.hy()));
    let v = &f.values;
    let mut out = vec![0.0; g.len()];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let c = v[k];
            let w = if i == 0 { c } else { v[k - 1] };
            let e = if i + 1 == g.nx { c } else { v[k + 1] };
            let s = if j == 0 { c } else { v[k - g.nx] };
            let n = if j + 1 == g.ny { c } else { v[k + g.nx] };
            out[k] = (e - 2.0 * c + w) * ihx2 + (n - 2.0 * c + s) * ihy2;
        }
    }
    ScalarField::from_vec_unchecked(g, out)
}

/// Midpoint quadrature of `f` over the domain.
pub fn integrate(f: &ScalarField) -> f64 {
    compensated_sum(&f.values) * f.grid.cell_area()
}

/// Neumaier-compensated sum; keeps mass bookkeeping at round-off level on large grids.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Rescales a non-negative field to unit mass.
pub fn normalize(f: &ScalarField) -> Result<ScalarField> {
    let mass = integrate(f);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroMass { mass });
    }
    Ok(f.scale(1.0 / mass))
}

/// Bilinear interpolation between the four surrounding cell centers. Within half a
/// cell of the boundary the query is clamped onto the outermost layer of centers.
pub fn interpolate(f: &ScalarField, x: [f64; 2]) -> f64 {
    let g = &f.grid;
    let (i0, tx) = bracket(x[0] / g.hx() - 0.5, g.nx);
    let (j0, ty) = bracket(x[1] / g.hy() - 0.5, g.ny);
    let v = &f.values;
    let k = g.idx(i0, j0);
    let f00 = v[k];
    let f10 = v[k + 1];
    let f01 = v[k + g.nx];
    let f11 = v[k + g.nx + 1];
    (1.0 - ty) * ((1.0 - tx) * f00 + tx * f10) + ty * ((1.0 - tx) * f01 + tx * f11)
}

pub fn interpolate_vector(field: &VectorField, x: [f64; 2]) -> [f64; 2] {
    [interpolate(&field.x, x), interpolate(&field.y, x)]
}

/// Lower bracketing index and fractional offset for a continuous cell coordinate.
fn bracket(s: f64, n: usize) -> (usize, f64) {
    let s = s.clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    (i, s - i as f64)
}
