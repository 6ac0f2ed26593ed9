//! Grid representation of a local diffeomorphism of a box in R^n.
//!
//! A [`FlowAtlas`] stores, for every point of a regular seed grid, the image
//! of that seed, the derivative of the map there, and a validity flag.
//! Off-grid evaluation is multilinear interpolation of the images, which
//! reproduces affine maps exactly. Inversion is Newton iteration on the
//! interpolant, started from the seed whose image is nearest to the target.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AtlasError {
    #[error("bad region: {0}")]
    BadRegion(String),
    #[error("point lies outside the atlas domain")]
    OutsideDomain,
    #[error("interpolation cell touches an invalid node")]
    InvalidCell,
    #[error("Newton inversion did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("point lies outside the image of the valid region")]
    OutsideImage,
    #[error("node {0} has a rank-deficient neighbor stencil")]
    RankDeficientStencil(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Axis-aligned closed box `[lo_1, hi_1] x ... x [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, AtlasError> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(AtlasError::BadRegion(format!(
                "bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (d, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(AtlasError::BadRegion(format!(
                    "axis {} has bounds [{a}, {b}]",
                    d + 1
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Bounding box of a point cloud, widened on degenerate axes.
    pub fn bounding(points: impl IntoIterator<Item = DVector<f64>>, n: usize) -> Option<Self> {
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        let mut any = false;
        for p in points {
            any = true;
            for d in 0..n {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !any {
            return None;
        }
        for d in 0..n {
            if hi[d] - lo[d] < 1e-12 {
                let pad = 1e-6 * (1.0 + lo[d].abs());
                lo[d] -= pad;
                hi[d] += pad;
            }
        }
        BoxRegion::new(lo, hi).ok()
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)),
        )
    }

    pub fn clamp(&self, x: &mut DVector<f64>) -> bool {
        let mut moved = false;
        for d in 0..self.dim() {
            let c = x[d].clamp(self.lo[d], self.hi[d]);
            if c != x[d] {
                x[d] = c;
                moved = true;
            }
        }
        moved
    }
}

/// Regular grid with `resolution` points per axis; axis 0 varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    region: BoxRegion,
    resolution: usize,
    spacing: Vec<f64>,
    len: usize,
    strides: Vec<usize>,
    // multi-index offsets of the 3^n - 1 neighbor stencil
    stencil: Vec<Vec<isize>>,
}

impl Grid {
    pub fn new(region: BoxRegion, resolution: usize) -> Result<Self, AtlasError> {
        if resolution < 3 {
            return Err(AtlasError::BadRegion(format!(
                "resolution {resolution} is below the minimum of 3 points per axis"
            )));
        }
        let n = region.dim();
        let spacing = region
            .lo
            .iter()
            .zip(&region.hi)
            .map(|(a, b)| (b - a) / (resolution - 1) as f64)
            .collect();
        let len = resolution
            .checked_pow(n as u32)
            .ok_or_else(|| AtlasError::BadRegion("grid is too large".into()))?;
        let strides = (0..n).map(|d| resolution.pow(d as u32)).collect();
        let mut stencil = Vec::new();
        for code in 0..3usize.pow(n as u32) {
            let mut off = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                off.push((c % 3) as isize - 1);
                c /= 3;
            }
            if off.iter().any(|&o| o != 0) {
                stencil.push(off);
            }
        }
        Ok(Self {
            region,
            resolution,
            spacing,
            len,
            strides,
            stencil,
        })
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.dim());
        let mut a = node;
        for _ in 0..self.dim() {
            idx.push(a % self.resolution);
            a /= self.resolution;
        }
        idx
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn seed(&self, node: usize) -> DVector<f64> {
        let idx = self.multi_index(node);
        DVector::from_iterator(
            self.dim(),
            idx.iter()
                .enumerate()
                .map(|(d, &i)| self.region.lo[d] + i as f64 * self.spacing[d]),
        )
    }

    pub fn seeds(&self) -> Vec<DVector<f64>> {
        (0..self.len).map(|a| self.seed(a)).collect()
    }

    /// Nodes of the 3^n - 1 stencil around `node` that lie inside the grid.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let idx = self.multi_index(node);
        let r = self.resolution as isize;
        self.stencil
            .iter()
            .filter_map(|off| {
                let mut target = 0usize;
                for d in 0..idx.len() {
                    let v = idx[d] as isize + off[d];
                    if v < 0 || v >= r {
                        return None;
                    }
                    target += v as usize * self.strides[d];
                }
                Some(target)
            })
            .collect()
    }

    /// True when the node has a full stencil on every axis.
    pub fn is_interior(&self, node: usize) -> bool {
        self.multi_index(node)
            .iter()
            .all(|&i| i > 0 && i + 1 < self.resolution)
    }

    /// Node nearest to `x` (coordinates clamped into the grid).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.dim())
            .map(|d| {
                let s = ((x[d] - self.region.lo[d]) / self.spacing[d]).round();
                s.clamp(0.0, (self.resolution - 1) as f64) as usize
            })
            .collect();
        self.index(&idx)
    }

    /// Squared seed distance in units of the grid spacing.
    fn scaled_distance2(&self, a: usize, b: usize) -> f64 {
        let (ia, ib) = (self.multi_index(a), self.multi_index(b));
        ia.iter()
            .zip(&ib)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum()
    }

    // Cell containing x: lower-corner multi-index and fractional offsets.
    fn locate(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>), AtlasError> {
        if x.len() != self.dim() {
            return Err(AtlasError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let top = (self.resolution - 1) as f64;
        let mut cell = Vec::with_capacity(self.dim());
        let mut frac = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let s = (x[d] - self.region.lo[d]) / self.spacing[d];
            if !s.is_finite() || s < -1e-9 || s > top + 1e-9 {
                return Err(AtlasError::OutsideDomain);
            }
            let c = s.floor().clamp(0.0, top - 1.0);
            cell.push(c as usize);
            frac.push((s - c).clamp(0.0, 1.0));
        }
        Ok((cell, frac))
    }
}

/// Numerical stand-in for a (local) diffeomorphism: seeds, images, Jacobians
/// and validity flags on a regular grid, at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAtlas {
    grid: Grid,
    images: Vec<DVector<f64>>,
    jac: Vec<DMatrix<f64>>,
    valid: Vec<bool>,
    time: f64,
}

/// Identity atlas at `t = 0`.
pub fn init_atlas(region: BoxRegion, resolution: usize) -> Result<FlowAtlas, AtlasError> {
    let grid = Grid::new(region, resolution)?;
    Ok(FlowAtlas::identity(grid))
}

impl FlowAtlas {
    pub fn identity(grid: Grid) -> Self {
        let n = grid.dim();
        let images = grid.seeds();
        let len = grid.len();
        Self {
            grid,
            images,
            jac: vec![DMatrix::identity(n, n); len],
            valid: vec![true; len],
            time: 0.0,
        }
    }

    /// Atlas of an explicit map; `None` marks the node invalid.
    pub fn from_map<F>(grid: Grid, time: f64, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)>,
    {
        let n = grid.dim();
        let mut atlas = Self::identity(grid);
        atlas.time = time;
        for a in 0..atlas.len() {
            let seed = atlas.grid.seed(a);
            match f(&seed) {
                Some((y, j)) => {
                    atlas.images[a] = y;
                    atlas.jac[a] = j;
                }
                None => {
                    atlas.valid[a] = false;
                    atlas.jac[a] = DMatrix::identity(n, n);
                }
            }
        }
        atlas
    }

    /// Atlas of the affine map `x -> A x + b`.
    pub fn affine(grid: Grid, a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        Self::from_map(grid, 0.0, |x| Some((a * x + b, a.clone())))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn region(&self) -> &BoxRegion {
        self.grid.region()
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn seed(&self, node: usize) -> DVector<f64> {
        self.grid.seed(node)
    }

    pub fn image(&self, node: usize) -> &DVector<f64> {
        &self.images[node]
    }

    pub fn images(&self) -> &[DVector<f64>] {
        &self.images
    }

    pub fn jacobian(&self, node: usize) -> &DMatrix<f64> {
        &self.jac[node]
    }

    pub fn is_valid(&self, node: usize) -> bool {
        self.valid[node]
    }

    pub fn valid_flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&a| self.valid[a])
    }

    /// Overwrites one node. Invalid nodes stay invalid.
    pub fn set_node(&mut self, node: usize, image: DVector<f64>, jac: DMatrix<f64>) {
        if self.valid[node] {
            self.images[node] = image;
            self.jac[node] = jac;
        }
    }

    /// Invalidation is permanent; the last image is kept for reporting.
    pub fn invalidate(&mut self, node: usize) {
        self.valid[node] = false;
    }

    fn corners(&self, cell: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.dim();
        let base = self.grid.index(cell);
        (0..1usize << n).map(move |mask| {
            let mut node = base;
            for d in 0..n {
                if mask & (1 << d) != 0 {
                    node += self.grid.strides[d];
                }
            }
            (mask, node)
        })
    }

    /// Multilinear interpolation of the images at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<DVector<f64>, AtlasError> {
        let (cell, frac) = self.grid.locate(x)?;
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for (mask, node) in self.corners(&cell) {
            if !self.valid[node] {
                return Err(AtlasError::InvalidCell);
            }
            let w = corner_weight(mask, &frac);
            out.axpy(w, &self.images[node], 1.0);
        }
        Ok(out)
    }

    /// Interpolated value together with the exact derivative of the interpolant.
    pub fn evaluate_with_derivative(
        &self,
        x: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>), AtlasError> {
        let (cell, frac) = self.grid.locate(x)?;
        let n = self.dim();
        let mut value = DVector::zeros(n);
        let mut deriv = DMatrix::zeros(n, n);
        for (mask, node) in self.corners(&cell) {
            if !self.valid[node] {
                return Err(AtlasError::InvalidCell);
            }
            let img = &self.images[node];
            value.axpy(corner_weight(mask, &frac), img, 1.0);
            for d in 0..n {
                let mut w = if mask & (1 << d) != 0 { 1.0 } else { -1.0 };
                w /= self.grid.spacing[d];
                for e in 0..n {
                    if e != d {
                        w *= if mask & (1 << e) != 0 {
                            frac[e]
                        } else {
                            1.0 - frac[e]
                        };
                    }
                }
                let mut col = deriv.column_mut(d);
                col.axpy(w, img, 1.0);
            }
        }
        Ok((value, deriv))
    }

    /// Multilinear interpolation of the stored node Jacobians.
    pub fn interpolate_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, AtlasError> {
        let (cell, frac) = self.grid.locate(x)?;
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (mask, node) in self.corners(&cell) {
            if !self.valid[node] {
                return Err(AtlasError::InvalidCell);
            }
            out += &self.jac[node] * corner_weight(mask, &frac);
        }
        Ok(out)
    }

    /// Seed of the valid node whose image is nearest to `y`.
    pub fn nearest_image_seed(&self, y: &[f64]) -> Option<DVector<f64>> {
        let target = DVector::from_column_slice(y);
        self.valid_nodes()
            .map(|a| (a, (&self.images[a] - &target).norm_squared()))
            .min_by(|l, r| l.1.total_cmp(&r.1))
            .map(|(a, _)| self.grid.seed(a))
    }

    /// Solves `evaluate(x) = y` by Newton iteration from the nearest-image seed.
    pub fn invert(&self, y: &[f64]) -> Result<DVector<f64>, AtlasError> {
        let guess = self.nearest_image_seed(y).ok_or(AtlasError::OutsideImage)?;
        self.invert_from(y, &guess)
    }

    /// Newton inversion from a caller-supplied initial guess.
    pub fn invert_from(&self, y: &[f64], guess: &DVector<f64>) -> Result<DVector<f64>, AtlasError> {
        const MAX_ITER: usize = 50;
        let n = self.dim();
        if y.len() != n {
            return Err(AtlasError::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        let target = DVector::from_column_slice(y);
        let tol = 1e-10 * self.region().diameter();
        let region = self.region();
        let mut x = guess.clone();
        region.clamp(&mut x);
        let (mut fx, mut d) = self.evaluate_with_derivative(x.as_slice())?;
        let mut res = (&fx - &target).norm();
        let mut stuck = 0;
        let mut polished = false;
        for _ in 0..MAX_ITER {
            if res <= tol {
                if polished || res == 0.0 {
                    return Ok(x);
                }
                polished = true;
            }
            let step = match d.clone().lu().solve(&(&fx - &target)) {
                Some(s) => s,
                None => return Err(AtlasError::NoConvergence { residual: res }),
            };
            // backtracking on the residual norm
            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..12 {
                let mut cand = &x - &step * lambda;
                let clamped = region.clamp(&mut cand);
                match self.evaluate_with_derivative(cand.as_slice()) {
                    Ok((fc, dc)) => {
                        let rc = (&fc - &target).norm();
                        if rc < res || (polished && rc <= res) {
                            accepted = Some((cand, fc, dc, rc, clamped));
                            break;
                        }
                    }
                    Err(AtlasError::InvalidCell) => {}
                    Err(e) => return Err(e),
                }
                lambda *= 0.5;
            }
            match accepted {
                Some((cand, fc, dc, rc, clamped)) => {
                    stuck = if clamped && rc > 0.5 * res { stuck + 1 } else { 0 };
                    x = cand;
                    fx = fc;
                    d = dc;
                    res = rc;
                }
                None if res <= tol => return Ok(x),
                None => {
                    let on_boundary = (0..n).any(|k| {
                        x[k] <= region.lo()[k] || x[k] >= region.hi()[k]
                    });
                    return Err(if on_boundary {
                        AtlasError::OutsideImage
                    } else {
                        AtlasError::NoConvergence { residual: res }
                    });
                }
            }
            if stuck >= 3 {
                return Err(AtlasError::OutsideImage);
            }
        }
        if res <= tol {
            Ok(x)
        } else {
            Err(AtlasError::NoConvergence { residual: res })
        }
    }

    /// Weighted least-squares Jacobian of images against seeds over the
    /// neighbor stencil of `node`.
    pub fn mls_jacobian(&self, node: usize) -> Result<DMatrix<f64>, AtlasError> {
        if !self.valid[node] {
            return Err(AtlasError::RankDeficientStencil(node));
        }
        let center_seed = self.grid.seed(node);
        let samples: Vec<_> = self
            .grid
            .neighbors(node)
            .into_iter()
            .filter(|&b| self.valid[b])
            .map(|b| {
                (
                    self.grid.seed(b) - &center_seed,
                    &self.images[b] - &self.images[node],
                    stencil_weight(&self.grid, node, b),
                )
            })
            .collect();
        mls_fit(self.dim(), &samples).ok_or(AtlasError::RankDeficientStencil(node))
    }

    /// Replaces every stored Jacobian by its moving-least-squares estimate.
    /// Nodes without a usable stencil keep their previous Jacobian.
    pub fn refresh_jacobians_mls(&mut self) {
        let fresh: Vec<_> = (0..self.len()).map(|a| self.mls_jacobian(a).ok()).collect();
        for (a, j) in fresh.into_iter().enumerate() {
            if let Some(j) = j {
                self.jac[a] = j;
            }
        }
    }

    /// Least-squares affine fit `image ~ A seed + b` over valid nodes.
    pub fn affine_fit(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut gram = DMatrix::<f64>::zeros(n + 1, n + 1);
        let mut rhs = DMatrix::<f64>::zeros(n + 1, n);
        let center = self.region().center();
        let mut count = 0;
        for a in self.valid_nodes() {
            let s = self.grid.seed(a) - &center;
            let mut z = DVector::zeros(n + 1);
            z.rows_mut(0, n).copy_from(&s);
            z[n] = 1.0;
            gram += &z * z.transpose();
            rhs += &z * self.images[a].transpose();
            count += 1;
        }
        if count < n + 1 {
            return None;
        }
        let sol = gram.cholesky()?.solve(&rhs);
        let a = sol.rows(0, n).transpose();
        let b = sol.row(n).transpose() - &a * &center;
        Some((a, b))
    }

    /// Writes one row per node: `t, node_index, seed_1..n, image_1..n, valid, det_jac`.
    pub fn write_csv<W: Write>(&self, out: &mut csv::Writer<W>, header: bool) -> csv::Result<()> {
        let n = self.dim();
        if header {
            let mut cols = vec!["t".to_string(), "node_index".to_string()];
            cols.extend((1..=n).map(|d| format!("seed_{d}")));
            cols.extend((1..=n).map(|d| format!("image_{d}")));
            cols.push("valid".into());
            cols.push("det_jac".into());
            out.write_record(&cols)?;
        }
        for a in 0..self.len() {
            let mut row = vec![fmt17(self.time), a.to_string()];
            row.extend(self.grid.seed(a).iter().map(|v| fmt17(*v)));
            row.extend(self.images[a].iter().map(|v| fmt17(*v)));
            row.push(if self.valid[a] { "1" } else { "0" }.to_string());
            row.push(fmt17(self.jac[a].determinant()));
            out.write_record(&row)?;
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn corner_weight(mask: usize, frac: &[f64]) -> f64 {
    frac.iter()
        .enumerate()
        .map(|(d, f)| if mask & (1 << d) != 0 { *f } else { 1.0 - f })
        .product()
}

/// Gaussian stencil weight with bandwidth equal to the grid spacing.
pub fn stencil_weight(grid: &Grid, a: usize, b: usize) -> f64 {
    (-grid.scaled_distance2(a, b)).exp()
}

/// Weighted least-squares gradient through the center sample: given offsets
/// `(dx_b, dv_b, w_b)` returns `G` minimising `sum w |dv - G dx|^2`.
/// `None` when fewer than `n + 1` samples are available or the offsets do not
/// span R^n.
pub fn mls_fit(n: usize, samples: &[(DVector<f64>, DVector<f64>, f64)]) -> Option<DMatrix<f64>> {
    if samples.len() < n + 1 {
        return None;
    }
    let q = samples[0].1.len();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut cross = DMatrix::<f64>::zeros(q, n);
    for (dx, dv, w) in samples {
        gram.ger(*w, dx, dx, 1.0);
        cross.ger(*w, dv, dx, 1.0);
    }
    let scale = gram.trace();
    if !(scale > 0.0) {
        return None;
    }
    let eig = gram.clone().symmetric_eigenvalues();
    if eig.min() <= 1e-10 * eig.max() {
        return None;
    }
    let inv = gram.cholesky()?.inverse();
    Some(cross * inv)
}

/// `outer o inner` on the seeds of `inner`. Nodes whose image cannot be
/// evaluated by `outer` are invalidated.
pub fn compose(outer: &FlowAtlas, inner: &FlowAtlas) -> FlowAtlas {
    let mut out = inner.clone();
    for a in 0..inner.len() {
        if !inner.valid[a] {
            continue;
        }
        let p = inner.images[a].as_slice();
        match (outer.evaluate(p), outer.interpolate_jacobian(p)) {
            (Ok(y), Ok(j)) => {
                out.images[a] = y;
                out.jac[a] = j * &inner.jac[a];
            }
            _ => out.valid[a] = false,
        }
    }
    out
}

/// `outer^{-1} o inner` on the seeds of `inner`, by Newton inversion of
/// `outer` at every image of `inner`.
pub fn compose_inverse(outer: &FlowAtlas, inner: &FlowAtlas) -> FlowAtlas {
    let mut out = inner.clone();
    for a in 0..inner.len() {
        if !inner.valid[a] {
            continue;
        }
        let p = inner.images[a].as_slice();
        let solved = outer.invert(p).and_then(|x| {
            let j = outer.interpolate_jacobian(x.as_slice())?;
            let jinv = j.try_inverse().ok_or(AtlasError::OutsideImage)?;
            Ok((x, jinv))
        });
        match solved {
            Ok((x, jinv)) => {
                out.images[a] = x;
                out.jac[a] = jinv * &inner.jac[a];
            }
            Err(_) => out.valid[a] = false,
        }
    }
    out
}

/// Inverse map as an atlas on a grid over the bounding box of the valid images.
pub fn invert_atlas(atlas: &FlowAtlas, resolution: usize) -> Result<FlowAtlas, AtlasError> {
    let n = atlas.dim();
    let bbox = BoxRegion::bounding(atlas.valid_nodes().map(|a| atlas.images[a].clone()), n)
        .ok_or(AtlasError::OutsideImage)?;
    let grid = Grid::new(bbox, resolution)?;
    Ok(FlowAtlas::from_map(grid, atlas.time, |z| {
        let x = atlas.invert(z.as_slice()).ok()?;
        let j = atlas.interpolate_jacobian(x.as_slice()).ok()?;
        Some((x, j.try_inverse()?))
    }))
}
