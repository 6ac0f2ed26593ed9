//! Horizontal/vertical frame pairs, flag sequences of nested pairs, and the
//! catalog of built-in geometries.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::atlas::Grid;
use crate::fieldlang::{EvalDomainError, FieldExpr, ParseError, VectorField};
use crate::frames::{solve_mixed, transversality_gap, FrameError, MixedFrame};

/// Gradients below this norm count as critical points of a level-set function.
pub const CRITICAL_GRADIENT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("unknown catalog distribution `{0}`")]
    UnknownCatalogName(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("gradient vanishes at grid node {node} (|grad h| = {norm:.3e})")]
    CriticalPoint { node: usize, norm: f64 },
    #[error("frames are not complementary at grid node {node} (gap {gap:.3e})")]
    NotComplementary { node: usize, gap: f64 },
    #[error("flag stage {stage} does not enclose stage {prev} at grid node {node}")]
    NotEnclosed { prev: usize, stage: usize, node: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalDomainError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// An ordered frame field: either explicit vector fields, or an orthonormal
/// basis of the kernel of a gradient built pointwise by Gram-Schmidt.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Fields(Vec<VectorField>),
    KernelOf(VectorField),
}

impl Frame {
    pub fn rank(&self, n: usize) -> usize {
        match self {
            Frame::Fields(f) => f.len(),
            Frame::KernelOf(_) => n - 1,
        }
    }

    /// Columns of the frame at `x` as an `n x rank` matrix.
    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>, EvalDomainError> {
        let n = x.len();
        match self {
            Frame::Fields(fields) => {
                let mut m = DMatrix::zeros(n, fields.len());
                for (j, f) in fields.iter().enumerate() {
                    m.set_column(j, &f.eval(x)?);
                }
                Ok(m)
            }
            Frame::KernelOf(grad) => Ok(kernel_frame(&grad.eval(x)?)),
        }
    }
}

/// Orthonormal basis of the orthogonal complement of `g`: Gram-Schmidt of the
/// coordinate axes against `g`, skipping the axis with the largest `|g_d|`
/// (the first such axis on ties).
pub fn kernel_frame(g: &DVector<f64>) -> DMatrix<f64> {
    let n = g.len();
    let mut drop = 0;
    for d in 1..n {
        if g[d].abs() > g[drop].abs() {
            drop = d;
        }
    }
    let norm = g.norm();
    let unit = if norm > 0.0 { g / norm } else { g.clone() };
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n - 1);
    for d in (0..n).filter(|&d| d != drop) {
        let mut u = DVector::zeros(n);
        u[d] = 1.0;
        let along = u.dot(&unit);
        u.axpy(-along, &unit, 1.0);
        for b in &basis {
            let c = u.dot(b);
            u.axpy(-c, b, 1.0);
        }
        let len = u.norm();
        if len > 0.0 {
            u /= len;
        }
        basis.push(u);
    }
    let mut m = DMatrix::zeros(n, n - 1);
    for (j, b) in basis.iter().enumerate() {
        m.set_column(j, b);
    }
    m
}

/// Which geometry a pair encodes; level sets keep their function for the
/// closed-form energy correction.
#[derive(Debug, Clone, PartialEq)]
pub enum PairKind {
    CoordinateFlag(usize),
    TwistedExample1,
    RadialSphere,
    LevelSet(FieldExpr),
    Custom,
}

/// Complementary frames `h_frame` (rank k) and `v_frame` (rank n - k).
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPair {
    n: usize,
    k: usize,
    h_frame: Frame,
    v_frame: Frame,
    kind: PairKind,
}

impl DistributionPair {
    /// Explicit frames. `k = n` with an empty vertical frame is allowed; it
    /// only makes sense as the last stage of a maximal flag.
    pub fn custom(
        n: usize,
        h_frame: Vec<VectorField>,
        v_frame: Vec<VectorField>,
    ) -> Result<Self, DistributionError> {
        let k = h_frame.len();
        if k == 0 || k + v_frame.len() != n {
            return Err(DistributionError::BadParams(format!(
                "{} horizontal and {} vertical fields do not split dimension {n}",
                k,
                v_frame.len()
            )));
        }
        if let Some(f) = h_frame.iter().chain(&v_frame).find(|f| f.dim() != n) {
            return Err(DistributionError::BadParams(format!(
                "frame field has {} components, expected {n}",
                f.dim()
            )));
        }
        Ok(Self {
            n,
            k,
            h_frame: Frame::Fields(h_frame),
            v_frame: Frame::Fields(v_frame),
            kind: PairKind::Custom,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> &PairKind {
        &self.kind
    }

    pub fn h_frame(&self) -> &Frame {
        &self.h_frame
    }

    pub fn v_frame(&self) -> &Frame {
        &self.v_frame
    }

    /// True when the vertical frame is empty (`k = n`).
    pub fn is_full(&self) -> bool {
        self.k == self.n
    }

    pub fn horizontal_at(&self, x: &[f64]) -> Result<DMatrix<f64>, EvalDomainError> {
        self.h_frame.eval(x)
    }

    pub fn vertical_at(&self, x: &[f64]) -> Result<DMatrix<f64>, EvalDomainError> {
        self.v_frame.eval(x)
    }

    /// Gap of `[h_frame(x) | v_frame(x)]`.
    pub fn gap_at(&self, x: &[f64]) -> Result<f64, DistributionError> {
        let frame = MixedFrame::new(self.horizontal_at(x)?, self.vertical_at(x)?)?;
        Ok(transversality_gap(&frame)?)
    }

    /// Checks complementarity at every grid node.
    pub fn check_complementary(&self, grid: &Grid, threshold: f64) -> Result<(), DistributionError> {
        if self.is_full() {
            return Ok(());
        }
        for a in 0..grid.len() {
            let seed = grid.seed(a);
            let gap = self.gap_at(seed.as_slice())?;
            if gap <= threshold {
                return Err(DistributionError::NotComplementary { node: a, gap });
            }
        }
        Ok(())
    }
}

/// Catalog lookup. `params` carries `k` for `coordinate_flag` and the
/// function text for `level_set`.
pub fn builtin_pair(
    name: &str,
    n: usize,
    k: Option<usize>,
    level: Option<&str>,
    grid: &Grid,
) -> Result<DistributionPair, DistributionError> {
    match name {
        "coordinate_flag" => {
            let k = k.ok_or_else(|| DistributionError::BadParams("coordinate_flag needs k".into()))?;
            coordinate_flag(n, k)
        }
        "twisted_example1" => {
            if n != 3 {
                return Err(DistributionError::BadParams(format!(
                    "twisted_example1 lives in dimension 3, not {n}"
                )));
            }
            Ok(twisted_example1())
        }
        "radial_sphere" => radial_sphere(n, grid),
        "level_set" => {
            let text = level.ok_or_else(|| DistributionError::BadParams("level_set needs h".into()))?;
            level_set_pair(FieldExpr::parse(text, n)?, grid)
        }
        other => Err(DistributionError::UnknownCatalogName(other.to_string())),
    }
}

fn unit_field(n: usize, d: usize) -> VectorField {
    VectorField::new(
        (0..n)
            .map(|e| FieldExpr::constant(if e == d { 1.0 } else { 0.0 }, n))
            .collect(),
    )
}

/// `span{e_1..e_k}` against `span{e_{k+1}..e_n}`. `k = n` gives the full space.
pub fn coordinate_flag(n: usize, k: usize) -> Result<DistributionPair, DistributionError> {
    if n == 0 || k == 0 || k > n {
        return Err(DistributionError::BadParams(format!(
            "coordinate_flag needs 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    Ok(DistributionPair {
        n,
        k,
        h_frame: Frame::Fields((0..k).map(|d| unit_field(n, d)).collect()),
        v_frame: Frame::Fields((k..n).map(|d| unit_field(n, d)).collect()),
        kind: PairKind::CoordinateFlag(k),
    })
}

/// Horizontal plane spanned by `(cos y^2, 0, sin y^2)` and `e_2`, vertical
/// line along `(-sin y^2, 0, cos y^2)`.
pub fn twisted_example1() -> DistributionPair {
    let f = |c: [&str; 3]| VectorField::parse(&c).expect("catalog expression");
    DistributionPair {
        n: 3,
        k: 2,
        h_frame: Frame::Fields(vec![f(["cos(y^2)", "0", "sin(y^2)"]), f(["0", "1", "0"])]),
        v_frame: Frame::Fields(vec![f(["-sin(y^2)", "0", "cos(y^2)"])]),
        kind: PairKind::TwistedExample1,
    }
}

/// Spheres about the origin against radial lines: the level sets of
/// `|x|^2 / 2`.
pub fn radial_sphere(n: usize, grid: &Grid) -> Result<DistributionPair, DistributionError> {
    if n < 2 {
        return Err(DistributionError::BadParams("radial_sphere needs n >= 2".into()));
    }
    let names = ["x", "y", "z"];
    let text = (0..n)
        .map(|d| {
            let v = if n <= 3 { names[d].to_string() } else { format!("x{}", d + 1) };
            format!("{v}^2")
        })
        .collect::<Vec<_>>()
        .join(" + ");
    let h = FieldExpr::parse(&format!("({text}) / 2"), n)?;
    let mut pair = level_set_pair(h, grid)?;
    pair.kind = PairKind::RadialSphere;
    Ok(pair)
}

/// `Ker dh` against the gradient line of `h`.
pub fn level_set_pair(h: FieldExpr, grid: &Grid) -> Result<DistributionPair, DistributionError> {
    let n = h.dim();
    if n < 2 {
        return Err(DistributionError::BadParams("level sets need n >= 2".into()));
    }
    let grad = VectorField::new((0..n).map(|d| h.derivative(d)).collect());
    for a in 0..grid.len() {
        let g = grad.eval(grid.seed(a).as_slice())?;
        let norm = g.norm();
        if norm < CRITICAL_GRADIENT {
            return Err(DistributionError::CriticalPoint { node: a, norm });
        }
    }
    Ok(DistributionPair {
        n,
        k: n - 1,
        h_frame: Frame::KernelOf(grad.clone()),
        v_frame: Frame::Fields(vec![grad]),
        kind: PairKind::LevelSet(h),
    })
}

/// The unique `v` in `span(w_pushed)` with `x - v` in `span(h_frame(y))`.
pub fn vertical_correction(
    pair: &DistributionPair,
    w_pushed: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &[f64],
    gap_threshold: f64,
) -> Result<DVector<f64>, DistributionError> {
    let frame = MixedFrame::new(pair.horizontal_at(y)?, w_pushed.clone())?;
    Ok(solve_mixed(&frame, x, gap_threshold)?.vertical)
}

/// Closed-form correction for a level-set pair:
/// `<grad, X> / <grad, pushed_grad> * pushed_grad`.
pub fn energy_correction(
    grad_at_y: &DVector<f64>,
    x_at_y: &DVector<f64>,
    pushed_grad: &DVector<f64>,
) -> Result<DVector<f64>, DistributionError> {
    let denom = grad_at_y.dot(pushed_grad);
    let scale = grad_at_y.norm() * pushed_grad.norm();
    if !(denom.abs() > 1e-10 * scale) {
        let gap = if scale > 0.0 { denom.abs() / scale } else { 0.0 };
        return Err(FrameError::TransversalityLost { gap }.into());
    }
    Ok(pushed_grad * (grad_at_y.dot(x_at_y) / denom))
}

/// Largest distance from a bracket `[F_a, F_b]` of frame fields to the span
/// of the frame at `x`, with brackets from central differences of step `eps`.
pub fn involutivity_defect(frame: &Frame, x: &[f64], eps: f64) -> Result<f64, EvalDomainError> {
    let n = x.len();
    let base = frame.eval(x)?;
    let r = base.ncols();
    // directional derivative of every column along every coordinate axis
    let mut partial = Vec::with_capacity(n);
    for d in 0..n {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[d] += eps;
        minus[d] -= eps;
        partial.push((frame.eval(&plus)? - frame.eval(&minus)?) / (2.0 * eps));
    }
    let col_derivative = |j: usize, along: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for d in 0..n {
            out.axpy(along[d], &partial[d].column(j).clone_owned(), 1.0);
        }
        out
    };
    let q = base.clone().qr().q();
    let mut worst: f64 = 0.0;
    for a in 0..r {
        for b in (a + 1)..r {
            let fa = base.column(a).clone_owned();
            let fb = base.column(b).clone_owned();
            let bracket = col_derivative(b, &fa) - col_derivative(a, &fb);
            let inside = &q * (q.transpose() * &bracket);
            worst = worst.max((bracket - inside).norm());
        }
    }
    Ok(worst)
}

/// Nested pairs with growing horizontal and shrinking vertical spans.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagSequence {
    pairs: Vec<DistributionPair>,
}

/// Residual of reconstructing each column of `small` inside `span(large)`.
fn span_residual(small: &DMatrix<f64>, large: &DMatrix<f64>) -> f64 {
    if small.ncols() == 0 {
        return 0.0;
    }
    if large.ncols() == 0 {
        return small.norm();
    }
    let svd = large.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let tol = 1e-12 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let basis = u.columns(0, rank);
    let mut worst: f64 = 0.0;
    for c in small.column_iter() {
        let proj = basis * (basis.transpose() * c);
        worst = worst.max((c - proj).norm() / c.norm().max(1e-300));
    }
    worst
}

impl FlagSequence {
    /// Validates ranks, complementarity and enclosure at every grid node.
    pub fn new(
        pairs: Vec<DistributionPair>,
        grid: &Grid,
        gap_threshold: f64,
    ) -> Result<Self, DistributionError> {
        let Some(first) = pairs.first() else {
            return Err(DistributionError::BadParams("empty flag sequence".into()));
        };
        let n = first.dim();
        for (i, p) in pairs.iter().enumerate() {
            if p.dim() != n {
                return Err(DistributionError::BadParams(format!(
                    "flag stage {} lives in dimension {}, expected {n}",
                    i + 1,
                    p.dim()
                )));
            }
            if i > 0 && p.rank() <= pairs[i - 1].rank() {
                return Err(DistributionError::BadParams(format!(
                    "flag stage {} does not increase the horizontal rank",
                    i + 1
                )));
            }
            if i + 1 < pairs.len() && p.is_full() {
                return Err(DistributionError::BadParams(format!(
                    "only the last flag stage may span the whole space (stage {})",
                    i + 1
                )));
            }
            p.check_complementary(grid, gap_threshold)?;
        }
        for i in 1..pairs.len() {
            for a in 0..grid.len() {
                let x = grid.seed(a);
                let (prev, next) = (&pairs[i - 1], &pairs[i]);
                let h_ok = span_residual(&prev.horizontal_at(x.as_slice())?, &next.horizontal_at(x.as_slice())?);
                let v_ok = span_residual(&next.vertical_at(x.as_slice())?, &prev.vertical_at(x.as_slice())?);
                if h_ok > 1e-8 || v_ok > 1e-8 {
                    return Err(DistributionError::NotEnclosed {
                        prev: i,
                        stage: i + 1,
                        node: a,
                    });
                }
            }
        }
        Ok(Self { pairs })
    }

    /// `coordinate_flag(1) ⊂ ... ⊂ coordinate_flag(n)`.
    pub fn maximal_coordinate(n: usize, grid: &Grid) -> Result<Self, DistributionError> {
        let pairs = (1..=n).map(|k| coordinate_flag(n, k)).collect::<Result<Vec<_>, _>>()?;
        Self::new(pairs, grid, crate::frames::DEFAULT_GAP_THRESHOLD)
    }

    pub fn pairs(&self) -> &[DistributionPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].dim()
    }

    /// Last stage spans the whole space.
    pub fn is_maximal(&self) -> bool {
        self.pairs.last().is_some_and(|p| p.is_full())
    }
}

/// One catalog entry for listings.
pub struct CatalogEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub provenance: &'static str,
}

pub const CATALOG: &[CatalogEntry] = &[
    CatalogEntry {
        name: "coordinate_flag",
        summary: "span{e_1..e_k} against span{e_(k+1)..e_n}; parameter k",
        provenance: "coordinate splitting",
    },
    CatalogEntry {
        name: "twisted_example1",
        summary: "R^3, horizontal span{(cos y^2, 0, sin y^2), e_2}, vertical (-sin y^2, 0, cos y^2)",
        provenance: "Example 1",
    },
    CatalogEntry {
        name: "radial_sphere",
        summary: "spheres about the origin against radial lines on R^n minus the origin",
        provenance: "Example 2",
    },
    CatalogEntry {
        name: "level_set",
        summary: "kernel of dh against the gradient line of h; parameter h",
        provenance: "energy foliation",
    },
];
