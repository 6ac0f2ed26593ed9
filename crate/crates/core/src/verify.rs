//! Independent oracles and residual meters.
//!
//! The oracles here avoid the engines' linear-algebra paths: the row-factor
//! oracle is a hand-written Gaussian elimination, and the Riccati reference
//! is a closed form.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::atlas::FlowAtlas;
use crate::distributions::Frame;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),
    #[error("t = {0} lies outside (-pi/2, pi/2)")]
    OutOfDomain(f64),
    #[error("trailing minor {0} vanishes")]
    SingularMinor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Composition,
    HorizontalTangency,
    VerticalTangency,
    OracleMismatch,
}

/// Worst residual over nodes and steps, with the per-step maxima.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub kind: ResidualKind,
    pub max_abs: f64,
    /// `(node, step)` of the maximum.
    pub location: Option<(usize, usize)>,
    pub history: Vec<f64>,
}

/// Streaming accumulator for a [`ResidualReport`].
#[derive(Debug, Clone)]
pub struct ResidualMeter {
    kind: ResidualKind,
    history: Vec<f64>,
    max_abs: f64,
    location: Option<(usize, usize)>,
}

impl ResidualMeter {
    pub fn new(kind: ResidualKind) -> Self {
        Self {
            kind,
            history: Vec::new(),
            max_abs: 0.0,
            location: None,
        }
    }

    /// Records the values of one step; non-finite values are skipped.
    pub fn record_step(&mut self, step: usize, values: impl IntoIterator<Item = (usize, f64)>) {
        let mut worst = 0.0f64;
        for (node, v) in values {
            if !v.is_finite() {
                continue;
            }
            worst = worst.max(v);
            if v > self.max_abs || self.location.is_none() {
                self.max_abs = v;
                self.location = Some((node, step));
            }
        }
        self.history.push(worst);
    }

    pub fn finish(self) -> ResidualReport {
        ResidualReport {
            kind: self.kind,
            max_abs: self.max_abs,
            location: self.location,
            history: self.history,
        }
    }
}

fn check_same_grid(a: &FlowAtlas, b: &FlowAtlas, what: &str) -> Result<(), VerifyError> {
    if a.dim() != b.dim() {
        return Err(VerifyError::DomainMismatch(format!(
            "{what}: dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if (a.time() - b.time()).abs() > 1e-12 * (1.0 + a.time().abs()) {
        return Err(VerifyError::DomainMismatch(format!(
            "{what}: times {} and {}",
            a.time(),
            b.time()
        )));
    }
    Ok(())
}

/// `max |xi(psi(x)) - phi(x)|` over sample points and snapshots, where `psi`
/// is evaluated from its atlas. Points where any map is undefined are skipped.
pub fn composition_residual(
    xi: &[FlowAtlas],
    phi: &[FlowAtlas],
    psi: &[FlowAtlas],
    samples: &[DVector<f64>],
) -> Result<ResidualReport, VerifyError> {
    if xi.len() != phi.len() || psi.len() != phi.len() {
        return Err(VerifyError::DomainMismatch(format!(
            "{} xi, {} phi and {} psi snapshots",
            xi.len(),
            phi.len(),
            psi.len()
        )));
    }
    let mut meter = ResidualMeter::new(ResidualKind::Composition);
    for (step, ((x, f), p)) in xi.iter().zip(phi).zip(psi).enumerate() {
        check_same_grid(x, f, "xi/phi")?;
        check_same_grid(p, f, "psi/phi")?;
        if let Some(s) = samples.iter().find(|s| s.len() != f.dim()) {
            return Err(VerifyError::DomainMismatch(format!(
                "sample of dimension {} for a map of dimension {}",
                s.len(),
                f.dim()
            )));
        }
        let values: Vec<(usize, f64)> = samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let target = f.evaluate(s.as_slice()).ok()?;
                let mid = p.evaluate(s.as_slice()).ok()?;
                let got = x.evaluate(mid.as_slice()).ok()?;
                Some((i, (got - target).norm()))
            })
            .collect();
        meter.record_step(step, values);
    }
    Ok(meter.finish())
}

/// Which part of a displacement counts as the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Displacements claimed to lie in the span: residual is the distance to it.
    WithinSpan,
    /// Displacements claimed to be orthogonal to the span: residual is the
    /// length of the projection onto it.
    OrthogonalComplement,
}

fn orthonormal_basis(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    // modified Gram-Schmidt, dropping dependent columns
    let mut out: Vec<DVector<f64>> = Vec::new();
    for c in m.column_iter() {
        let mut u = c.clone_owned();
        for b in &out {
            let d = b.dot(&u);
            u -= b * d;
        }
        let len = u.norm();
        if len > 1e-12 * c.norm().max(1e-300) {
            out.push(u / len);
        }
    }
    out
}

/// Per-step node displacements of an atlas series, measured against `frame`
/// at the displacement midpoint. Only nodes valid at both ends contribute.
pub fn tangency_residual(
    series: &[FlowAtlas],
    frame: &Frame,
    side: Side,
    kind: ResidualKind,
) -> Result<ResidualReport, VerifyError> {
    let mut meter = ResidualMeter::new(kind);
    for (step, pair) in series.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if a.len() != b.len() || a.dim() != b.dim() {
            return Err(VerifyError::DomainMismatch("series atlases differ in grid".into()));
        }
        let mut values = Vec::new();
        for node in 0..a.len() {
            if !(a.is_valid(node) && b.is_valid(node)) {
                continue;
            }
            let d = b.image(node) - a.image(node);
            let mid = (b.image(node) + a.image(node)) * 0.5;
            let Ok(f) = frame.eval(mid.as_slice()) else {
                continue;
            };
            let basis = orthonormal_basis(&f);
            let mut inside = DVector::zeros(d.len());
            for q in &basis {
                inside += q * q.dot(&d);
            }
            let r = match side {
                Side::WithinSpan => (&d - inside).norm(),
                Side::OrthogonalComplement => inside.norm(),
            };
            values.push((node, r));
        }
        meter.record_step(step, values);
    }
    Ok(meter.finish())
}

/// `-tan t`, the solution of `u' = -1 - u^2` with `u(0) = 0`.
pub fn riccati_reference(t: f64) -> Result<f64, VerifyError> {
    if !(t.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(VerifyError::OutOfDomain(t));
    }
    Ok(-t.tan())
}

type Rows = Vec<Vec<f64>>;

fn to_rows(a: &DMatrix<f64>) -> Rows {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

// Determinant by elimination with partial pivoting.
fn det_rows(mut m: Rows) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap_or(c);
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        det *= m[c][c];
        for r in (c + 1)..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    det
}

// Solves x^T P = b^T, i.e. P^T x = b, by Gauss-Jordan on the transpose.
fn solve_left(p: &Rows, b: &[f64]) -> Option<Vec<f64>> {
    let n = p.len();
    let mut aug: Rows = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| p[j][i]).collect();
            row.push(b[i]);
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs()))?;
        if aug[piv][c] == 0.0 {
            return None;
        }
        aug.swap(piv, c);
        let d = aug[c][c];
        for k in c..=n {
            aug[c][k] /= d;
        }
        for r in 0..n {
            if r != c && aug[r][c] != 0.0 {
                let f = aug[r][c];
                for k in c..=n {
                    aug[r][k] -= f * aug[c][k];
                }
            }
        }
    }
    Some(aug.into_iter().map(|row| row[n]).collect())
}

/// Factors `A = M_1 ... M_n` where `M_k` equals the identity except row `k`.
/// `M_k = P_{k-1} P_k^{-1}` with `P_k` holding unit rows `1..k` and the rows
/// `k+1..n` of `A`; so row `k` of `M_k` is `A_k P_k^{-1}`.
pub fn gauss_row_factor_oracle(a: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, VerifyError> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(VerifyError::DomainMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let rows = to_rows(a);
    let scale = rows
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    for i in 0..n {
        let size = n - i;
        let block: Rows = rows[i..].iter().map(|r| r[i..].to_vec()).collect();
        let minor = det_rows(block);
        if minor.abs() <= 1e-12 * scale.powi(size as i32) {
            return Err(VerifyError::SingularMinor(i + 1));
        }
    }
    let mut factors = Vec::with_capacity(n);
    for k in 1..=n {
        let p: Rows = (0..n)
            .map(|r| {
                if r < k {
                    (0..n).map(|c| if c == r { 1.0 } else { 0.0 }).collect()
                } else {
                    rows[r].clone()
                }
            })
            .collect();
        let row = solve_left(&p, &rows[k - 1]).ok_or(VerifyError::SingularMinor(k + 1))?;
        let mut m = DMatrix::identity(n, n);
        for c in 0..n {
            m[(k - 1, c)] = row[c];
        }
        factors.push(m);
    }
    Ok(factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{init_atlas, BoxRegion, Grid};
    use crate::fieldlang::VectorField;

    fn square() -> BoxRegion {
        BoxRegion::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()
    }

    fn product(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = ms[0].nrows();
        ms.iter().fold(DMatrix::identity(n, n), |acc, m| acc * m)
    }

    #[test]
    fn oracle_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        for m in gauss_row_factor_oracle(&id).unwrap() {
            assert_eq!(m, id);
        }
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let f = gauss_row_factor_oracle(&a).unwrap();
        assert_eq!(f[0], DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]));
        assert_eq!(f[1], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 2.0]));
        assert!((product(&f) - a).abs().max() < 1e-15);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_eq!(gauss_row_factor_oracle(&rot), Err(VerifyError::SingularMinor(2)));
    }

    #[test]
    fn riccati_examples() {
        assert_eq!(riccati_reference(0.0).unwrap(), 0.0);
        assert!((riccati_reference(std::f64::consts::FRAC_PI_4).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            riccati_reference(std::f64::consts::FRAC_PI_2),
            Err(VerifyError::OutOfDomain(_))
        ));
    }

    #[test]
    fn riccati_solves_its_ode() {
        let eps = 1e-6;
        let mut t: f64 = 0.0;
        while t <= 1.5 {
            let u = riccati_reference(t).unwrap();
            let du = (riccati_reference(t + eps).unwrap() - riccati_reference(t - eps).unwrap()) / (2.0 * eps);
            let tol = 1e-8 * (1.0 + u * u).powi(2);
            assert!((du + 1.0 + u * u).abs() <= tol.max(1e-8), "t = {t}");
            t += 0.01;
        }
        // forward integration of the ODE itself, RK4
        let (mut u, h) = (0.0f64, 1e-4);
        let f = |u: f64| -1.0 - u * u;
        for _ in 0..7854 {
            let k1 = f(u);
            let k2 = f(u + 0.5 * h * k1);
            let k3 = f(u + 0.5 * h * k2);
            let k4 = f(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((u - riccati_reference(0.7854).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn composition_examples() {
        let grid = Grid::new(square(), 9).unwrap();
        let rot = |t: f64| {
            DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()])
        };
        let samples: Vec<_> = [[0.1, 0.2], [-0.33, 0.41], [0.25, -0.6]]
            .iter()
            .map(|p| DVector::from_row_slice(p))
            .collect();
        let phi = FlowAtlas::affine(grid.clone(), &rot(0.4), &DVector::zeros(2));
        let id = init_atlas(square(), 9).unwrap();
        let r = composition_residual(&[phi.clone()], &[phi.clone()], &[id.clone()], &samples).unwrap();
        assert!(r.max_abs < 1e-12);

        // phi = xi o psi with a shear xi and a scaling psi
        let shear = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        let scale = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.8]);
        let big = Grid::new(BoxRegion::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(), 9).unwrap();
        let xi = FlowAtlas::affine(big, &shear, &DVector::zeros(2));
        let psi = FlowAtlas::affine(grid.clone(), &scale, &DVector::zeros(2));
        let phi = FlowAtlas::affine(grid.clone(), &(&shear * &scale), &DVector::zeros(2));
        let r = composition_residual(&[xi.clone()], &[phi.clone()], &[psi.clone()], &samples).unwrap();
        assert!(r.max_abs < 1e-9);

        // swapped order is detected
        let wrong_xi = FlowAtlas::affine(
            Grid::new(BoxRegion::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(), 9).unwrap(),
            &scale,
            &DVector::zeros(2),
        );
        let wrong_psi = FlowAtlas::affine(grid, &shear, &DVector::zeros(2));
        let r = composition_residual(&[wrong_xi], &[phi], &[wrong_psi], &samples).unwrap();
        assert!(r.max_abs > 1e-2);

        assert!(matches!(
            composition_residual(&[xi], &[], &[psi], &samples),
            Err(VerifyError::DomainMismatch(_))
        ));
    }

    #[test]
    fn tangency_examples() {
        let e1 = Frame::Fields(vec![VectorField::parse(&["1", "0"]).unwrap()]);
        let id = init_atlas(square(), 5).unwrap();
        let r = tangency_residual(&[id.clone(), id.clone()], &e1, Side::WithinSpan, ResidualKind::HorizontalTangency).unwrap();
        assert_eq!(r.max_abs, 0.0);

        let grid = Grid::new(square(), 5).unwrap();
        let shear = FlowAtlas::affine(grid.clone(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), &DVector::zeros(2));
        let r = tangency_residual(&[id.clone(), shear.clone()], &e1, Side::WithinSpan, ResidualKind::HorizontalTangency).unwrap();
        assert!(r.max_abs < 1e-15);
        let r = tangency_residual(&[id.clone(), shear], &e1, Side::OrthogonalComplement, ResidualKind::VerticalTangency).unwrap();
        assert!((r.max_abs - 0.1).abs() < 1e-12);
        assert_eq!(r.history.len(), 1);

        let lift = FlowAtlas::affine(grid, &DMatrix::identity(2, 2), &DVector::from_vec(vec![0.0, 0.05]));
        let r = tangency_residual(&[id, lift], &e1, Side::WithinSpan, ResidualKind::HorizontalTangency).unwrap();
        assert!((r.max_abs - 0.05).abs() < 1e-12);
    }

    #[test]
    fn meter_tracks_location() {
        let mut m = ResidualMeter::new(ResidualKind::Composition);
        m.record_step(0, [(0, 1e-3), (1, 2e-3)]);
        m.record_step(1, [(4, 5e-4), (2, f64::NAN)]);
        let r = m.finish();
        assert_eq!(r.max_abs, 2e-3);
        assert_eq!(r.location, Some((1, 0)));
        assert_eq!(r.history, vec![2e-3, 5e-4]);
    }
}
