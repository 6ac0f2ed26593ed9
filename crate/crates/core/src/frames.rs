//! Small dense linear algebra on mixed frames: oblique decomposition of a
//! vector along a horizontal basis and a (pushed-forward) vertical basis,
//! the transversality gap, and trailing principal minors.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default gap below which a mixed frame counts as degenerate.
pub const DEFAULT_GAP_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("degenerate split: {k} horizontal and {v} vertical vectors in dimension {n}")]
    DegenerateSplit { n: usize, k: usize, v: usize },
    #[error("frame contains non-finite entries")]
    NonFinite,
    #[error("vector has dimension {got}, frame lives in dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("frame column {0} is zero")]
    ZeroColumn(usize),
    #[error("transversality lost: gap {gap:.3e} is at or below the threshold")]
    TransversalityLost { gap: f64 },
}

/// Horizontal basis `H` (k columns) next to a vertical basis `W` (n - k
/// columns) at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedFrame {
    horizontal: DMatrix<f64>,
    vertical: DMatrix<f64>,
}

impl MixedFrame {
    pub fn new(horizontal: DMatrix<f64>, vertical: DMatrix<f64>) -> Result<Self, FrameError> {
        let n = horizontal.nrows();
        let (k, v) = (horizontal.ncols(), vertical.ncols());
        if vertical.nrows() != n {
            return Err(FrameError::DimensionMismatch {
                expected: n,
                got: vertical.nrows(),
            });
        }
        if k == 0 || v == 0 || k + v != n {
            return Err(FrameError::DegenerateSplit { n, k, v });
        }
        if horizontal.iter().chain(vertical.iter()).any(|x| !x.is_finite()) {
            return Err(FrameError::NonFinite);
        }
        Ok(Self {
            horizontal,
            vertical,
        })
    }

    pub fn dim(&self) -> usize {
        self.horizontal.nrows()
    }

    pub fn rank_horizontal(&self) -> usize {
        self.horizontal.ncols()
    }

    pub fn horizontal(&self) -> &DMatrix<f64> {
        &self.horizontal
    }

    pub fn vertical(&self) -> &DMatrix<f64> {
        &self.vertical
    }

    /// `[H | W]`.
    pub fn combined(&self) -> DMatrix<f64> {
        let n = self.dim();
        let k = self.rank_horizontal();
        let mut m = DMatrix::zeros(n, n);
        m.columns_mut(0, k).copy_from(&self.horizontal);
        m.columns_mut(k, n - k).copy_from(&self.vertical);
        m
    }
}

/// Result of splitting `X = H a + W b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSolution {
    pub horizontal_coeffs: DVector<f64>,
    pub vertical_coeffs: DVector<f64>,
    /// `v = W b`, the vertical correction.
    pub vertical: DVector<f64>,
}

impl MixedSolution {
    /// `X - v`, which lies in the horizontal span.
    pub fn horizontal_part(&self, x: &DVector<f64>) -> DVector<f64> {
        x - &self.vertical
    }
}

/// Smallest singular value of `[H | W]` with unit-length columns.
pub fn transversality_gap(frame: &MixedFrame) -> Result<f64, FrameError> {
    let mut m = frame.combined();
    for (j, mut col) in m.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(FrameError::ZeroColumn(j));
        }
        col /= norm;
    }
    let sv = m.singular_values();
    Ok(sv.min().clamp(0.0, 1.0))
}

/// Splits `x` in the mixed frame. Fails when the gap is at or below `threshold`.
pub fn solve_mixed(
    frame: &MixedFrame,
    x: &DVector<f64>,
    threshold: f64,
) -> Result<MixedSolution, FrameError> {
    let mut out = solve_mixed_many(frame, std::slice::from_ref(x), threshold)?;
    Ok(out.pop().expect("one right-hand side"))
}

/// [`solve_mixed`] for several right-hand sides sharing one factorization.
pub fn solve_mixed_many(
    frame: &MixedFrame,
    xs: &[DVector<f64>],
    threshold: f64,
) -> Result<Vec<MixedSolution>, FrameError> {
    let n = frame.dim();
    let k = frame.rank_horizontal();
    if let Some(bad) = xs.iter().find(|x| x.len() != n) {
        return Err(FrameError::DimensionMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    let gap = transversality_gap(frame)?;
    if gap <= threshold {
        return Err(FrameError::TransversalityLost { gap });
    }
    let qr = frame.combined().col_piv_qr();
    xs.iter()
        .map(|x| {
            let coeffs = qr
                .solve(x)
                .ok_or(FrameError::TransversalityLost { gap })?;
            let a = coeffs.rows(0, k).clone_owned();
            let b = coeffs.rows(k, n - k).clone_owned();
            let vertical = frame.vertical() * &b;
            Ok(MixedSolution {
                horizontal_coeffs: a,
                vertical_coeffs: b,
                vertical,
            })
        })
        .collect()
}

/// Entry `i` (zero-based) is the determinant of the lower-right
/// `(n - i) x (n - i)` block; entry 0 is `det J`.
pub fn trailing_minors(j: &DMatrix<f64>) -> Vec<f64> {
    let n = j.nrows();
    assert_eq!(n, j.ncols(), "trailing minors need a square matrix");
    (0..n)
        .map(|i| j.view((i, i), (n - i, n - i)).clone_owned().determinant())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn frame(h: &[&[f64]], w: &[&[f64]]) -> MixedFrame {
        let n = h[0].len();
        let hm = DMatrix::from_fn(n, h.len(), |r, c| h[c][r]);
        let wm = DMatrix::from_fn(n, w.len(), |r, c| w[c][r]);
        MixedFrame::new(hm, wm).unwrap()
    }

    // closed-form smallest singular value of a 2x2 matrix: |det| / sigma_max
    fn min_sv_2x2(m: &DMatrix<f64>) -> f64 {
        let s = m.iter().map(|x| x * x).sum::<f64>();
        let d = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let smax = ((s + (s * s - 4.0 * d * d).max(0.0).sqrt()) / 2.0).sqrt();
        d.abs() / smax
    }

    fn cofactor_det(m: &DMatrix<f64>) -> f64 {
        let n = m.nrows();
        if n == 1 {
            return m[(0, 0)];
        }
        (0..n)
            .map(|c| {
                let minor = m.clone().remove_row(0).remove_column(c);
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, c)] * cofactor_det(&minor)
            })
            .sum()
    }

    #[test]
    fn degenerate_splits_rejected() {
        let h = DMatrix::identity(2, 2);
        let w = DMatrix::zeros(2, 0);
        assert!(matches!(
            MixedFrame::new(h, w),
            Err(FrameError::DegenerateSplit { .. })
        ));
        assert!(matches!(
            MixedFrame::new(col(&[1.0, f64::NAN]), col(&[0.0, 1.0])),
            Err(FrameError::NonFinite)
        ));
    }

    #[test]
    fn coordinate_split() {
        let f = frame(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        let s = solve_mixed(&f, &DVector::from_vec(vec![3.0, 4.0]), DEFAULT_GAP_THRESHOLD).unwrap();
        assert!((s.horizontal_coeffs[0] - 3.0).abs() < 1e-15);
        assert!((s.vertical - DVector::from_vec(vec![0.0, 4.0])).norm() < 1e-15);
    }

    #[test]
    fn oblique_split() {
        // [1 0; 1 1] (a; b) = (2; 5)  =>  a = 2, b = 3
        let f = frame(&[&[1.0, 1.0]], &[&[0.0, 1.0]]);
        let x = DVector::from_vec(vec![2.0, 5.0]);
        let s = solve_mixed(&f, &x, DEFAULT_GAP_THRESHOLD).unwrap();
        assert!((s.horizontal_coeffs[0] - 2.0).abs() < 1e-14);
        assert!((&s.vertical - DVector::from_vec(vec![0.0, 3.0])).norm() < 1e-14);
        let horiz = s.horizontal_part(&x);
        assert!((horiz[0] - horiz[1]).abs() < 1e-14);
    }

    #[test]
    fn twisted_degeneracy_detected() {
        let f = frame(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]],
            &[&[-1.0, 0.0, 0.0]],
        );
        assert!(transversality_gap(&f).unwrap() < 1e-12);
        let err = solve_mixed(&f, &DVector::from_vec(vec![0.3, 0.1, 2.0]), DEFAULT_GAP_THRESHOLD);
        assert!(matches!(err, Err(FrameError::TransversalityLost { .. })));
    }

    #[test]
    fn gap_examples() {
        let f = frame(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        assert!((transversality_gap(&f).unwrap() - 1.0).abs() < 1e-15);

        let r = std::f64::consts::FRAC_1_SQRT_2;
        let f = frame(&[&[r, r]], &[&[0.0, 1.0]]);
        let oracle = min_sv_2x2(&f.combined());
        let gap = transversality_gap(&f).unwrap();
        assert!((gap - oracle).abs() < 1e-12);
        assert!((gap - 0.5412).abs() < 1e-4);
    }

    #[test]
    fn gap_is_scale_invariant() {
        let a = frame(&[&[1.0, 1.0]], &[&[0.0, 1.0]]);
        let b = frame(&[&[1e4, 1e4]], &[&[0.0, 1e-3]]);
        let (ga, gb) = (
            transversality_gap(&a).unwrap(),
            transversality_gap(&b).unwrap(),
        );
        assert!((ga - gb).abs() < 1e-12);
    }

    #[test]
    fn zero_column_reported() {
        let f = frame(&[&[1.0, 0.0]], &[&[0.0, 0.0]]);
        assert_eq!(transversality_gap(&f), Err(FrameError::ZeroColumn(1)));
    }

    #[test]
    fn trailing_minor_examples() {
        for n in 1..6 {
            assert!(trailing_minors(&DMatrix::identity(n, n))
                .iter()
                .all(|&m| (m - 1.0).abs() < 1e-15));
        }
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let m = trailing_minors(&j);
        assert!((m[0] - 1.0).abs() < 1e-14 && (m[1] - 2.0).abs() < 1e-14);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let m = trailing_minors(&rot);
        assert!((m[0] - 1.0).abs() < 1e-14 && m[1].abs() < 1e-15);
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
    }

    proptest! {
        #[test]
        fn reconstruction_and_horizontality(
            h in proptest::collection::vec(-1.0f64..1.0, 6),
            w in proptest::collection::vec(-1.0f64..1.0, 3),
            x in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let f = MixedFrame::new(
                DMatrix::from_column_slice(3, 2, &h),
                DMatrix::from_column_slice(3, 1, &w),
            ).unwrap();
            let x = DVector::from_vec(x);
            prop_assume!(transversality_gap(&f).unwrap() > 1e-3);
            let s = solve_mixed(&f, &x, DEFAULT_GAP_THRESHOLD).unwrap();
            let recon = f.horizontal() * &s.horizontal_coeffs + &s.vertical;
            prop_assert!((recon - &x).norm() <= 1e-10 * x.norm().max(1.0));
            // X - v must carry no vertical coefficient; checked with an LU solve
            let rest = s.horizontal_part(&x);
            let coeffs = f.combined().lu().solve(&rest).unwrap();
            prop_assert!(coeffs[2].abs() * f.vertical().norm() <= 1e-10 * x.norm().max(1.0));
        }

        #[test]
        fn solve_fails_iff_gap_below_threshold(
            h in proptest::collection::vec(-1.0f64..1.0, 2),
            r in proptest::collection::vec(-1.0f64..1.0, 2),
            c in 0.2f64..3.0,
            exp in 0i32..14,
        ) {
            let h = DVector::from_vec(h);
            prop_assume!(h.norm() > 0.1);
            let eps = 10f64.powi(-exp);
            let w = &h * c + DVector::from_vec(r) * eps;
            let f = MixedFrame::new(
                DMatrix::from_column_slice(2, 1, h.as_slice()),
                DMatrix::from_column_slice(2, 1, w.as_slice()),
            ).unwrap();
            let gap = transversality_gap(&f).unwrap();
            let res = solve_mixed(&f, &DVector::from_vec(vec![1.0, 0.5]), DEFAULT_GAP_THRESHOLD);
            prop_assert_eq!(res.is_err(), gap <= DEFAULT_GAP_THRESHOLD);
        }

        #[test]
        fn trailing_minors_match_cofactor_oracle(j in (2usize..5).prop_flat_map(arb_matrix)) {
            let n = j.nrows();
            let minors = trailing_minors(&j);
            for i in 0..n {
                let block = j.view((i, i), (n - i, n - i)).clone_owned();
                let oracle = cofactor_det(&block);
                prop_assert!((minors[i] - oracle).abs() <= 1e-10 * (1.0 + oracle.abs()));
            }
        }

        #[test]
        fn block_triangular_minors_factor(
            a in arb_matrix(2),
            b in arb_matrix(2),
            c in arb_matrix(2),
        ) {
            // [A C; 0 B]: trailing minors are det(A)det(B), ., det(B), B[1,1]
            let mut j = DMatrix::zeros(4, 4);
            j.view_mut((0, 0), (2, 2)).copy_from(&a);
            j.view_mut((0, 2), (2, 2)).copy_from(&c);
            j.view_mut((2, 2), (2, 2)).copy_from(&b);
            let minors = trailing_minors(&j);
            let expect0 = cofactor_det(&a) * cofactor_det(&b);
            prop_assert!((minors[0] - expect0).abs() <= 1e-10 * (1.0 + expect0.abs()));
            prop_assert!((minors[2] - cofactor_det(&b)).abs() <= 1e-12 * (1.0 + minors[2].abs()));
            prop_assert!((minors[3] - b[(1, 1)]).abs() <= 1e-14);
        }
    }
}
