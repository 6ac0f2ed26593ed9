//! Seeded Brownian paths and stochastic Heun stepping for points and their
//! Jacobians.
//!
//! Channel 0 is time itself (`dW^0 = h`); channels `1..=m` carry Brownian
//! increments. Each channel draws from its own ChaCha stream keyed by the
//! seed and the channel index, so a path is re-derivable from
//! `(seed, m, T, h)` alone.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::atlas::BoxRegion;
use crate::fieldlang::{EvalDomainError, VectorFieldSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("bad time grid: T = {t_end}, h = {h} ({reason})")]
    BadTimeGrid {
        t_end: f64,
        h: f64,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error(transparent)]
    Eval(#[from] EvalDomainError),
    #[error("trajectory left the configured box")]
    LeftRegion,
}

/// Discrete Brownian path on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    seed: u64,
    m: usize,
    h: f64,
    steps: usize,
    // step-major, `steps * m`
    dw: Vec<f64>,
}

impl NoisePath {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.h
    }

    /// Brownian increment of channel `j` (1-based) at `step`.
    pub fn brownian(&self, step: usize, j: usize) -> f64 {
        self.dw[step * self.m + (j - 1)]
    }

    /// All `m + 1` increments of one step, channel 0 first.
    pub fn increments(&self, step: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.m + 1);
        out[0] = self.h;
        for j in 1..=self.m {
            out[j] = self.brownian(step, j);
        }
        out
    }

    /// `W^j_T`, the sum of the increments of channel `j`.
    pub fn terminal(&self, j: usize) -> f64 {
        if j == 0 {
            return self.horizon();
        }
        (0..self.steps).map(|s| self.brownian(s, j)).sum()
    }

    /// A path whose step `s` is the sum of `factor` consecutive steps of `self`.
    /// Used for refinement studies driven by one fine path.
    pub fn coarsen(&self, factor: usize) -> Option<NoisePath> {
        if factor == 0 || self.steps % factor != 0 {
            return None;
        }
        let steps = self.steps / factor;
        let mut dw = vec![0.0; steps * self.m];
        for s in 0..steps {
            for j in 0..self.m {
                dw[s * self.m + j] = (0..factor)
                    .map(|q| self.dw[(s * factor + q) * self.m + j])
                    .sum();
            }
        }
        Some(NoisePath {
            seed: self.seed,
            m: self.m,
            h: self.h * factor as f64,
            steps,
            dw,
        })
    }
}

pub fn generate_path(seed: u64, m: usize, t_end: f64, h: f64) -> Result<NoisePath, NoiseError> {
    let bad = |reason| NoiseError::BadTimeGrid { t_end, h, reason };
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(bad("horizon must be positive"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(bad("step must be positive"));
    }
    let ratio = t_end / h;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
        return Err(bad("horizon is not an integral number of steps"));
    }
    let steps = steps as usize;
    let sqrt_h = h.sqrt();
    let mut dw = vec![0.0; steps * m];
    for j in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        for s in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            dw[s * m + j] = sqrt_h * z;
        }
    }
    Ok(NoisePath {
        seed,
        m,
        h,
        steps,
        dw,
    })
}

/// Supplies the driving fields and their spatial Jacobians.
pub trait DrivingFields: Sync {
    fn dim(&self) -> usize;
    /// `m + 1`.
    fn channels(&self) -> usize;
    fn value(&self, i: usize, y: &DVector<f64>) -> Result<DVector<f64>, EvalDomainError>;
    fn jacobian(&self, i: usize, y: &DVector<f64>) -> Result<DMatrix<f64>, EvalDomainError>;
}

impl DrivingFields for VectorFieldSet {
    fn dim(&self) -> usize {
        VectorFieldSet::dim(self)
    }

    fn channels(&self) -> usize {
        self.noise_dim() + 1
    }

    fn value(&self, i: usize, y: &DVector<f64>) -> Result<DVector<f64>, EvalDomainError> {
        self.eval(i, y.as_slice())
    }

    fn jacobian(&self, i: usize, y: &DVector<f64>) -> Result<DMatrix<f64>, EvalDomainError> {
        self.eval_jacobian(i, y.as_slice())
    }
}

/// `y + sum_i values[i] * dw[i]`.
pub fn euler_predict(y: &DVector<f64>, values: &[DVector<f64>], dw: &DVector<f64>) -> DVector<f64> {
    let mut out = y.clone();
    for (v, &d) in values.iter().zip(dw.iter()) {
        out.axpy(d, v, 1.0);
    }
    out
}

/// `y + 1/2 sum_i (start[i] + predicted[i]) * dw[i]`.
pub fn heun_average(
    y: &DVector<f64>,
    start: &[DVector<f64>],
    predicted: &[DVector<f64>],
    dw: &DVector<f64>,
) -> DVector<f64> {
    let mut out = y.clone();
    for ((a, b), &d) in start.iter().zip(predicted).zip(dw.iter()) {
        out.axpy(0.5 * d, a, 1.0);
        out.axpy(0.5 * d, b, 1.0);
    }
    out
}

/// `J + sum_i DX_i J dw_i`.
pub fn jacobian_predict(
    j: &DMatrix<f64>,
    dx: &[DMatrix<f64>],
    dw: &DVector<f64>,
) -> DMatrix<f64> {
    let mut out = j.clone();
    for (d, &w) in dx.iter().zip(dw.iter()) {
        out += d * j * w;
    }
    out
}

/// `J + 1/2 sum_i (DX_i J + DX^_i J^) dw_i`.
pub fn jacobian_average(
    j: &DMatrix<f64>,
    j_pred: &DMatrix<f64>,
    dx_start: &[DMatrix<f64>],
    dx_pred: &[DMatrix<f64>],
    dw: &DVector<f64>,
) -> DMatrix<f64> {
    let mut out = j.clone();
    for ((a, b), &w) in dx_start.iter().zip(dx_pred).zip(dw.iter()) {
        out += (a * j + b * j_pred) * (0.5 * w);
    }
    out
}

fn check_bounds(y: &DVector<f64>, bounds: Option<&BoxRegion>) -> Result<(), StepError> {
    match bounds {
        Some(b) if !b.contains(y.as_slice()) => Err(StepError::LeftRegion),
        _ => Ok(()),
    }
}

fn values_at<F: DrivingFields + ?Sized>(
    fields: &F,
    y: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, EvalDomainError> {
    (0..fields.channels()).map(|i| fields.value(i, y)).collect()
}

fn jacobians_at<F: DrivingFields + ?Sized>(
    fields: &F,
    y: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>, EvalDomainError> {
    (0..fields.channels()).map(|i| fields.jacobian(i, y)).collect()
}

/// One stochastic Heun step of `dy = sum_i X_i(y) o dW^i`.
pub fn heun_step<F: DrivingFields + ?Sized>(
    fields: &F,
    y: &DVector<f64>,
    dw: &DVector<f64>,
    bounds: Option<&BoxRegion>,
) -> Result<DVector<f64>, StepError> {
    let start = values_at(fields, y)?;
    let pred = euler_predict(y, &start, dw);
    let at_pred = values_at(fields, &pred)?;
    let next = heun_average(y, &start, &at_pred, dw);
    check_bounds(&next, bounds)?;
    Ok(next)
}

/// Heun step of the point together with its variational equation
/// `dJ = sum_i DX_i(y) J o dW^i`. The Jacobian update is the exact derivative
/// of the discrete point map.
pub fn heun_step_jacobian<F: DrivingFields + ?Sized>(
    fields: &F,
    y: &DVector<f64>,
    j: &DMatrix<f64>,
    dw: &DVector<f64>,
    bounds: Option<&BoxRegion>,
) -> Result<(DVector<f64>, DMatrix<f64>), StepError> {
    let start = values_at(fields, y)?;
    let dx_start = jacobians_at(fields, y)?;
    let pred = euler_predict(y, &start, dw);
    let j_pred = jacobian_predict(j, &dx_start, dw);
    let at_pred = values_at(fields, &pred)?;
    let dx_pred = jacobians_at(fields, &pred)?;
    let next = heun_average(y, &start, &at_pred, dw);
    check_bounds(&next, bounds)?;
    let j_next = jacobian_average(j, &j_pred, &dx_start, &dx_pred, dw);
    Ok((next, j_next))
}
