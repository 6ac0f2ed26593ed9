//! Decomposition engines: the full flow, the pairwise horizontal lift with
//! its vertical remainder, the fast path for Ad-invariant pairs, the cascade
//! over a flag sequence, and the coordinate-wise factorization.
//!
//! All per-node work inside a step reads immutable snapshots of the previous
//! phase and is collected in node order, so results do not depend on the
//! number of worker threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::atlas::{
    compose, compose_inverse, mls_fit, stencil_weight, AtlasError, BoxRegion, FlowAtlas, Grid,
};
use crate::distributions::{DistributionError, DistributionPair, FlagSequence};
use crate::fieldlang::{EvalDomainError, VectorFieldSet};
use crate::frames::{
    solve_mixed, solve_mixed_many, trailing_minors, transversality_gap, MixedFrame,
    DEFAULT_GAP_THRESHOLD,
};
use crate::noise::{
    euler_predict, generate_path, heun_average, heun_step, heun_step_jacobian, jacobian_average,
    jacobian_predict, DrivingFields, NoiseError, NoisePath,
};
use crate::verify::{ResidualKind, ResidualMeter, ResidualReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecomposeError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("every node stopped at t = 0")]
    AllStoppedAtStart,
    #[error("cascade stage {0} stopped at t = 0")]
    StageFailed(usize),
    #[error("trailing minor {index} vanishes at node {node} (value {value:.3e})")]
    MinorVanishes {
        index: usize,
        node: usize,
        value: f64,
        minors_min: Vec<f64>,
    },
}

/// Monitor thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Transversality gap at or below which a node stops.
    pub gap: f64,
    /// Node stops when `sum_i |dW^i| |D X~_i|_F` exceeds this.
    pub explosion: f64,
    /// Relative trailing-minor threshold for coordinate factorization.
    pub minor: f64,
    /// Composition residual tolerance, relative to the region diameter.
    pub residual: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            gap: DEFAULT_GAP_THRESHOLD,
            explosion: 0.5,
            minor: 1e-4,
            residual: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Pair(DistributionPair),
    Flags(FlagSequence),
}

/// Everything an engine needs: domain, fields, geometry, noise and monitors.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Seed box carrying the grid.
    pub region: BoxRegion,
    /// Trajectories leaving this box stop.
    pub bounds: BoxRegion,
    pub resolution: usize,
    pub fields: VectorFieldSet,
    pub geometry: Option<Geometry>,
    pub seed: u64,
    pub t_end: f64,
    pub h: f64,
    pub thresholds: Thresholds,
    /// Snapshot spacing in steps; 0 keeps only the first and last state.
    pub record_every: usize,
    pub base_point: Option<DVector<f64>>,
    /// Recompute psi after every step for the online residual meters.
    pub track_psi: bool,
}

impl Scenario {
    pub fn new(region: BoxRegion, resolution: usize, fields: VectorFieldSet) -> Self {
        Self {
            bounds: region.clone(),
            region,
            resolution,
            fields,
            geometry: None,
            seed: 0,
            t_end: 1.0,
            h: 1e-3,
            thresholds: Thresholds::default(),
            record_every: 0,
            base_point: None,
            track_psi: true,
        }
    }

    pub fn with_pair(mut self, pair: DistributionPair) -> Self {
        self.geometry = Some(Geometry::Pair(pair));
        self
    }

    pub fn with_flags(mut self, flags: FlagSequence) -> Self {
        self.geometry = Some(Geometry::Flags(flags));
        self
    }

    pub fn with_noise(mut self, seed: u64, t_end: f64, h: f64) -> Self {
        self.seed = seed;
        self.t_end = t_end;
        self.h = h;
        self
    }

    pub fn with_bounds(mut self, bounds: BoxRegion) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn grid(&self) -> Result<Grid, DecomposeError> {
        Ok(Grid::new(self.region.clone(), self.resolution)?)
    }

    pub fn noise_path(&self) -> Result<NoisePath, DecomposeError> {
        Ok(generate_path(self.seed, self.fields.noise_dim(), self.t_end, self.h)?)
    }

    pub fn base_point(&self) -> DVector<f64> {
        self.base_point.clone().unwrap_or_else(|| self.region.center())
    }

    pub fn pair(&self) -> Result<&DistributionPair, DecomposeError> {
        match &self.geometry {
            Some(Geometry::Pair(p)) => Ok(p),
            Some(Geometry::Flags(f)) if f.len() == 1 => Ok(&f.pairs()[0]),
            _ => Err(DecomposeError::Scenario("this mode needs a distribution pair".into())),
        }
    }

    pub fn flags(&self) -> Result<FlagSequence, DecomposeError> {
        match &self.geometry {
            Some(Geometry::Flags(f)) => Ok(f.clone()),
            Some(Geometry::Pair(p)) => {
                Ok(FlagSequence::new(vec![p.clone()], &self.grid()?, self.thresholds.gap)?)
            }
            None => Err(DecomposeError::Scenario("cascade mode needs a flag sequence".into())),
        }
    }

    /// Checks dimensions, the seed box against the bounds, and complementarity
    /// of the geometry at every grid node.
    pub fn validate(&self) -> Result<(), DecomposeError> {
        let n = self.dim();
        if self.fields.dim() != n || self.bounds.dim() != n {
            return Err(DecomposeError::Scenario(format!(
                "fields live in dimension {} and bounds in {}, the region in {n}",
                self.fields.dim(),
                self.bounds.dim()
            )));
        }
        let inside = (0..n).all(|d| {
            self.bounds.lo()[d] <= self.region.lo()[d] && self.region.hi()[d] <= self.bounds.hi()[d]
        });
        if !inside {
            return Err(DecomposeError::Scenario("bounds must contain the region".into()));
        }
        if let Some(b) = &self.base_point {
            if !self.region.contains(b.as_slice()) {
                return Err(DecomposeError::Scenario("base point lies outside the region".into()));
            }
        }
        let grid = self.grid()?;
        for a in 0..grid.len() {
            let s = grid.seed(a);
            for i in 0..=self.fields.noise_dim() {
                self.fields.eval(i, s.as_slice()).map_err(|e| {
                    DecomposeError::Scenario(format!("field {i} at grid node {a}: {e}"))
                })?;
            }
        }
        match &self.geometry {
            Some(Geometry::Pair(p)) => {
                if p.dim() != n {
                    return Err(DecomposeError::Scenario(format!(
                        "distribution lives in dimension {}, region in {n}",
                        p.dim()
                    )));
                }
                if p.rank() == 0 || p.rank() >= n {
                    return Err(DecomposeError::Scenario(format!(
                        "a distribution pair needs 0 < k < n, got k = {}",
                        p.rank()
                    )));
                }
                p.check_complementary(&grid, self.thresholds.gap)?;
            }
            Some(Geometry::Flags(f)) => {
                if f.dim() != n {
                    return Err(DecomposeError::Scenario("flag dimension differs from the region".into()));
                }
                for p in f.pairs() {
                    p.check_complementary(&grid, self.thresholds.gap)?;
                }
            }
            None => {}
        }
        self.noise_path()?;
        Ok(())
    }
}

/// Why a node stopped.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    TransversalityLost { gap: f64 },
    Explosion { growth: f64 },
    LeftRegion,
    EvalError { message: String },
    RankDeficientStencil,
}

/// Least-squares affine fit `image ~ matrix * seed + offset` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub t: f64,
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

/// States kept at one recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub phi: FlowAtlas,
    pub xi: FlowAtlas,
    pub psi: FlowAtlas,
}

/// Output of the pairwise engine.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    pub phi: FlowAtlas,
    pub xi: FlowAtlas,
    pub psi: FlowAtlas,
    pub snapshots: Vec<Snapshot>,
    /// Last accepted step per node; `horizon` for nodes that never stopped.
    pub tau: Vec<usize>,
    pub stops: Vec<Option<StopReason>>,
    pub horizon: usize,
    pub h: f64,
    /// Minimum gap over live nodes at the start of every step.
    pub gap_history: Vec<f64>,
    /// Affine fit of xi at every state `0..=horizon`.
    pub xi_fits: Vec<LinearFit>,
    pub composition: ResidualReport,
    /// Horizontal part of per-step psi displacements.
    pub verticality: ResidualReport,
    /// Vertical part of per-step xi displacements.
    pub tangency: ResidualReport,
    /// Largest vertical coefficient of a corrected field, recomputed independently.
    pub horizontality_max: f64,
}

impl DecompositionResult {
    pub fn tau_min(&self) -> usize {
        self.tau.iter().copied().min().unwrap_or(0)
    }

    pub fn tau_median(&self) -> usize {
        median(&self.tau)
    }
}

fn median(v: &[usize]) -> usize {
    if v.is_empty() {
        return 0;
    }
    let mut s = v.to_vec();
    s.sort_unstable();
    s[(s.len() - 1) / 2]
}

/// Steps at which snapshots are kept.
fn record_steps(horizon: usize, every: usize) -> Vec<usize> {
    let mut steps = vec![0];
    if every > 0 {
        steps.extend((every..horizon).step_by(every));
    }
    if horizon > 0 {
        steps.push(horizon);
    }
    steps
}

fn eval_stop(e: EvalDomainError) -> StopReason {
    StopReason::EvalError {
        message: e.to_string(),
    }
}

/// Per-node trajectories of a point field, with or without Jacobians.
struct PointRun {
    finals: FlowAtlas,
    snapshots: Vec<FlowAtlas>,
    stopped_at: Vec<Option<usize>>,
}

fn track_points<F: DrivingFields>(
    grid: &Grid,
    bounds: &BoxRegion,
    fields: &F,
    path: &NoisePath,
    every: usize,
    with_jacobian: bool,
) -> PointRun {
    let steps = record_steps(path.steps(), every);
    let n = grid.dim();
    let per_node: Vec<_> = (0..grid.len())
        .into_par_iter()
        .map(|a| {
            let mut y = grid.seed(a);
            let mut j = DMatrix::identity(n, n);
            let mut stopped = None;
            let mut kept = Vec::with_capacity(steps.len());
            let mut next_record = 0;
            for s in 0..=path.steps() {
                if next_record < steps.len() && steps[next_record] == s {
                    kept.push((y.clone(), j.clone(), stopped.is_none()));
                    next_record += 1;
                }
                if s == path.steps() || stopped.is_some() {
                    continue;
                }
                let dw = path.increments(s);
                let out = if with_jacobian {
                    heun_step_jacobian(fields, &y, &j, &dw, Some(bounds))
                } else {
                    heun_step(fields, &y, &dw, Some(bounds)).map(|p| (p, j.clone()))
                };
                match out {
                    Ok((p, q)) if p.iter().all(|v| v.is_finite()) => {
                        y = p;
                        j = q;
                    }
                    _ => stopped = Some(s),
                }
            }
            (kept, stopped)
        })
        .collect();
    let mut snapshots: Vec<FlowAtlas> = steps
        .iter()
        .map(|&s| {
            let mut at = FlowAtlas::identity(grid.clone());
            at.set_time(s as f64 * path.step_size());
            at
        })
        .collect();
    let mut stopped_at = Vec::with_capacity(grid.len());
    for (a, (kept, stopped)) in per_node.into_iter().enumerate() {
        for (snap, (y, j, ok)) in snapshots.iter_mut().zip(kept) {
            snap.set_node(a, y, j);
            if !ok {
                snap.invalidate(a);
            }
        }
        stopped_at.push(stopped);
    }
    let finals = snapshots.last().cloned().expect("at least one snapshot");
    PointRun {
        finals,
        snapshots,
        stopped_at,
    }
}

/// The full flow `phi` on the scenario grid, advanced through the whole path.
pub fn run_full_flow(scenario: &Scenario, path: &NoisePath) -> Result<FlowAtlas, DecomposeError> {
    Ok(run_full_flow_recorded(scenario, path)?.pop().expect("final snapshot"))
}

/// [`run_full_flow`] keeping the states at the scenario's recorded steps.
pub fn run_full_flow_recorded(
    scenario: &Scenario,
    path: &NoisePath,
) -> Result<Vec<FlowAtlas>, DecomposeError> {
    check_path(scenario, path)?;
    let grid = scenario.grid()?;
    let run = track_points(&grid, &scenario.bounds, &scenario.fields, path, scenario.record_every, true);
    Ok(run.snapshots)
}

fn check_path(scenario: &Scenario, path: &NoisePath) -> Result<(), DecomposeError> {
    if path.noise_dim() != scenario.fields.noise_dim() {
        return Err(DecomposeError::Scenario(format!(
            "noise path has {} channels, fields need {}",
            path.noise_dim(),
            scenario.fields.noise_dim()
        )));
    }
    Ok(())
}

/// Fields projected onto the horizontal distribution along the vertical one,
/// at the identity.
struct ProjectedFields<'a> {
    fields: &'a VectorFieldSet,
    pair: &'a DistributionPair,
}

impl ProjectedFields<'_> {
    fn project(&self, i: usize, y: &DVector<f64>) -> Result<DVector<f64>, EvalDomainError> {
        let x = self.fields.eval(i, y.as_slice())?;
        let frame = MixedFrame::new(
            self.pair.horizontal_at(y.as_slice())?,
            self.pair.vertical_at(y.as_slice())?,
        )
        .map_err(|_| EvalDomainError::NonFinite("distribution frame"))?;
        let sol = solve_mixed(&frame, &x, 0.0)
            .map_err(|_| EvalDomainError::NonFinite("degenerate distribution frame"))?;
        Ok(sol.horizontal_part(&x))
    }
}

impl DrivingFields for ProjectedFields<'_> {
    fn dim(&self) -> usize {
        self.fields.dim()
    }

    fn channels(&self) -> usize {
        self.fields.noise_dim() + 1
    }

    fn value(&self, i: usize, y: &DVector<f64>) -> Result<DVector<f64>, EvalDomainError> {
        self.project(i, y)
    }

    fn jacobian(&self, i: usize, y: &DVector<f64>) -> Result<DMatrix<f64>, EvalDomainError> {
        let n = y.len();
        let mut out = DMatrix::zeros(n, n);
        for d in 0..n {
            let eps = 1e-6 * (1.0 + y[d].abs());
            let mut plus = y.clone();
            let mut minus = y.clone();
            plus[d] += eps;
            minus[d] -= eps;
            let col = (self.project(i, &plus)? - self.project(i, &minus)?) / (2.0 * eps);
            out.set_column(d, &col);
        }
        Ok(out)
    }
}

/// Horizontal component by the plain projected SDE. Only meaningful when the
/// pair is invariant under the horizontal flow; Jacobians are filled in by
/// moving least squares at the end.
pub fn run_fastpath(scenario: &Scenario, path: &NoisePath) -> Result<FlowAtlas, DecomposeError> {
    Ok(run_fastpath_recorded(scenario, path)?.pop().expect("final snapshot"))
}

pub fn run_fastpath_recorded(
    scenario: &Scenario,
    path: &NoisePath,
) -> Result<Vec<FlowAtlas>, DecomposeError> {
    check_path(scenario, path)?;
    let grid = scenario.grid()?;
    let fields = ProjectedFields {
        fields: &scenario.fields,
        pair: scenario.pair()?,
    };
    let run = track_points(&grid, &scenario.bounds, &fields, path, scenario.record_every, false);
    if run.stopped_at.iter().all(|s| *s == Some(0)) {
        return Err(DecomposeError::AllStoppedAtStart);
    }
    let mut snaps = run.snapshots;
    for s in &mut snaps {
        s.refresh_jacobians_mls();
    }
    let _ = run.finals;
    Ok(snaps)
}

struct LiftContext<'a> {
    pair: &'a DistributionPair,
    fields: &'a VectorFieldSet,
    bounds: &'a BoxRegion,
    thresholds: Thresholds,
    seed_vertical: Vec<DMatrix<f64>>,
    stencil: Vec<Vec<(usize, f64)>>,
}

/// Predicted point, predicted Jacobian and corrected-field Jacobians.
type Predicted = (DVector<f64>, DMatrix<f64>, Vec<DMatrix<f64>>);

/// Corrected fields at one node state.
struct Lift {
    gap: f64,
    corrected: Vec<DVector<f64>>,
    correction: Vec<DVector<f64>>,
    dx: Vec<DMatrix<f64>>,
    horizontality: f64,
    /// Pushed vertical frame with its horizontal component removed.
    normal: DMatrix<f64>,
}

impl LiftContext<'_> {
    /// `reference` is the `normal` of an earlier state of the same node; a
    /// non-positive overlap with it means the split degenerated in between.
    fn lift(
        &self,
        a: usize,
        y: &DVector<f64>,
        j: &DMatrix<f64>,
        reference: Option<&DMatrix<f64>>,
    ) -> Result<Lift, StopReason> {
        let h = self.pair.horizontal_at(y.as_slice()).map_err(eval_stop)?;
        let w = j * &self.seed_vertical[a];
        let q = h.clone().qr().q();
        let normal = &w - &q * (q.transpose() * &w);
        let frame = MixedFrame::new(h, w).map_err(|e| StopReason::EvalError {
            message: e.to_string(),
        })?;
        let gap = transversality_gap(&frame).map_err(|_| StopReason::TransversalityLost { gap: 0.0 })?;
        if gap <= self.thresholds.gap {
            return Err(StopReason::TransversalityLost { gap });
        }
        if let Some(r) = reference {
            if !((r.transpose() * &normal).determinant() > 0.0) {
                return Err(StopReason::TransversalityLost { gap });
            }
        }
        let channels = self.fields.noise_dim() + 1;
        let mut values = Vec::with_capacity(channels);
        let mut dx = Vec::with_capacity(channels);
        for i in 0..channels {
            values.push(self.fields.eval(i, y.as_slice()).map_err(eval_stop)?);
            dx.push(self.fields.eval_jacobian(i, y.as_slice()).map_err(eval_stop)?);
        }
        let sols = solve_mixed_many(&frame, &values, self.thresholds.gap)
            .map_err(|_| StopReason::TransversalityLost { gap })?;
        let correction: Vec<_> = sols.into_iter().map(|s| s.vertical).collect();
        let corrected: Vec<_> = values.iter().zip(&correction).map(|(x, v)| x - v).collect();
        // independent check of horizontality through an LU solve
        let lu = frame.combined().lu();
        let k = frame.rank_horizontal();
        let mut horizontality = 0.0f64;
        for c in &corrected {
            if let Some(coef) = lu.solve(c) {
                for b in coef.rows(k, coef.len() - k).iter() {
                    horizontality = horizontality.max(b.abs());
                }
            }
        }
        Ok(Lift {
            gap,
            corrected,
            correction,
            dx,
            horizontality,
            normal,
        })
    }

    /// Spatial Jacobians of the corrected fields: symbolic `DX_i` minus a
    /// moving-least-squares fit of the per-node corrections.
    fn corrected_jacobians(
        &self,
        a: usize,
        positions: &[DVector<f64>],
        lifts: &[Option<Lift>],
    ) -> Result<Vec<DMatrix<f64>>, StopReason> {
        let me = lifts[a].as_ref().expect("live node");
        let n = positions[a].len();
        let channels = me.correction.len();
        let stacked = |l: &Lift| {
            DVector::from_iterator(n * channels, l.correction.iter().flat_map(|v| v.iter().copied()))
        };
        let center = stacked(me);
        let samples: Vec<_> = self.stencil[a]
            .iter()
            .filter_map(|&(b, w)| {
                let other = lifts[b].as_ref()?;
                Some((&positions[b] - &positions[a], stacked(other) - &center, w))
            })
            .collect();
        let grad = mls_fit(n, &samples).ok_or(StopReason::RankDeficientStencil)?;
        Ok((0..channels)
            .map(|i| &me.dx[i] - grad.rows(i * n, n))
            .collect())
    }
}

fn affine_fit_or_nan(atlas: &FlowAtlas) -> LinearFit {
    let n = atlas.dim();
    let (matrix, offset) = atlas
        .affine_fit()
        .unwrap_or_else(|| (DMatrix::from_element(n, n, f64::NAN), DVector::from_element(n, f64::NAN)));
    LinearFit {
        t: atlas.time(),
        matrix,
        offset,
    }
}

/// Oblique split of a displacement in `[h_frame(m) | v_frame(m)]` at the
/// midpoint `m`; returns the norms of the horizontal and vertical parts.
fn split_displacement(pair: &DistributionPair, from: &DVector<f64>, to: &DVector<f64>) -> Option<(f64, f64)> {
    let d = to - from;
    let mid = (to + from) * 0.5;
    let frame = MixedFrame::new(
        pair.horizontal_at(mid.as_slice()).ok()?,
        pair.vertical_at(mid.as_slice()).ok()?,
    )
    .ok()?;
    let sol = solve_mixed(&frame, &d, 0.0).ok()?;
    Some((sol.horizontal_part(&d).norm(), sol.vertical.norm()))
}

fn psi_atlas(xi: &FlowAtlas, phi: &FlowAtlas, points: &[Option<DVector<f64>>]) -> FlowAtlas {
    let mut psi = phi.clone();
    for a in 0..psi.len() {
        let built = points[a].as_ref().and_then(|p| {
            let dxi = xi.interpolate_jacobian(p.as_slice()).ok()?;
            let inv = dxi.try_inverse()?;
            Some((p.clone(), inv * phi.jacobian(a)))
        });
        match built {
            Some((p, j)) => psi.set_node(a, p, j),
            None => psi.invalidate(a),
        }
    }
    psi
}

/// Pairwise decomposition `phi = xi o psi` with `xi` generated by the
/// horizontally corrected fields and `psi = xi^{-1} o phi`.
pub fn run_pair_decomposition(
    scenario: &Scenario,
    path: &NoisePath,
) -> Result<DecompositionResult, DecomposeError> {
    check_path(scenario, path)?;
    let pair = scenario.pair()?;
    if pair.is_full() {
        return Err(DecomposeError::Scenario("pair has no vertical directions".into()));
    }
    let grid = scenario.grid()?;
    let n = grid.dim();
    let len = grid.len();
    let seeds = grid.seeds();
    let seed_vertical = seeds
        .iter()
        .map(|s| pair.vertical_at(s.as_slice()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(DistributionError::from)?;
    let stencil = (0..len)
        .map(|a| {
            grid.neighbors(a)
                .into_iter()
                .map(|b| (b, stencil_weight(&grid, a, b)))
                .collect()
        })
        .collect();
    let ctx = LiftContext {
        pair,
        fields: &scenario.fields,
        bounds: &scenario.bounds,
        thresholds: scenario.thresholds,
        seed_vertical,
        stencil,
    };
    let horizon = path.steps();
    let h = path.step_size();
    let rec = record_steps(horizon, scenario.record_every);
    let mut next_rec = 0;

    let mut ys = seeds.clone();
    let mut js = vec![DMatrix::<f64>::identity(n, n); len];
    let mut alive = vec![true; len];
    let mut tau = vec![horizon; len];
    let mut stops: Vec<Option<StopReason>> = vec![None; len];
    let mut last_normal: Vec<Option<DMatrix<f64>>> = vec![None; len];

    let mut phi = FlowAtlas::identity(grid.clone());
    let mut psi_points: Vec<Option<DVector<f64>>> = seeds.iter().cloned().map(Some).collect();

    let mut gap_history = Vec::with_capacity(horizon);
    let mut xi_fits = Vec::with_capacity(horizon + 1);
    let mut composition = ResidualMeter::new(ResidualKind::Composition);
    let mut verticality = ResidualMeter::new(ResidualKind::HorizontalTangency);
    let mut tangency = ResidualMeter::new(ResidualKind::VerticalTangency);
    let mut horizontality_max = 0.0f64;
    let mut snapshots = Vec::with_capacity(rec.len());

    let xi_atlas = |ys: &[DVector<f64>], js: &[DMatrix<f64>], alive: &[bool], t: f64| {
        let mut at = FlowAtlas::identity(grid.clone());
        at.set_time(t);
        for a in 0..len {
            at.set_node(a, ys[a].clone(), js[a].clone());
            if !alive[a] {
                at.invalidate(a);
            }
        }
        at
    };

    let mut xi = xi_atlas(&ys, &js, &alive, 0.0);
    xi_fits.push(affine_fit_or_nan(&xi));

    for s in 0..=horizon {
        if next_rec < rec.len() && rec[next_rec] == s {
            let psi = if scenario.track_psi {
                psi_atlas(&xi, &phi, &psi_points)
            } else {
                compose_inverse(&xi, &phi)
            };
            snapshots.push(Snapshot {
                step: s,
                phi: phi.clone(),
                xi: xi.clone(),
                psi,
            });
            next_rec += 1;
        }
        if s == horizon {
            break;
        }
        let dw = path.increments(s);

        // phase A: corrected fields at the current state
        let eval_a: Vec<Option<Result<Lift, StopReason>>> = (0..len)
            .into_par_iter()
            .map(|a| alive[a].then(|| ctx.lift(a, &ys[a], &js[a], last_normal[a].as_ref())))
            .collect();
        let gap_min = eval_a
            .iter()
            .filter_map(|e| match e {
                Some(Ok(l)) => Some(l.gap),
                Some(Err(StopReason::TransversalityLost { gap })) => Some(*gap),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min);
        gap_history.push(gap_min);
        let mut failed: Vec<Option<StopReason>> = vec![None; len];
        let lifts_a: Vec<Option<Lift>> = eval_a
            .into_iter()
            .enumerate()
            .map(|(a, e)| match e {
                Some(Ok(l)) => Some(l),
                Some(Err(r)) => {
                    failed[a] = Some(r);
                    None
                }
                None => None,
            })
            .collect();
        for (a, l) in lifts_a.iter().enumerate() {
            if let Some(l) = l {
                horizontality_max = horizontality_max.max(l.horizontality);
                last_normal[a] = Some(l.normal.clone());
            }
        }

        // phase B: Jacobians of the corrected fields and the predictor
        let pred: Vec<Option<Result<Predicted, StopReason>>> = (0..len)
            .into_par_iter()
            .map(|a| {
                let l = lifts_a[a].as_ref()?;
                Some((|| {
                    let dxt = ctx.corrected_jacobians(a, &ys, &lifts_a)?;
                    let growth: f64 = dxt.iter().zip(dw.iter()).map(|(m, w)| w.abs() * m.norm()).sum();
                    if !(growth <= ctx.thresholds.explosion) {
                        return Err(StopReason::Explosion { growth });
                    }
                    let yp = euler_predict(&ys[a], &l.corrected, &dw);
                    let jp = jacobian_predict(&js[a], &dxt, &dw);
                    Ok((yp, jp, dxt))
                })())
            })
            .collect();
        let mut preds: Vec<Option<Predicted>> = Vec::with_capacity(len);
        for (a, p) in pred.into_iter().enumerate() {
            preds.push(match p {
                Some(Ok(v)) => Some(v),
                Some(Err(r)) => {
                    failed[a] = Some(r);
                    None
                }
                None => None,
            });
        }

        // phase C: corrected fields at the predicted state
        let eval_c: Vec<Option<Result<Lift, StopReason>>> = (0..len)
            .into_par_iter()
            .map(|a| {
                preds[a]
                    .as_ref()
                    .map(|(yp, jp, _)| ctx.lift(a, yp, jp, lifts_a[a].as_ref().map(|l| &l.normal)))
            })
            .collect();
        let pred_pos: Vec<DVector<f64>> = (0..len)
            .map(|a| preds[a].as_ref().map_or_else(|| ys[a].clone(), |p| p.0.clone()))
            .collect();
        let lifts_c: Vec<Option<Lift>> = eval_c
            .into_iter()
            .enumerate()
            .map(|(a, e)| match e {
                Some(Ok(l)) => Some(l),
                Some(Err(r)) => {
                    failed[a] = Some(r);
                    None
                }
                None => None,
            })
            .collect();
        for l in lifts_c.iter().flatten() {
            horizontality_max = horizontality_max.max(l.horizontality);
        }

        // phase D: corrector
        let next: Vec<Option<Result<(DVector<f64>, DMatrix<f64>), StopReason>>> = (0..len)
            .into_par_iter()
            .map(|a| {
                let lc = lifts_c[a].as_ref()?;
                let la = lifts_a[a].as_ref().expect("predicted nodes have a start lift");
                let (_, jp, dxt) = preds[a].as_ref().expect("lifted nodes have a prediction");
                Some((|| {
                    let dxt_p = ctx.corrected_jacobians(a, &pred_pos, &lifts_c)?;
                    let y = heun_average(&ys[a], &la.corrected, &lc.corrected, &dw);
                    if !y.iter().all(|v| v.is_finite()) {
                        return Err(StopReason::EvalError {
                            message: "non-finite state".into(),
                        });
                    }
                    if !ctx.bounds.contains(y.as_slice()) {
                        return Err(StopReason::LeftRegion);
                    }
                    let j = jacobian_average(&js[a], jp, dxt, &dxt_p, &dw);
                    Ok((y, j))
                })())
            })
            .collect();

        let prev_ys = ys.clone();
        for (a, r) in next.into_iter().enumerate() {
            match r {
                Some(Ok((y, j))) => {
                    ys[a] = y;
                    js[a] = j;
                }
                Some(Err(reason)) => failed[a] = Some(reason),
                None => {}
            }
        }
        for a in 0..len {
            if let Some(reason) = failed[a].take() {
                if alive[a] {
                    alive[a] = false;
                    tau[a] = s;
                    stops[a] = Some(reason);
                }
            }
        }
        if s == 0 && !alive.iter().any(|v| *v) {
            return Err(DecomposeError::AllStoppedAtStart);
        }

        // full flow, node-wise
        let phi_next: Vec<Option<(DVector<f64>, DMatrix<f64>)>> = (0..len)
            .into_par_iter()
            .map(|a| {
                if !phi.is_valid(a) {
                    return None;
                }
                heun_step_jacobian(&scenario.fields, phi.image(a), phi.jacobian(a), &dw, Some(&scenario.bounds))
                    .ok()
                    .filter(|(y, _)| y.iter().all(|v| v.is_finite()))
            })
            .collect();
        for (a, r) in phi_next.into_iter().enumerate() {
            match r {
                Some((y, j)) => phi.set_node(a, y, j),
                None => phi.invalidate(a),
            }
        }
        let t = (s + 1) as f64 * h;
        phi.set_time(t);

        let step_leak: Vec<(usize, f64)> = (0..len)
            .filter(|&a| alive[a])
            .filter_map(|a| split_displacement(pair, &prev_ys[a], &ys[a]).map(|(_, v)| (a, v)))
            .collect();
        tangency.record_step(s, step_leak);

        xi = xi_atlas(&ys, &js, &alive, t);
        xi_fits.push(affine_fit_or_nan(&xi));

        if scenario.track_psi {
            let new_psi: Vec<Option<DVector<f64>>> = (0..len)
                .into_par_iter()
                .map(|a| {
                    if !phi.is_valid(a) {
                        return None;
                    }
                    let guess = psi_points[a].clone().unwrap_or_else(|| seeds[a].clone());
                    xi.invert_from(phi.image(a).as_slice(), &guess)
                        .or_else(|_| xi.invert(phi.image(a).as_slice()))
                        .ok()
                })
                .collect();
            let comp: Vec<(usize, f64)> = (0..len)
                .filter_map(|a| {
                    let p = new_psi[a].as_ref()?;
                    let back = xi.evaluate(p.as_slice()).ok()?;
                    Some((a, (back - phi.image(a)).norm()))
                })
                .collect();
            composition.record_step(s + 1, comp);
            let leak: Vec<(usize, f64)> = (0..len)
                .filter_map(|a| {
                    let (p0, p1) = (psi_points[a].as_ref()?, new_psi[a].as_ref()?);
                    split_displacement(pair, p0, p1).map(|(hpart, _)| (a, hpart))
                })
                .collect();
            verticality.record_step(s, leak);
            psi_points = new_psi;
        }
    }

    let last = snapshots.last().expect("final snapshot").clone();
    Ok(DecompositionResult {
        phi: last.phi,
        xi: last.xi,
        psi: last.psi,
        snapshots,
        tau,
        stops,
        horizon,
        h,
        gap_history,
        xi_fits,
        composition: composition.finish(),
        verticality: verticality.finish(),
        tangency: tangency.finish(),
        horizontality_max,
    })
}

/// Output of the cascade engine.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub phi: FlowAtlas,
    /// Horizontal components of the successive pairs; the last is `phi`
    /// itself when the flag is maximal.
    pub partials: Vec<FlowAtlas>,
    /// `xi^1, ..., xi^k` on the seed grid.
    pub factors: Vec<FlowAtlas>,
    /// Remainder `(partial_k)^{-1} o phi`.
    pub remainder: FlowAtlas,
    /// Per-node minimum of the stage stopping steps.
    pub tau: Vec<usize>,
    pub stage_tau_min: Vec<usize>,
    pub horizon: usize,
    pub stages: Vec<DecompositionResult>,
}

impl CascadeResult {
    pub fn tau_min(&self) -> usize {
        self.tau.iter().copied().min().unwrap_or(0)
    }

    pub fn tau_median(&self) -> usize {
        median(&self.tau)
    }
}

/// Runs the pairwise engine on every stage of a flag sequence with the same
/// noise path and peels off the successive factors.
pub fn run_cascade(scenario: &Scenario, path: &NoisePath) -> Result<CascadeResult, DecomposeError> {
    check_path(scenario, path)?;
    let flags = scenario.flags()?;
    let horizon = path.steps();
    let phi = run_full_flow(scenario, path)?;
    let mut partials = Vec::with_capacity(flags.len());
    let mut stages = Vec::new();
    let mut tau = vec![horizon; phi.len()];
    let mut stage_tau_min = Vec::new();
    for (i, pair) in flags.pairs().iter().enumerate() {
        if pair.is_full() {
            partials.push(phi.clone());
            stage_tau_min.push(horizon);
            continue;
        }
        let mut stage = scenario.clone().with_pair(pair.clone());
        stage.track_psi = false;
        stage.record_every = 0;
        let res = match run_pair_decomposition(&stage, path) {
            Ok(r) => r,
            Err(DecomposeError::AllStoppedAtStart) => return Err(DecomposeError::StageFailed(i + 1)),
            Err(e) => return Err(e),
        };
        for (t, s) in tau.iter_mut().zip(&res.tau) {
            *t = (*t).min(*s);
        }
        stage_tau_min.push(res.tau_min());
        partials.push(res.xi.clone());
        stages.push(res);
    }
    let mut factors = Vec::with_capacity(partials.len());
    factors.push(partials[0].clone());
    for i in 1..partials.len() {
        factors.push(compose_inverse(&partials[i - 1], &partials[i]));
    }
    let remainder = compose_inverse(partials.last().expect("non-empty flag"), &phi);
    Ok(CascadeResult {
        phi,
        partials,
        factors,
        remainder,
        tau,
        stage_tau_min,
        horizon,
        stages,
    })
}

/// Coordinate-wise factorization `phi = xi^1 o ... o xi^n`, where `xi^k`
/// changes only coordinate `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateFactors {
    /// Factor atlases; factor `k` lives on a grid over the bounding box of
    /// the valid images of `P_k`.
    pub factors: Vec<FlowAtlas>,
    /// `P_0 = phi, ..., P_n = Id` on the seed grid of `phi`.
    pub partials: Vec<FlowAtlas>,
    /// Minimum over valid nodes of every trailing minor (entry 0 is `det J`).
    pub minors_min: Vec<f64>,
    /// Factor Jacobians at the images of the base point, by the chain rule.
    pub base_jacobians: Vec<DMatrix<f64>>,
}

/// `P_k`: first `k` coordinates of the seed, the rest from `phi`.
fn partial_map(phi: &FlowAtlas, k: usize) -> FlowAtlas {
    let n = phi.dim();
    let mut out = phi.clone();
    for a in 0..phi.len() {
        let seed = phi.seed(a);
        let mut y = phi.image(a).clone();
        let mut j = phi.jacobian(a).clone();
        for d in 0..k {
            y[d] = seed[d];
            for c in 0..n {
                j[(d, c)] = if c == d { 1.0 } else { 0.0 };
            }
        }
        out.set_node(a, y, j);
    }
    out
}

pub fn coordinate_factorize(
    phi: &FlowAtlas,
    base_point: &DVector<f64>,
    minor_threshold: f64,
) -> Result<CoordinateFactors, DecomposeError> {
    let n = phi.dim();
    let mut minors_min = vec![f64::INFINITY; n];
    let mut first_failure = None;
    for a in phi.valid_nodes() {
        let jac = phi.mls_jacobian(a).unwrap_or_else(|_| phi.jacobian(a).clone());
        let scale = jac.abs().max().max(1e-300);
        for (i, m) in trailing_minors(&jac).into_iter().enumerate() {
            minors_min[i] = minors_min[i].min(m);
            let size = (n - i) as i32;
            if m <= minor_threshold * scale.powi(size) && first_failure.is_none() {
                first_failure = Some((i + 1, a, m));
            }
        }
    }
    if let Some((index, node, value)) = first_failure {
        return Err(DecomposeError::MinorVanishes {
            index,
            node,
            value,
            minors_min,
        });
    }
    let partials: Vec<FlowAtlas> = (0..=n).map(|k| partial_map(phi, k)).collect();
    let resolution = phi.grid().resolution();
    let mut factors = Vec::with_capacity(n);
    for k in 1..=n {
        let (outer, inner) = (&partials[k - 1], &partials[k]);
        let bbox = BoxRegion::bounding(inner.valid_nodes().map(|a| inner.image(a).clone()), n)
            .ok_or(AtlasError::OutsideImage)?;
        let grid = Grid::new(bbox, resolution)?;
        let seeds = grid.seeds();
        let nodes: Vec<Option<(DVector<f64>, DMatrix<f64>)>> = seeds
            .par_iter()
            .map(|z| {
                let x = inner.invert(z.as_slice()).ok()?;
                let value = outer.evaluate(x.as_slice()).ok()?;
                let mut y = z.clone();
                y[k - 1] = value[k - 1];
                let d_outer = outer.interpolate_jacobian(x.as_slice()).ok()?;
                let d_inner = inner.interpolate_jacobian(x.as_slice()).ok()?;
                Some((y, d_outer * d_inner.try_inverse()?))
            })
            .collect();
        let mut factor = FlowAtlas::identity(grid);
        factor.set_time(phi.time());
        let inside: Vec<usize> = (0..nodes.len()).filter(|&a| nodes[a].is_some()).collect();
        if inside.is_empty() {
            return Err(AtlasError::OutsideImage.into());
        }
        // nodes of the bounding box outside the image get a first-order
        // extension from the nearest inside node, so that cells straddling
        // the image edge still interpolate
        let mut filled = Vec::with_capacity(nodes.len());
        for (a, node) in nodes.iter().enumerate() {
            filled.push(match node {
                Some(v) => v.clone(),
                None => {
                    let z = &seeds[a];
                    let b = *inside
                        .iter()
                        .min_by(|&&p, &&q| {
                            (&seeds[p] - z).norm_squared().total_cmp(&(&seeds[q] - z).norm_squared())
                        })
                        .expect("non-empty");
                    let (yb, jb) = nodes[b].as_ref().expect("inside node");
                    let mut y = z.clone();
                    y[k - 1] = yb[k - 1] + (jb.row(k - 1) * (z - &seeds[b]))[0];
                    (y, jb.clone())
                }
            });
        }
        for (a, (y, j)) in filled.into_iter().enumerate() {
            factor.set_node(a, y, j);
        }
        factors.push(factor);
    }
    let base_jacobians = (1..=n)
        .map(|k| {
            let outer = partials[k - 1].interpolate_jacobian(base_point.as_slice())?;
            let inner = partials[k].interpolate_jacobian(base_point.as_slice())?;
            let inv = inner.try_inverse().ok_or(AtlasError::OutsideImage)?;
            Ok(outer * inv)
        })
        .collect::<Result<Vec<_>, AtlasError>>()?;
    Ok(CoordinateFactors {
        factors,
        partials,
        minors_min,
        base_jacobians,
    })
}

/// `factors[0] o ... o factors[last]` on the seeds of `grid`.
pub fn telescope(factors: &[FlowAtlas], grid: &Grid) -> FlowAtlas {
    let mut acc = FlowAtlas::identity(grid.clone());
    for f in factors.iter().rev() {
        acc = compose(f, &acc);
    }
    acc
}
