//! Decomposition of stochastic flows of diffeomorphisms into a flow that
//! respects a chosen distribution and a remainder tangent to a complementary one.

pub mod atlas;
pub mod decompose;
pub mod distributions;
pub mod fieldlang;
pub mod frames;
pub mod noise;
pub mod verify;
pub mod cli;

pub use atlas::{BoxRegion, FlowAtlas, Grid};
pub use decompose::{
    coordinate_factorize, run_cascade, run_fastpath, run_full_flow, run_pair_decomposition, DecomposeError,
    DecompositionResult, Scenario, Thresholds,
};
pub use distributions::{DistributionPair, FlagSequence};
pub use fieldlang::{VectorField, VectorFieldSet};
pub use noise::{generate_path, NoisePath};
