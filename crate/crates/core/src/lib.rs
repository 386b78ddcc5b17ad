//! LSTM and GRU forecasting of univariate time series, written from scratch:
//! gated cells with hand-derived backpropagation through time, Adam,
//! sliding-window data preparation, RMSE / directional-accuracy evaluation
//! against a persistence baseline, and Mann-Whitney model comparison.
//!
//! Data-parallel loops run on rayon when the `parallel` feature (default) is
//! enabled; results are bit-identical either way.

pub mod cells;
pub mod checkpoint;
pub mod dataprep;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod numerics;
pub mod par;
pub mod training;

pub use cells::{CellKind, Network};
pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use par::Execution;
