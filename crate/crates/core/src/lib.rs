//! Parallel multi-path feed-forward networks for wide tabular data.
//!
//! The input columns are split into groups, each group runs through its own
//! small feed-forward pathway, the pathway outputs are concatenated and a
//! shared head produces the prediction. Everything is plain `f64` with
//! hand-written backpropagation; a monolithic FFNN and a 1D CNN are built
//! from the same config schema as baselines.
//!
//! ```
//! use pmffnn::{ArchConfig, Mode, ModelGraph, Matrix};
//!
//! let cfg = ArchConfig::pmffnn(12, 3, 4);
//! let mut model = ModelGraph::build(&cfg, 7).unwrap();
//! let x = Matrix::zeros(5, 12);
//! let y = model.forward(&x, Mode::Inference).unwrap();
//! assert_eq!(y.shape(), (5, 4));
//! ```

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod model_file;
pub mod streams;
pub mod tensor;
pub mod training;

pub use data::{DatasetTable, StandardizeStats, SynthParams, Targets};
pub use error::{DataError, Error, Result};
pub use layers::{Activation, Layer, LayerSpec, Mode, Param};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{ArchConfig, ColumnGroups, GroupsConfig, ModelGraph, ModelKind, ParamBreakdown, PathwaySpec, Task};
pub use tensor::{Matrix, Rng};
pub use training::{fit, FitReport, Loss, OptimizerConfig, TrainConfig};
