//! Sparse dynamics identification for model-based reinforcement learning.
//!
//! A handful of expert transitions is enough to fit a sparse discrete-time
//! model of the environment; policies are then trained inside that model and
//! evaluated in the real simulator.
//!
//! The numerical core (`features`, `stlsq`, `metrics` error measures) is
//! generic over [`scalar::Real`]; environments, models and training run in
//! `f64`.

pub mod collect;
pub mod envs;
pub mod features;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rl;
pub mod scalar;
pub mod sindy;
pub mod stlsq;
pub mod surrogate;

pub use envs::{Action, Benchmark, Controller, Environment, RealEnv};
pub use features::LibrarySpec;
pub use pipeline::{run_pipeline, PipelineConfig};
pub use rl::{CemConfig, Policy};
pub use scalar::Real;
pub use sindy::{fit, GridSearchSpec, SindyModel, TargetMode};
pub use surrogate::SurrogateEnv;

pub type Mat64 = ndarray::Array2<f64>;
pub type Mat32 = ndarray::Array2<f32>;
pub type StlsqConfig64 = stlsq::StlsqConfig<f64>;
pub type StlsqConfig32 = stlsq::StlsqConfig<f32>;
pub type SparseSolution64 = stlsq::SparseSolution<f64>;
pub type SparseSolution32 = stlsq::SparseSolution<f32>;
pub type NormStats64 = features::NormStats<f64>;
pub type NormStats32 = features::NormStats<f32>;
