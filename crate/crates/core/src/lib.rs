//! Federated training of segmentation models under several communication
//! workflows, with modeled runtime and energy accounting.

pub mod accounting;
pub mod aggregate;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod params;
pub mod seed;
pub mod transport;
pub mod workflows;

pub use accounting::{compare_totals, Comparison, PowerModel, RunLedger, Totals};
pub use aggregate::{AggregatorConfig, Algorithm, BufferPolicy};
pub use data::{ClassManifest, SynthImage};
pub use experiment::{BenchMatrix, ExperimentConfig, ExperimentError};
pub use metrics::{ConfusionMatrix, MetricReport};
pub use models::{ClientUpdate, Model, ModelSpec, Normalization, SegNet, TrainConfig};
pub use params::{ParameterSet, ParamsError, Tensor, TensorKind};
pub use transport::{Envelope, MsgType, TransportError};
pub use workflows::{RunOutput, WorkflowConfig, WorkflowError, WorkflowKind};
