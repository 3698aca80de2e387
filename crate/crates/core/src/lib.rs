//! Adaptive energy management for a parallel hybrid powertrain.

pub mod agent;
pub mod cycle;
pub mod dpbench;
pub mod error;
pub mod harness;
pub mod markov;
pub mod powertrain;
pub mod transform;

pub use cycle::{DrivingCycle, Mode, ModePartition, MtfComponents, VehicleBodyParams};
pub use error::{Error, Result};
pub use markov::{ImnReport, QuantizerGrid, TransitionModel};
pub use powertrain::{ActionGrid, PolicyTrace, PowertrainParams, StepOutcome, VehicleState};
pub use transform::{TransformOptions, TransformResult, TransformTargets};
pub use agent::{AdaptConfig, LearningConfig, QTable, SourceLibrary, StateSpace, TransferWeights};
pub use dpbench::{DpOptions, DpSolution, Interpolation};
