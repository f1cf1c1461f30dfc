//! Calibration of the hidden propagation matrices from end-to-end pilots.

pub mod codebook;
pub mod gradient;
pub mod monitor;
pub mod objective;

pub use codebook::{codebook_search, Codebook, CodebookResult, LayerGrid};
pub use gradient::{
    matrix_names, run_gradient_stage, run_gradient_stage_with, run_multistage, CalibrationTrace, DescentDirection,
    GradientSettings, PilotSource, SimulatedPilots, StageMode, StageOutcome, StagePlan, StageRecord,
};
pub use monitor::{state_driven_monitor, MonitorLog, MonitorSettings, SimulatedStream, SlotStream, TriggerEvent};
pub use objective::{nmse_db, pilot_loss, pilot_loss_gradient, PilotObjective, SetGradient, SlotBatch, NMSE_FLOOR_DB};
