//! Loosely coupled EKF over (x, y, θ) with windowed, order-insensitive ingestion.

pub mod ekf;
pub mod filter;
pub mod stack;

pub use ekf::{FusedEstimate, GateDecision, UpdateOutcome};
pub use filter::{write_estimate_stream, EstimateRecord, FusionCounters, FusionFilter, FusionParams, FusionSnapshot, Measurement, SharedFilter, Source};
pub use stack::{LocalizationStack, MclOnly, MclRunner, OdometryOnly, SloVlpOnly, StackConfig, StackCounters, StackInit, StepReport};
