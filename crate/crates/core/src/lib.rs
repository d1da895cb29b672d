//! Cost-model-driven scheduling of MoE inference across one GPU and a
//! host CPU.
//!
//! The crate evaluates per-layer latency of a placement of attention and
//! expert work under a roofline model, searches for the fastest feasible
//! placement, picks statically resident experts from routing traces, and
//! replays a plan on a discrete-event simulator that overlaps transfers
//! with compute.

pub mod config;
pub mod costmodel;
pub mod eas;
pub mod error;
pub mod hwmodel;
pub mod planner;
pub mod sim;
pub mod workload;

pub use costmodel::{
    all_placements, throughput, AllocationStrategy, CostModel, CostOptions, ExpertMode,
    ExpertProfile, ExpertStage, LayerCost, MigrationPolicy, OpTimes, Placement, TotalLatency,
    VramBudget,
};
pub use error::{Error, Result};
pub use hwmodel::{
    classify_bound, roofline_time, transfer_time, Bound, Device, DeviceSpec, LinkSpec, SystemSpec,
};
pub use planner::{
    brute_force_plan, enumerate_strategies, plan, sweep_microbatch, Constraints, Plan, PlanRequest,
    Prediction, RestPolicy, SweepRow, SweepSpec,
};
pub use workload::{BatchConfig, ModelConfig, Op, OpCost, Phase, PhaseKind};
