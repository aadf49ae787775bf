//! Label-space data model and the non-neural half of the change-data pipeline.
//!
//! Everything in this crate is a pure function of its inputs and an explicit
//! seed: mask algebra, change-event simulation, scalar noise schedules,
//! procedural scene synthesis, dataset serialization and binary change metrics.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod events;
pub mod grid;
pub mod image;
pub mod metrics;
pub mod naming;
pub mod procedural;
pub mod rng;
pub mod scene;
pub mod schedule;

pub use error::{Error, Result};
pub use events::{
    simulate_contour_remove, simulate_create, simulate_edit, simulate_event, simulate_remove,
    simulate_sequence, Condition, EventAction, EventKind, EventOutcome, EventSpec, LogEntry,
    TransitionMatrix,
};
pub use grid::{BinaryGrid, Grid};
pub use image::RgbImage;
pub use metrics::{compute_metrics, BinaryChangeMetrics, ChangeCounts};
pub use naming::{name_dataset, parse_dataset_name};
pub use scene::{
    change_mask_of, connected_components, dilate, extract_contours, instance_support, ChangeMask,
    Connectivity, ContourMap, InstanceMap, SemanticMask,
};
pub use schedule::{make_sampling_steps, NoiseSchedule, ScheduleConfig, ScheduleKind};
