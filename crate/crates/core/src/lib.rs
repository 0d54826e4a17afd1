//! Pattern-based dual-timescale spectrum and time allocation for small
//! clusters of access points, with an interactive-queue simulator to check
//! the analytic delay predictions.

pub mod allocation;
pub mod allocators;
pub mod convex;
pub mod corpus;
pub mod error;
pub mod pattern;
pub mod queueing;
pub mod report;
pub mod scenario;
pub mod sched;
pub mod sim;

pub use allocation::{Allocation, AllocationFile};
pub use allocators::{AllocatorOptions, Method, Solution, SolveTrace, Start};
pub use error::{Error, Result};
pub use pattern::Pattern;
pub use queueing::{RateTable, UtilState};
pub use report::DelayReport;
pub use scenario::{Association, EffTable, Scenario};
pub use sched::Kernel;
