//! Runtime integrity measurement simulator.
//!
//! The crate models a measurement pipeline in which integrity Checks over a
//! monitored node's registers, MSRs, and kernel memory are decomposed into
//! time-budgeted Tasks, packed into latency-bounded Bins, and executed by an
//! SMM-resident Inspector against a simulated node, with every latency charged
//! to a deterministic simulated clock.
//!
//! Module map:
//! - [`model`]: Check/Task/Bin/Result data model and result merging.
//! - [`codec`]: canonical little-endian encoding used for signatures and wire
//!   payloads (see `docs/PROTOCOL.md`).
//! - [`perf`]: the SMI latency cost model, work budgets, and decomposition
//!   trade-off tables.
//! - [`scheduler`]: cost calibration, Check decomposition, per-node priority
//!   queues with aging, and the knapsack bin packer.
//! - [`envelope`]: sign/MAC/encrypt envelope and framed wire protocol.
//! - [`node`]: the simulated monitored node (physical memory, page tables,
//!   save-state map, SMI mechanics, attack injection).
//! - [`inspector`]: the SMM measurement agent.
//! - [`backend`]: per-node orchestration (golden store, dispatch, merging,
//!   alerts).
//! - [`diagnosis`]: threat-level policy and cross-node priority boosts.
//! - [`scenario`]: deterministic scenario execution on the simulated clock.
//! - [`report`]: results-log analysis.

pub mod backend;
pub mod codec;
pub mod diagnosis;
pub mod envelope;
pub mod inspector;
pub mod model;
pub mod node;
pub mod perf;
pub mod report;
pub mod scenario;
pub mod scheduler;
pub mod sysmap;

pub mod cli;

pub use model::{Bin, Check, CheckResult, CommandKind, RegisterName, Task, TaskResult};
pub use perf::CostModel;
