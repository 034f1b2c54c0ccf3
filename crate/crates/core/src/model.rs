//! Core data model: Checks, Tasks, Bins, and measurement results.
//!
//! A `Check` is the administrator-level description of one integrity
//! measurement. The scheduler decomposes it into `Task`s, the bin packer
//! batches Tasks into `Bin`s (one Bin per SMI session), and the Inspector
//! answers with `TaskResult`s that the backend merges into a `CheckResult`.
//!
//! All types here are immutable value objects once constructed and can be
//! shared freely between concurrent contexts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unique identifier of a Check.
pub type CheckId = u64;
/// Unique identifier of a monitored node.
pub type NodeId = u64;
/// Sequence number of a Task within its parent Check.
pub type TaskSeq = u32;
/// SHA-256 digest.
pub type Digest = [u8; 32];
/// 128-bit liveness nonce.
pub type Nonce = u128;
/// Simulated time / durations, in microseconds.
pub type Micros = f64;

/// CPU registers that can be named by a `Register` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegisterName {
    #[serde(rename = "CR0")]
    Cr0,
    #[serde(rename = "CR3")]
    Cr3,
    #[serde(rename = "CR4")]
    Cr4,
    #[serde(rename = "IDTR")]
    Idtr,
    #[serde(rename = "GDTR")]
    Gdtr,
}

impl RegisterName {
    pub const ALL: [RegisterName; 5] = [
        RegisterName::Cr0,
        RegisterName::Cr3,
        RegisterName::Cr4,
        RegisterName::Idtr,
        RegisterName::Gdtr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegisterName::Cr0 => "CR0",
            RegisterName::Cr3 => "CR3",
            RegisterName::Cr4 => "CR4",
            RegisterName::Idtr => "IDTR",
            RegisterName::Gdtr => "GDTR",
        }
    }

    /// Stable one-byte tag used by the canonical encoding.
    pub fn code(&self) -> u8 {
        match self {
            RegisterName::Cr0 => 0,
            RegisterName::Cr3 => 1,
            RegisterName::Cr4 => 2,
            RegisterName::Idtr => 3,
            RegisterName::Gdtr => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        RegisterName::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for RegisterName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegisterName {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CR0" => Ok(RegisterName::Cr0),
            "CR3" => Ok(RegisterName::Cr3),
            "CR4" => Ok(RegisterName::Cr4),
            "IDTR" => Ok(RegisterName::Idtr),
            "GDTR" => Ok(RegisterName::Gdtr),
            _ => Err(ValidationError::UnknownRegister(s.to_string())),
        }
    }
}

/// The measurement a Check (and each of its Tasks) performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    /// Hash a named CPU register across all CPU threads.
    Register(RegisterName),
    /// Hash a virtual-address range, translated through the page tables.
    VirtMem { addr: u64, len: u64 },
    /// Hash a physical-address range directly.
    PhysMem { addr: u64, len: u64 },
    /// Hash the 64-bit value of one MSR.
    Msr { msr: u32 },
}

impl CommandKind {
    pub fn is_memory(&self) -> bool {
        matches!(self, CommandKind::VirtMem { .. } | CommandKind::PhysMem { .. })
    }

    /// Byte length measured by this command (0 for registers/MSRs).
    pub fn len_bytes(&self) -> u64 {
        match self {
            CommandKind::VirtMem { len, .. } | CommandKind::PhysMem { len, .. } => *len,
            _ => 0,
        }
    }

    pub fn start_addr(&self) -> u64 {
        match self {
            CommandKind::VirtMem { addr, .. } | CommandKind::PhysMem { addr, .. } => *addr,
            _ => 0,
        }
    }
}

/// Administrator-level description of one integrity measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: CheckId,
    pub command: CommandKind,
    /// Opaque command argument carried alongside the command.
    #[serde(default)]
    pub operand: Vec<u8>,
    /// Scheduling priority; higher is more urgent.
    pub priority: u32,
    /// Simulated time of the last completed measurement of this Check.
    /// Updated when a CheckResult is merged.
    #[serde(default)]
    pub last_inspection_time: Option<Micros>,
    /// Upper bound, in microseconds, on each decomposed Task's estimated cost.
    pub decomposition_target: Micros,
    /// Keyed tag over the canonical Check bytes, created by the policy layer.
    #[serde(default)]
    pub dm_signature: Digest,
}

impl Check {
    /// Knapsack value assigned to this Check's tasks: `priority + 1`, so that
    /// priority-0 tasks still carry positive value and can be packed.
    pub fn value(&self) -> u32 {
        self.priority.saturating_add(1)
    }
}

/// Per-task measurement command. Memory variants take their range from the
/// owning [`Task`]'s `address`/`length` fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCommand {
    Register(RegisterName),
    VirtMem,
    PhysMem,
    Msr(u32),
}

impl TaskCommand {
    pub fn of_check(cmd: &CommandKind) -> Self {
        match cmd {
            CommandKind::Register(r) => TaskCommand::Register(*r),
            CommandKind::VirtMem { .. } => TaskCommand::VirtMem,
            CommandKind::PhysMem { .. } => TaskCommand::PhysMem,
            CommandKind::Msr { msr } => TaskCommand::Msr(*msr),
        }
    }

    pub fn is_memory(&self) -> bool {
        matches!(self, TaskCommand::VirtMem | TaskCommand::PhysMem)
    }
}

/// One unit of measurement work, produced by decomposing a Check.
///
/// Task identity is the `(check_id, task_seq)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub check_id: CheckId,
    pub task_seq: TaskSeq,
    pub command: TaskCommand,
    /// Start address of the measured range (memory commands only).
    pub address: u64,
    /// Length in bytes of the measured range (memory commands only).
    pub length: u64,
    /// Fresh liveness nonce assigned at enqueue time.
    pub nonce: Nonce,
    /// Golden digest to compare against; absent during provisioning.
    pub comparison_hash: Option<Digest>,
    /// Keyed tag over the canonical task bytes, created by the backend.
    pub bem_signature: Digest,
    /// Estimated in-SMM cost of this task, microseconds.
    pub est_cost: Micros,
    /// Knapsack value (parent priority + 1).
    pub value: u32,
}

impl Task {
    pub fn identity(&self) -> (CheckId, TaskSeq) {
        (self.check_id, self.task_seq)
    }
}

/// The batch of Tasks executed in one SMI session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub bin_id: u64,
    pub node_id: NodeId,
    pub tasks: Vec<Task>,
    /// Work budget this bin was packed against, microseconds.
    pub target_size: Micros,
    pub nonce: Nonce,
    pub created_at: Micros,
}

impl Bin {
    pub fn total_est_cost(&self) -> Micros {
        self.tasks.iter().map(|t| t.est_cost).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Why a task could not be measured. Distinct from a hash mismatch: an
/// unmeasurable provisioned region is suspicious in its own right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFault {
    /// Page walk hit a non-present entry at the given level (4 = PML4 .. 1 = PT).
    TranslationFault { level: u8 },
    /// MSR not present on the node.
    UnknownMsr,
    /// Physical range outside the node's memory.
    OutOfBounds,
    /// Task-level signature did not verify; task was not executed.
    BadTaskSignature,
}

impl TaskFault {
    pub fn code(&self) -> (u8, u8) {
        match self {
            TaskFault::TranslationFault { level } => (1, *level),
            TaskFault::UnknownMsr => (2, 0),
            TaskFault::OutOfBounds => (3, 0),
            TaskFault::BadTaskSignature => (4, 0),
        }
    }

    pub fn from_code(code: u8, arg: u8) -> Option<Self> {
        match code {
            1 => Some(TaskFault::TranslationFault { level: arg }),
            2 => Some(TaskFault::UnknownMsr),
            3 => Some(TaskFault::OutOfBounds),
            4 => Some(TaskFault::BadTaskSignature),
            _ => None,
        }
    }
}

/// The Inspector's answer for one Task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub check_id: CheckId,
    pub task_seq: TaskSeq,
    /// True iff the measured hash matched the comparison hash.
    pub result: bool,
    /// Set when the task could not be measured at all.
    pub fault: Option<TaskFault>,
    pub measured_hash: Digest,
    /// In-SMM time spent on the measurement itself, microseconds.
    pub measurement_cost: Micros,
    /// Keyed tag over the canonical result bytes, created by the Inspector.
    pub inspector_signature: Digest,
}

/// Merged verdict for a whole Check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: CheckId,
    pub result: bool,
    pub completed_at: Micros,
    pub failing_task_seqs: Vec<TaskSeq>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("memory region has zero length")]
    ZeroLengthRegion,
    #[error("memory region [{addr:#x}, +{len}) wraps the address space")]
    RegionWraps { addr: u64, len: u64 },
    #[error("unknown register name {0:?}")]
    UnknownRegister(String),
    #[error("decomposition target must be positive, got {0}")]
    NonPositiveTarget(Micros),
}

/// Validates every Check invariant.
pub fn validate_check(check: &Check) -> Result<(), ValidationError> {
    if !(check.decomposition_target > 0.0) {
        return Err(ValidationError::NonPositiveTarget(check.decomposition_target));
    }
    match check.command {
        CommandKind::VirtMem { addr, len } | CommandKind::PhysMem { addr, len } => {
            if len == 0 {
                return Err(ValidationError::ZeroLengthRegion);
            }
            if addr.checked_add(len).is_none() {
                return Err(ValidationError::RegionWraps { addr, len });
            }
        }
        CommandKind::Register(_) | CommandKind::Msr { .. } => {}
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MergeError {
    #[error("duplicate task result for ({check_id}, {task_seq})")]
    DuplicateResult { check_id: CheckId, task_seq: TaskSeq },
    #[error("result for ({check_id}, {task_seq}) does not belong to check {expected}")]
    ForeignResult { check_id: CheckId, task_seq: TaskSeq, expected: CheckId },
    #[error("result for unexpected task sequence {task_seq}")]
    UnexpectedSeq { task_seq: TaskSeq },
}

/// Outcome of merging task results for one Check.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeOutcome {
    /// Every expected task sequence has reported.
    Complete(CheckResult),
    /// Some task sequences are still outstanding.
    Incomplete { missing: BTreeSet<TaskSeq> },
}

/// Merges individual task results into a single Check result.
///
/// Returns [`MergeOutcome::Incomplete`] until every sequence in
/// `expected_seqs` has a result; the merged result is the AND over task
/// results and is independent of result order. A task that faulted counts as
/// failing.
pub fn merge_task_results(
    check_id: CheckId,
    results: &[TaskResult],
    expected_seqs: &BTreeSet<TaskSeq>,
    completed_at: Micros,
) -> Result<MergeOutcome, MergeError> {
    let mut seen: BTreeSet<TaskSeq> = BTreeSet::new();
    let mut failing: Vec<TaskSeq> = Vec::new();
    for r in results {
        if r.check_id != check_id {
            return Err(MergeError::ForeignResult {
                check_id: r.check_id,
                task_seq: r.task_seq,
                expected: check_id,
            });
        }
        if !expected_seqs.contains(&r.task_seq) {
            return Err(MergeError::UnexpectedSeq { task_seq: r.task_seq });
        }
        if !seen.insert(r.task_seq) {
            return Err(MergeError::DuplicateResult {
                check_id: r.check_id,
                task_seq: r.task_seq,
            });
        }
        if !r.result {
            failing.push(r.task_seq);
        }
    }
    let missing: BTreeSet<TaskSeq> = expected_seqs.difference(&seen).copied().collect();
    if !missing.is_empty() {
        return Ok(MergeOutcome::Incomplete { missing });
    }
    failing.sort_unstable();
    Ok(MergeOutcome::Complete(CheckResult {
        check_id,
        result: failing.is_empty(),
        completed_at,
        failing_task_seqs: failing,
    }))
}

/// Asserts that `tasks` tile the parent region `[start, start+len)` exactly:
/// contiguous in `task_seq` order, no gaps, no overlap.
pub fn verify_tiling(tasks: &[Task], start: u64, len: u64) -> bool {
    let mut cursor = start;
    for (i, t) in tasks.iter().enumerate() {
        if t.task_seq != i as TaskSeq || t.address != cursor || t.length == 0 {
            return false;
        }
        cursor = match cursor.checked_add(t.length) {
            Some(c) => c,
            None => return false,
        };
    }
    cursor == start.checked_add(len).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest(b: u8) -> Digest {
        [b; 32]
    }

    fn result(check_id: CheckId, seq: TaskSeq, ok: bool) -> TaskResult {
        TaskResult {
            check_id,
            task_seq: seq,
            result: ok,
            fault: None,
            measured_hash: digest(seq as u8),
            measurement_cost: 1.0,
            inspector_signature: digest(0xee),
        }
    }

    #[test]
    fn register_check_validates() {
        let check = Check {
            id: 1,
            command: CommandKind::Register(RegisterName::Cr4),
            operand: vec![],
            priority: 0,
            last_inspection_time: None,
            decomposition_target: 75.0,
            dm_signature: [0; 32],
        };
        assert_eq!(validate_check(&check), Ok(()));
    }

    #[test]
    fn zero_length_region_rejected() {
        let check = Check {
            id: 2,
            command: CommandKind::VirtMem { addr: 0x1000, len: 0 },
            operand: vec![],
            priority: 0,
            last_inspection_time: None,
            decomposition_target: 75.0,
            dm_signature: [0; 32],
        };
        assert_eq!(validate_check(&check), Err(ValidationError::ZeroLengthRegion));
    }

    #[test]
    fn unknown_register_name_rejected() {
        // Table 2 enumerates only CR0/CR3/CR4/IDTR/GDTR.
        let err = "DR7".parse::<RegisterName>().unwrap_err();
        assert_eq!(err, ValidationError::UnknownRegister("DR7".to_string()));
        assert!(serde_json::from_str::<CommandKind>(r#"{"register":"DR7"}"#).is_err());
        assert_eq!(
            serde_json::from_str::<CommandKind>(r#"{"register":"IDTR"}"#).unwrap(),
            CommandKind::Register(RegisterName::Idtr)
        );
    }

    #[test]
    fn zero_target_rejected() {
        let check = Check {
            id: 3,
            command: CommandKind::Register(RegisterName::Cr0),
            operand: vec![],
            priority: 1,
            last_inspection_time: None,
            decomposition_target: 0.0,
            dm_signature: [0; 32],
        };
        assert!(matches!(validate_check(&check), Err(ValidationError::NonPositiveTarget(_))));
    }

    #[test]
    fn merge_all_true() {
        let expected: BTreeSet<TaskSeq> = [0, 1].into_iter().collect();
        let out = merge_task_results(7, &[result(7, 0, true), result(7, 1, true)], &expected, 10.0)
            .unwrap();
        match out {
            MergeOutcome::Complete(cr) => {
                assert!(cr.result);
                assert!(cr.failing_task_seqs.is_empty());
                assert_eq!(cr.completed_at, 10.0);
            }
            other => panic!("expected complete, got {other:?}"),
        }
    }

    #[test]
    fn merge_one_false_reports_failing_seq() {
        let expected: BTreeSet<TaskSeq> = [0, 1].into_iter().collect();
        let out = merge_task_results(7, &[result(7, 0, false), result(7, 1, true)], &expected, 0.0)
            .unwrap();
        match out {
            MergeOutcome::Complete(cr) => {
                assert!(!cr.result);
                assert_eq!(cr.failing_task_seqs, vec![0]);
            }
            other => panic!("expected complete, got {other:?}"),
        }
    }

    #[test]
    fn merge_incomplete_until_all_present() {
        let expected: BTreeSet<TaskSeq> = [0, 1].into_iter().collect();
        let out = merge_task_results(7, &[result(7, 1, true)], &expected, 0.0).unwrap();
        assert_eq!(out, MergeOutcome::Incomplete { missing: [0].into_iter().collect() });
    }

    #[test]
    fn merge_duplicate_is_protocol_error() {
        let expected: BTreeSet<TaskSeq> = [0].into_iter().collect();
        let err =
            merge_task_results(7, &[result(7, 0, true), result(7, 0, true)], &expected, 0.0)
                .unwrap_err();
        assert_eq!(err, MergeError::DuplicateResult { check_id: 7, task_seq: 0 });
    }

    #[test]
    fn merge_is_order_independent() {
        let expected: BTreeSet<TaskSeq> = [0, 1, 2].into_iter().collect();
        let results =
            vec![result(9, 0, true), result(9, 1, false), result(9, 2, true)];
        let forward = merge_task_results(9, &results, &expected, 5.0).unwrap();
        let mut reversed = results.clone();
        reversed.reverse();
        let backward = merge_task_results(9, &reversed, &expected, 5.0).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn check_result_false_iff_some_task_false() {
        let expected: BTreeSet<TaskSeq> = (0..4).collect();
        for bad in 0..4u32 {
            let results: Vec<TaskResult> =
                (0..4).map(|s| result(3, s, s != bad)).collect();
            match merge_task_results(3, &results, &expected, 0.0).unwrap() {
                MergeOutcome::Complete(cr) => {
                    assert!(!cr.result);
                    assert_eq!(cr.failing_task_seqs, vec![bad]);
                }
                other => panic!("expected complete, got {other:?}"),
            }
        }
    }
}
