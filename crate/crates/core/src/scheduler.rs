//! Check decomposition and bin scheduling.
//!
//! Decomposition turns one Check into Tasks whose estimated cost fits the
//! Check's decomposition target, using a per-node calibration fit (cost =
//! fixed overhead + rate * bytes). Scheduling maintains one priority queue
//! per monitored node and fills each Bin with an exact 0/1-knapsack over
//! microsecond-quantized task costs: maximize summed value subject to the
//! target bin size, where a task's value is its effective priority + 1.
//!
//! Effective priorities age: every `aging_interval` consecutive skipped bins
//! raise a pending task's effective priority by `aging_bump`, so low-priority
//! work cannot starve behind a stream of high-priority arrivals.

use std::collections::HashSet;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Bin, Check, CheckId, CommandKind, Micros, NodeId, Task, TaskCommand, TaskSeq,
};
use crate::perf::{CostModel, REGISTER_TASK_US};

/// Smallest memory granularity the decomposer will produce, bytes.
pub const MIN_CHUNK_BYTES: u64 = 512;

/// Per-node cost calibration: estimated in-SMM work for one task is
/// `fixed_task_overhead + hash_cost_per_byte * bytes` for memory tasks, and
/// `fixed_task_overhead + register/msr cost` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub node_id: NodeId,
    /// Microseconds per hashed byte.
    pub hash_cost_per_byte: Micros,
    /// Per-task non-measurement work (decrypt/eval/encrypt/copy shares).
    pub fixed_task_overhead: Micros,
    /// Register measurement cost, microseconds.
    pub register_task_cost: Micros,
    /// MSR measurement cost, microseconds.
    pub msr_task_cost: Micros,
}

impl CalibrationProfile {
    /// Profile matching a cost model exactly. Per-bin fixed envelope costs
    /// are folded into the per-task overhead, which over-estimates multi-task
    /// bins by a few microseconds under profiles where those costs are
    /// nonzero; estimates stay conservative with respect to the bin budget.
    pub fn from_cost_model(node_id: NodeId, model: &CostModel) -> Self {
        CalibrationProfile {
            node_id,
            hash_cost_per_byte: model.hash_rate,
            fixed_task_overhead: model.per_task_overhead() + model.bin_fixed_overhead(),
            register_task_cost: model.register_task_cost,
            msr_task_cost: model.msr_task_cost,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.hash_cost_per_byte > 0.0) {
            return Err(CalibrationError::NonPositiveRate(self.hash_cost_per_byte));
        }
        for v in [self.fixed_task_overhead, self.register_task_cost, self.msr_task_cost] {
            if !(v >= 0.0) {
                return Err(CalibrationError::NegativeCost(v));
            }
        }
        Ok(())
    }

    /// Estimated in-SMM work for one task.
    pub fn est_cost(&self, command: &TaskCommand, length: u64) -> Micros {
        let measurement = match command {
            TaskCommand::Register(_) => self.register_task_cost,
            TaskCommand::Msr(_) => self.msr_task_cost,
            TaskCommand::VirtMem | TaskCommand::PhysMem => {
                self.hash_cost_per_byte * length as f64
            }
        };
        self.fixed_task_overhead + measurement
    }

    /// Folds an observed measurement cost back into the profile by
    /// exponential smoothing.
    pub fn smooth_update(
        &mut self,
        command: &TaskCommand,
        length: u64,
        observed_measurement_cost: Micros,
        alpha: f64,
    ) {
        if !(observed_measurement_cost.is_finite() && observed_measurement_cost >= 0.0) {
            return;
        }
        match command {
            TaskCommand::Register(_) => {
                self.register_task_cost =
                    (1.0 - alpha) * self.register_task_cost + alpha * observed_measurement_cost;
            }
            TaskCommand::Msr(_) => {
                self.msr_task_cost =
                    (1.0 - alpha) * self.msr_task_cost + alpha * observed_measurement_cost;
            }
            TaskCommand::VirtMem | TaskCommand::PhysMem => {
                if length > 0 {
                    let observed_rate = observed_measurement_cost / length as f64;
                    self.hash_cost_per_byte =
                        (1.0 - alpha) * self.hash_cost_per_byte + alpha * observed_rate;
                }
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("need at least two points with distinct byte sizes")]
    DegeneratePoints,
    #[error("fitted rate {0} us/byte is not positive")]
    NonPositiveRate(Micros),
    #[error("cost {0} must be non-negative")]
    NegativeCost(Micros),
}

/// Least-squares linear fit of per-task work against hashed bytes:
/// `us = fixed + rate * bytes`.
///
/// A perfect through-origin line fits with zero overhead, so the intercept is
/// clamped at zero rather than rejected; register and MSR costs are seeded
/// with the platform default and refined from measured register bins.
pub fn calibrate(node_id: NodeId, points: &[(u64, Micros)]) -> Result<CalibrationProfile, CalibrationError> {
    let distinct: HashSet<u64> = points.iter().map(|&(b, _)| b).collect();
    if points.len() < 2 || distinct.len() < 2 {
        return Err(CalibrationError::DegeneratePoints);
    }
    let n = points.len() as f64;
    let sum_x: f64 = points.iter().map(|&(b, _)| b as f64).sum();
    let sum_y: f64 = points.iter().map(|&(_, c)| c).sum();
    let mean_x = sum_x / n;
    let mean_y = sum_y / n;
    let sxx: f64 = points.iter().map(|&(b, _)| (b as f64 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|&(b, c)| (b as f64 - mean_x) * (c - mean_y)).sum();
    let rate = sxy / sxx;
    if !(rate > 0.0) {
        return Err(CalibrationError::NonPositiveRate(rate));
    }
    let fixed = (mean_y - rate * mean_x).max(0.0);
    Ok(CalibrationProfile {
        node_id,
        hash_cost_per_byte: rate,
        fixed_task_overhead: fixed,
        register_task_cost: REGISTER_TASK_US,
        msr_task_cost: REGISTER_TASK_US,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum DecomposeError {
    #[error(
        "decomposition target {target} us cannot fit the minimum {min_chunk}-byte chunk \
         (costs {min_cost} us)"
    )]
    TargetTooSmall { target: Micros, min_cost: Micros, min_chunk: u64 },
    #[error("check failed validation: {0}")]
    InvalidCheck(#[from] crate::model::ValidationError),
}

/// Decomposes a Check into Tasks.
///
/// Register and MSR Checks are indivisible and yield exactly one Task.
/// Memory Checks are cut into equal-size 512-byte-aligned chunks: the chunk
/// ceiling is the largest multiple of 512 bytes whose estimated cost fits the
/// decomposition target, the chunk count follows from it, and the region is
/// then split evenly across that count (the last chunk absorbs the
/// remainder). Task nonces and signatures are assigned at dispatch time.
pub fn decompose(check: &Check, profile: &CalibrationProfile) -> Result<Vec<Task>, DecomposeError> {
    crate::model::validate_check(check)?;
    let command = TaskCommand::of_check(&check.command);
    let value = check.value();

    let blank = |seq: TaskSeq, address: u64, length: u64| Task {
        check_id: check.id,
        task_seq: seq,
        command,
        address,
        length,
        nonce: 0,
        comparison_hash: None,
        bem_signature: [0; 32],
        est_cost: profile.est_cost(&command, length),
        value,
    };

    match check.command {
        CommandKind::Register(_) | CommandKind::Msr { .. } => Ok(vec![blank(0, 0, 0)]),
        CommandKind::VirtMem { addr, len } | CommandKind::PhysMem { addr, len } => {
            let target = check.decomposition_target;
            let min_cost = profile.est_cost(&command, MIN_CHUNK_BYTES);
            if target < min_cost {
                return Err(DecomposeError::TargetTooSmall {
                    target,
                    min_cost,
                    min_chunk: MIN_CHUNK_BYTES,
                });
            }
            // Largest multiple of 512 bytes whose estimated cost fits the target.
            let budget = target - profile.fixed_task_overhead;
            let mut chunk_ceiling =
                ((budget / profile.hash_cost_per_byte) as u64 / MIN_CHUNK_BYTES) * MIN_CHUNK_BYTES;
            chunk_ceiling = chunk_ceiling.max(MIN_CHUNK_BYTES);
            // Float division can land epsilon above the true boundary.
            while chunk_ceiling > MIN_CHUNK_BYTES
                && profile.est_cost(&command, chunk_ceiling) > target
            {
                chunk_ceiling -= MIN_CHUNK_BYTES;
            }

            let k = len.div_ceil(chunk_ceiling).max(1);
            if k == 1 {
                return Ok(vec![blank(0, addr, len)]);
            }
            // Even split, rounded up to the 512-byte grain; the last chunk
            // takes whatever remains (always at least one byte, never more
            // than a full chunk).
            let balanced = len.div_ceil(k).div_ceil(MIN_CHUNK_BYTES) * MIN_CHUNK_BYTES;
            let mut tasks = Vec::with_capacity(k as usize);
            for i in 0..k {
                let start = addr + i * balanced;
                let length = if i + 1 == k { len - (k - 1) * balanced } else { balanced };
                tasks.push(blank(i as TaskSeq, start, length));
            }
            Ok(tasks)
        }
    }
}

/// Scheduling knobs. The target bin size is runtime-adjustable; the maximum
/// bin size is fixed at provisioning and bounds the target at all times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Work budget a Bin is packed against, microseconds.
    pub target_bin_size: Micros,
    /// Upper bound on the target bin size, microseconds.
    pub max_bin_size: Micros,
    /// Bin dispatch rate, bins per second.
    pub bins_per_second: f64,
    /// Effective-priority increment applied by aging.
    pub aging_bump: u32,
    /// Number of consecutive skipped bins per aging bump.
    pub aging_interval: u32,
    /// Randomize each dispatch by up to +/-20% of the inter-bin period.
    #[serde(default)]
    pub dispatch_jitter: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("target bin size {requested} us exceeds the maximum bin size {max} us")]
    TargetAboveMax { requested: Micros, max: Micros },
    #[error("target bin size must be positive, got {0}")]
    NonPositiveTarget(Micros),
    #[error("bin rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("aging interval must be at least 1")]
    ZeroAgingInterval,
    #[error("task ({0}, {1}) is already pending")]
    DuplicateTask(CheckId, TaskSeq),
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.target_bin_size > 0.0) {
            return Err(ScheduleError::NonPositiveTarget(self.target_bin_size));
        }
        if self.target_bin_size > self.max_bin_size {
            return Err(ScheduleError::TargetAboveMax {
                requested: self.target_bin_size,
                max: self.max_bin_size,
            });
        }
        if !(self.bins_per_second > 0.0) {
            return Err(ScheduleError::NonPositiveRate(self.bins_per_second));
        }
        if self.aging_interval == 0 {
            return Err(ScheduleError::ZeroAgingInterval);
        }
        Ok(())
    }

    /// Adjusts the target bin size. Bins already formed are unaffected.
    pub fn set_target_bin_size(&mut self, new_size: Micros) -> Result<(), ScheduleError> {
        if !(new_size > 0.0) {
            return Err(ScheduleError::NonPositiveTarget(new_size));
        }
        if new_size > self.max_bin_size {
            return Err(ScheduleError::TargetAboveMax {
                requested: new_size,
                max: self.max_bin_size,
            });
        }
        self.target_bin_size = new_size;
        Ok(())
    }

    /// Microseconds between bin dispatches.
    pub fn dispatch_period_us(&self) -> Micros {
        1e6 / self.bins_per_second
    }
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            target_bin_size: 389.0,
            max_bin_size: 500.0,
            bins_per_second: 22.0,
            aging_bump: 1,
            aging_interval: 3,
            dispatch_jitter: false,
        }
    }
}

/// A task pending in a node's queue.
#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub task: Task,
    pub base_priority: u32,
    /// Bin counter value when the task was enqueued; every bin formed since
    /// then without selecting the task counts as one skip.
    enqueued_at_bin: u64,
    /// Monotone arrival stamp breaking age ties deterministically.
    arrival: u64,
}

impl QueueEntry {
    pub fn task(&self) -> &Task {
        &self.task
    }
}

/// Per-node priority queue of pending tasks.
///
/// Owned by a single scheduling context per node; queues for different nodes
/// may be driven concurrently.
#[derive(Debug)]
pub struct NodeQueue {
    node_id: NodeId,
    entries: Vec<QueueEntry>,
    identities: HashSet<(CheckId, TaskSeq)>,
    bins_formed: u64,
    arrivals: u64,
    next_bin_id: u64,
}

/// Beyond this many DP cells the packer trims to the strongest candidates
/// before running the exact knapsack.
const DP_CELL_LIMIT: u64 = 50_000_000;
const DP_TRIM_ITEMS: usize = 4096;

impl NodeQueue {
    pub fn new(node_id: NodeId) -> Self {
        NodeQueue {
            node_id,
            entries: Vec::new(),
            identities: HashSet::new(),
            bins_formed: 0,
            arrivals: 0,
            next_bin_id: 1,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bins_formed(&self) -> u64 {
        self.bins_formed
    }

    /// Inserts tasks with effective priority equal to the parent priority.
    pub fn enqueue(&mut self, tasks: Vec<Task>) -> Result<(), ScheduleError> {
        for t in &tasks {
            if self.identities.contains(&t.identity()) {
                return Err(ScheduleError::DuplicateTask(t.check_id, t.task_seq));
            }
        }
        for task in tasks {
            self.identities.insert(task.identity());
            let base_priority = task.value.saturating_sub(1);
            self.entries.push(QueueEntry {
                task,
                base_priority,
                enqueued_at_bin: self.bins_formed,
                arrival: self.arrivals,
            });
            self.arrivals += 1;
        }
        Ok(())
    }

    pub fn skip_count(&self, entry: &QueueEntry) -> u64 {
        self.bins_formed - entry.enqueued_at_bin
    }

    pub fn effective_priority(&self, entry: &QueueEntry, config: &SchedulerConfig) -> u32 {
        let bumps = self.skip_count(entry) / config.aging_interval as u64;
        entry
            .base_priority
            .saturating_add((bumps.min(u32::MAX as u64) as u32).saturating_mul(config.aging_bump))
    }

    /// Pending entries ordered by effective priority (descending), oldest
    /// first among equals.
    pub fn peek_order(&self, config: &SchedulerConfig) -> Vec<&QueueEntry> {
        let mut v: Vec<&QueueEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| {
            self.effective_priority(b, config)
                .cmp(&self.effective_priority(a, config))
                .then(a.arrival.cmp(&b.arrival))
        });
        v
    }

    /// Packs the next Bin.
    ///
    /// Selects the pending subset maximizing summed value (effective priority
    /// + 1) under the target bin size via exact dynamic programming over
    /// microsecond-quantized costs. Ties prefer the subset containing the
    /// highest effective priority, then the fuller bin, then older tasks.
    /// Selected tasks leave the queue with fresh nonces; everything else
    /// accrues one skip. An empty queue yields an empty bin, which the caller
    /// may use to skip the SMI entirely.
    pub fn fill_bin(
        &mut self,
        config: &SchedulerConfig,
        now: Micros,
        rng: &mut dyn RngCore,
    ) -> Bin {
        debug_assert!(config.target_bin_size <= config.max_bin_size);
        let capacity = config.target_bin_size.floor().max(0.0) as u64;
        let chosen = self.select(capacity, config);

        let mut tasks = Vec::with_capacity(chosen.len());
        let chosen_set: HashSet<usize> = chosen.iter().copied().collect();
        let mut kept = Vec::with_capacity(self.entries.len() - chosen.len());
        for (idx, entry) in self.entries.drain(..).enumerate() {
            if chosen_set.contains(&idx) {
                self.identities.remove(&entry.task.identity());
                let mut task = entry.task;
                task.nonce = next_nonce(rng);
                tasks.push(task);
            } else {
                kept.push(entry);
            }
        }
        self.entries = kept;
        self.bins_formed += 1;

        let bin_id = self.next_bin_id;
        self.next_bin_id += 1;
        Bin {
            bin_id,
            node_id: self.node_id,
            tasks,
            target_size: config.target_bin_size,
            nonce: next_nonce(rng),
            created_at: now,
        }
    }

    /// Indices into `entries` of the knapsack-selected subset.
    fn select(&self, capacity: u64, config: &SchedulerConfig) -> Vec<usize> {
        struct Item {
            idx: usize,
            weight: u64,
            value: u64,
            priority: u32,
            arrival: u64,
        }

        let mut items: Vec<Item> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(idx, e)| {
                let weight = (e.task.est_cost.ceil() as u64).max(1);
                if weight > capacity {
                    return None;
                }
                let priority = self.effective_priority(e, config);
                Some(Item {
                    idx,
                    weight,
                    value: priority as u64 + 1,
                    priority,
                    arrival: e.arrival,
                })
            })
            .collect();
        if items.is_empty() {
            return Vec::new();
        }
        // Oldest first, so exact ties in the DP resolve toward older tasks.
        items.sort_by_key(|i| i.arrival);

        // Homogeneous queues (a drained Check's identical chunks) skip the DP:
        // the optimum is simply as many oldest tasks as fit.
        let first = &items[0];
        if items
            .iter()
            .all(|i| i.weight == first.weight && i.value == first.value)
        {
            let take = ((capacity / first.weight) as usize).min(items.len());
            return items[..take].iter().map(|i| i.idx).collect();
        }

        if items.len() as u64 * (capacity + 1) > DP_CELL_LIMIT {
            items.sort_by(|a, b| {
                b.priority.cmp(&a.priority).then(a.arrival.cmp(&b.arrival))
            });
            items.truncate(DP_TRIM_ITEMS);
            items.sort_by_key(|i| i.arrival);
        }

        // dp cell ordering: value, then max effective priority in the subset,
        // then used cost (fuller bin wins ties).
        let w = capacity as usize;
        let n = items.len();
        let mut value = vec![0u64; w + 1];
        let mut max_prio = vec![0u32; w + 1];
        let mut used = vec![0u64; w + 1];
        let mut occupied = vec![false; w + 1];
        occupied[0] = true;
        let words_per_row = w / 64 + 1;
        let mut taken = vec![0u64; n * words_per_row];

        for (i, item) in items.iter().enumerate() {
            let iw = item.weight as usize;
            for cap in (iw..=w).rev() {
                let src = cap - iw;
                if !occupied[src] {
                    continue;
                }
                let cand = (
                    value[src] + item.value,
                    max_prio[src].max(item.priority),
                    used[src] + item.weight,
                );
                let cur = (value[cap], max_prio[cap], used[cap]);
                if !occupied[cap] || cand > cur {
                    occupied[cap] = true;
                    value[cap] = cand.0;
                    max_prio[cap] = cand.1;
                    used[cap] = cand.2;
                    taken[i * words_per_row + cap / 64] |= 1 << (cap % 64);
                } else {
                    taken[i * words_per_row + cap / 64] &= !(1 << (cap % 64));
                }
            }
        }

        let mut best = 0usize;
        for cap in 0..=w {
            if occupied[cap]
                && (value[cap], max_prio[cap], used[cap])
                    > (value[best], max_prio[best], used[best])
            {
                best = cap;
            }
        }

        let mut chosen = Vec::new();
        let mut cap = best;
        for i in (0..n).rev() {
            if taken[i * words_per_row + cap / 64] >> (cap % 64) & 1 == 1 {
                chosen.push(items[i].idx);
                cap -= items[i].weight as usize;
            }
        }
        chosen
    }
}

fn next_nonce(rng: &mut dyn RngCore) -> u128 {
    let mut b = [0u8; 16];
    rng.fill_bytes(&mut b);
    u128::from_le_bytes(b)
}
