//! Canonical serialized form for everything that gets signed, MAC'd, or put
//! on the wire.
//!
//! Encoding rules (documented in `docs/PROTOCOL.md`): fields are written in a
//! fixed order, integers and IEEE-754 doubles little-endian, variable-length
//! byte strings prefixed with a u32 length. There is exactly one encoding for
//! any value, so keyed tags computed over these bytes are bit-reproducible on
//! both ends of the wire.

use thiserror::Error;

use crate::model::{
    Bin, Check, CommandKind, Digest, Micros, Nonce, RegisterName, Task, TaskCommand, TaskFault,
    TaskResult,
};

/// Hard cap on any variable-length field accepted by the decoder.
pub const MAX_FIELD_LEN: usize = 4 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("field length {len} exceeds limit")]
    FieldTooLong { len: usize },
    #[error("invalid tag {tag} for {what}")]
    BadTag { what: &'static str, tag: u8 },
    #[error("trailing garbage: {0} unread bytes")]
    TrailingBytes(usize),
}

/// Canonical encoder.
#[derive(Default)]
pub struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// IEEE-754 bits, little-endian: one encoding per value.
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(d);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }
}

/// Canonical decoder over a byte slice.
pub struct Dec<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.data.len() - self.pos < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n - (self.data.len() - self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128, CodecError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn digest(&mut self) -> Result<Digest, CodecError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()? as usize;
        if len > MAX_FIELD_LEN {
            return Err(CodecError::FieldTooLong { len });
        }
        self.take(len)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn finish(self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::TrailingBytes(self.remaining()));
        }
        Ok(())
    }
}

// --- task commands -------------------------------------------------------

const TAG_REGISTER: u8 = 1;
const TAG_VIRT: u8 = 2;
const TAG_PHYS: u8 = 3;
const TAG_MSR: u8 = 4;

fn put_task_command(e: &mut Enc, cmd: &TaskCommand) {
    match cmd {
        TaskCommand::Register(r) => {
            e.u8(TAG_REGISTER).u8(r.code());
        }
        TaskCommand::VirtMem => {
            e.u8(TAG_VIRT);
        }
        TaskCommand::PhysMem => {
            e.u8(TAG_PHYS);
        }
        TaskCommand::Msr(n) => {
            e.u8(TAG_MSR).u32(*n);
        }
    }
}

fn get_task_command(d: &mut Dec) -> Result<TaskCommand, CodecError> {
    match d.u8()? {
        TAG_REGISTER => {
            let code = d.u8()?;
            RegisterName::from_code(code)
                .map(TaskCommand::Register)
                .ok_or(CodecError::BadTag { what: "register", tag: code })
        }
        TAG_VIRT => Ok(TaskCommand::VirtMem),
        TAG_PHYS => Ok(TaskCommand::PhysMem),
        TAG_MSR => Ok(TaskCommand::Msr(d.u32()?)),
        tag => Err(CodecError::BadTag { what: "task command", tag }),
    }
}

fn put_check_command(e: &mut Enc, cmd: &CommandKind) {
    match cmd {
        CommandKind::Register(r) => {
            e.u8(TAG_REGISTER).u8(r.code());
        }
        CommandKind::VirtMem { addr, len } => {
            e.u8(TAG_VIRT).u64(*addr).u64(*len);
        }
        CommandKind::PhysMem { addr, len } => {
            e.u8(TAG_PHYS).u64(*addr).u64(*len);
        }
        CommandKind::Msr { msr } => {
            e.u8(TAG_MSR).u32(*msr);
        }
    }
}

// --- signable forms -------------------------------------------------------

/// Canonical Check bytes covered by the policy-layer signature.
pub fn check_signing_bytes(check: &Check) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(check.id);
    put_check_command(&mut e, &check.command);
    e.bytes(&check.operand);
    e.u32(check.priority);
    e.f64(check.decomposition_target);
    e.into_bytes()
}

/// Canonical Task bytes covered by the backend signature (everything except
/// the signature field itself).
pub fn task_signing_bytes(task: &Task) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(task.check_id);
    e.u32(task.task_seq);
    put_task_command(&mut e, &task.command);
    e.u64(task.address);
    e.u64(task.length);
    e.u128(task.nonce);
    match &task.comparison_hash {
        Some(h) => {
            e.u8(1).digest(h);
        }
        None => {
            e.u8(0);
        }
    }
    e.f64(task.est_cost);
    e.u32(task.value);
    e.into_bytes()
}

/// Canonical TaskResult bytes covered by the inspector signature (everything
/// except the signature field itself).
pub fn result_signing_bytes(r: &TaskResult) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(r.check_id);
    e.u32(r.task_seq);
    e.u8(r.result as u8);
    let (code, arg) = r.fault.map(|f| f.code()).unwrap_or((0, 0));
    e.u8(code).u8(arg);
    e.digest(&r.measured_hash);
    e.f64(r.measurement_cost);
    e.into_bytes()
}

// --- wire payloads --------------------------------------------------------

fn put_task(e: &mut Enc, task: &Task) {
    let body = task_signing_bytes(task);
    e.bytes(&body);
    e.digest(&task.bem_signature);
}

fn get_task(d: &mut Dec) -> Result<Task, CodecError> {
    let body = d.bytes()?;
    let mut b = Dec::new(body);
    let check_id = b.u64()?;
    let task_seq = b.u32()?;
    let command = get_task_command(&mut b)?;
    let address = b.u64()?;
    let length = b.u64()?;
    let nonce = b.u128()?;
    let comparison_hash = match b.u8()? {
        0 => None,
        1 => Some(b.digest()?),
        tag => return Err(CodecError::BadTag { what: "comparison hash", tag }),
    };
    let est_cost = b.f64()?;
    let value = b.u32()?;
    b.finish()?;
    let bem_signature = d.digest()?;
    Ok(Task {
        check_id,
        task_seq,
        command,
        address,
        length,
        nonce,
        comparison_hash,
        bem_signature,
        est_cost,
        value,
    })
}

/// Serializes a Bin into the plaintext carried by a BIN frame.
pub fn encode_bin(bin: &Bin) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(bin.bin_id);
    e.u64(bin.node_id);
    e.u128(bin.nonce);
    e.f64(bin.target_size);
    e.f64(bin.created_at);
    e.u32(bin.tasks.len() as u32);
    for t in &bin.tasks {
        put_task(&mut e, t);
    }
    e.into_bytes()
}

pub fn decode_bin(data: &[u8]) -> Result<Bin, CodecError> {
    let mut d = Dec::new(data);
    let bin_id = d.u64()?;
    let node_id = d.u64()?;
    let nonce = d.u128()?;
    let target_size = d.f64()?;
    let created_at = d.f64()?;
    let n = d.u32()? as usize;
    if n > MAX_FIELD_LEN / 8 {
        return Err(CodecError::FieldTooLong { len: n });
    }
    let mut tasks = Vec::with_capacity(n);
    for _ in 0..n {
        tasks.push(get_task(&mut d)?);
    }
    d.finish()?;
    Ok(Bin { bin_id, node_id, tasks, target_size, nonce, created_at })
}

/// Status of a whole results payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultsStatus {
    Ok,
    /// The bin failed MAC or signature verification; no tasks were executed.
    AuthFailure,
    /// The bin buffer overlapped the protected SMRR region.
    SmrrRejected,
}

impl ResultsStatus {
    fn code(self) -> u8 {
        match self {
            ResultsStatus::Ok => 0,
            ResultsStatus::AuthFailure => 1,
            ResultsStatus::SmrrRejected => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ResultsStatus::Ok),
            1 => Some(ResultsStatus::AuthFailure),
            2 => Some(ResultsStatus::SmrrRejected),
            _ => None,
        }
    }
}

/// Everything the Inspector sends back for one Bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsPayload {
    pub bin_id: u64,
    pub node_id: u64,
    /// Echo of the Bin's nonce, for liveness.
    pub nonce_echo: Nonce,
    pub status: ResultsStatus,
    pub results: Vec<TaskResult>,
    /// Keyed tag over all result records (the whole-results integrity
    /// measurement), distinct from the per-result signatures.
    pub integrity_tag: Digest,
}

pub fn encode_results(p: &ResultsPayload) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(p.bin_id);
    e.u64(p.node_id);
    e.u128(p.nonce_echo);
    e.u8(p.status.code());
    e.u32(p.results.len() as u32);
    for r in &p.results {
        e.bytes(&result_signing_bytes(r));
        e.digest(&r.inspector_signature);
    }
    e.digest(&p.integrity_tag);
    e.into_bytes()
}

pub fn decode_results(data: &[u8]) -> Result<ResultsPayload, CodecError> {
    let mut d = Dec::new(data);
    let bin_id = d.u64()?;
    let node_id = d.u64()?;
    let nonce_echo = d.u128()?;
    let status_code = d.u8()?;
    let status = ResultsStatus::from_code(status_code)
        .ok_or(CodecError::BadTag { what: "results status", tag: status_code })?;
    let n = d.u32()? as usize;
    if n > MAX_FIELD_LEN / 8 {
        return Err(CodecError::FieldTooLong { len: n });
    }
    let mut results = Vec::with_capacity(n);
    for _ in 0..n {
        let body = d.bytes()?;
        let mut b = Dec::new(body);
        let check_id = b.u64()?;
        let task_seq = b.u32()?;
        let result = b.u8()? != 0;
        let code = b.u8()?;
        let arg = b.u8()?;
        let fault = if code == 0 {
            None
        } else {
            Some(
                TaskFault::from_code(code, arg)
                    .ok_or(CodecError::BadTag { what: "task fault", tag: code })?,
            )
        };
        let measured_hash = b.digest()?;
        let measurement_cost = b.f64()?;
        b.finish()?;
        let inspector_signature = d.digest()?;
        results.push(TaskResult {
            check_id,
            task_seq,
            result,
            fault,
            measured_hash,
            measurement_cost,
            inspector_signature,
        });
    }
    let integrity_tag = d.digest()?;
    d.finish()?;
    Ok(ResultsPayload { bin_id, node_id, nonce_echo, status, results, integrity_tag })
}

/// Canonical bytes the whole-results integrity tag is computed over.
pub fn results_integrity_bytes(bin_id: u64, nonce_echo: Nonce, results: &[TaskResult]) -> Vec<u8> {
    let mut e = Enc::new();
    e.u64(bin_id);
    e.u128(nonce_echo);
    e.u32(results.len() as u32);
    for r in results {
        e.bytes(&result_signing_bytes(r));
        e.digest(&r.inspector_signature);
    }
    e.into_bytes()
}

/// Control payload exchanged between peered policy managers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSync {
    pub level: u8,
    pub origin: u64,
}

pub fn encode_level_sync(m: &LevelSync) -> Vec<u8> {
    let mut e = Enc::new();
    e.u8(m.level).u64(m.origin);
    e.into_bytes()
}

pub fn decode_level_sync(data: &[u8]) -> Result<LevelSync, CodecError> {
    let mut d = Dec::new(data);
    let level = d.u8()?;
    let origin = d.u64()?;
    d.finish()?;
    Ok(LevelSync { level, origin })
}

/// Times, in microseconds, are encoded as IEEE-754 doubles.
pub type MicrosEncoded = Micros;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RegisterName;
    use proptest::prelude::*;

    fn sample_task(seq: u32, comparison: Option<Digest>) -> Task {
        Task {
            check_id: 42,
            task_seq: seq,
            command: TaskCommand::VirtMem,
            address: 0xffff_8000_0000_0000 + (seq as u64) * 0x2000,
            length: 0x2000,
            nonce: 0xdead_beef_0000_0000_0000_0000_0000_0001 + seq as u128,
            comparison_hash: comparison,
            bem_signature: [7; 32],
            est_cost: 389.0,
            value: 3,
        }
    }

    #[test]
    fn bin_roundtrip() {
        let bin = Bin {
            bin_id: 9,
            node_id: 1,
            tasks: vec![
                sample_task(0, Some([1; 32])),
                sample_task(1, None),
                Task {
                    command: TaskCommand::Register(RegisterName::Idtr),
                    address: 0,
                    length: 0,
                    ..sample_task(2, Some([2; 32]))
                },
                Task {
                    command: TaskCommand::Msr(0xC000_0082),
                    address: 0,
                    length: 0,
                    ..sample_task(3, Some([3; 32]))
                },
            ],
            target_size: 500.0,
            nonce: 0x1234_5678_9abc_def0_1122_3344_5566_7788,
            created_at: 1000.5,
        };
        let bytes = encode_bin(&bin);
        assert_eq!(decode_bin(&bytes).unwrap(), bin);
    }

    #[test]
    fn results_roundtrip() {
        let p = ResultsPayload {
            bin_id: 9,
            node_id: 1,
            nonce_echo: 77,
            status: ResultsStatus::Ok,
            results: vec![
                TaskResult {
                    check_id: 42,
                    task_seq: 0,
                    result: true,
                    fault: None,
                    measured_hash: [5; 32],
                    measurement_cost: 269.8,
                    inspector_signature: [6; 32],
                },
                TaskResult {
                    check_id: 42,
                    task_seq: 1,
                    result: false,
                    fault: Some(TaskFault::TranslationFault { level: 2 }),
                    measured_hash: [0; 32],
                    measurement_cost: 269.8,
                    inspector_signature: [6; 32],
                },
            ],
            integrity_tag: [9; 32],
        };
        let bytes = encode_results(&p);
        assert_eq!(decode_results(&bytes).unwrap(), p);
    }

    #[test]
    fn truncated_input_rejected() {
        let bin = Bin {
            bin_id: 1,
            node_id: 1,
            tasks: vec![sample_task(0, None)],
            target_size: 100.0,
            nonce: 1,
            created_at: 0.0,
        };
        let bytes = encode_bin(&bin);
        for cut in 0..bytes.len() {
            assert!(decode_bin(&bytes[..cut]).is_err(), "cut at {cut} should fail");
        }
    }

    #[test]
    fn signing_bytes_exclude_signature() {
        let mut a = sample_task(0, Some([1; 32]));
        let mut b = a.clone();
        b.bem_signature = [0xff; 32];
        assert_eq!(task_signing_bytes(&a), task_signing_bytes(&b));
        a.nonce += 1;
        assert_ne!(task_signing_bytes(&a), task_signing_bytes(&b));
    }

    proptest! {
        #[test]
        fn task_roundtrip_prop(
            seq in 0u32..10_000,
            addr in any::<u64>(),
            len in 1u64..1u64 << 40,
            nonce in any::<u128>(),
            est in 0.0f64..1e6,
            value in 1u32..100,
            with_hash in any::<bool>(),
        ) {
            let task = Task {
                check_id: 5,
                task_seq: seq,
                command: TaskCommand::PhysMem,
                address: addr,
                length: len,
                nonce,
                comparison_hash: if with_hash { Some([0xab; 32]) } else { None },
                bem_signature: [1; 32],
                est_cost: est,
                value,
            };
            let bin = Bin {
                bin_id: 1, node_id: 2, tasks: vec![task],
                target_size: 500.0, nonce: 3, created_at: 4.0,
            };
            let decoded = decode_bin(&encode_bin(&bin)).unwrap();
            prop_assert_eq!(decoded, bin);
        }
    }
}
