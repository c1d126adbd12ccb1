//! ECALL services offered to partitions.
//!
//! ABI: function id in a7, arguments in a0..a6, status returned in a0 and a
//! value in a1.

use crate::hart::Privilege;
use crate::pmp::{AccessKind, AccessQuery, Decision};

use super::{MonitorSystem, PartitionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServiceId {
    BenchNop = 0,
    TimerSet = 1,
    HartRelease = 2,
    IpcSend = 3,
    IpcRecv = 4,
    Power = 5,
    RebootSelf = 6,
}

impl ServiceId {
    pub fn from_fid(fid: u64) -> Option<Self> {
        Some(match fid {
            0 => ServiceId::BenchNop,
            1 => ServiceId::TimerSet,
            2 => ServiceId::HartRelease,
            3 => ServiceId::IpcSend,
            4 => ServiceId::IpcRecv,
            5 => ServiceId::Power,
            6 => ServiceId::RebootSelf,
            _ => return None,
        })
    }

    pub fn fid(self) -> u64 {
        self as u64
    }
}

/// Status codes returned in a0.
pub mod status {
    pub const OK: i64 = 0;
    pub const FAILED: i64 = -1;
    pub const NOT_SUPPORTED: i64 = -2;
    pub const INVALID_PARAM: i64 = -3;
    pub const DENIED: i64 = -4;
    pub const INVALID_ADDRESS: i64 = -5;
    pub const EMPTY: i64 = -6;
    pub const QUEUE_FULL: i64 = -7;
}

/// Power states accepted by the power service.
pub const POWER_STATES: u64 = 3;

/// What the hart does once the call returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfterCall {
    Resume,
    Park,
    Reboot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EcallResult {
    pub status: i64,
    pub value: u64,
    pub after: AfterCall,
    /// Extra cycles the service body spent beyond the fixed handler cost.
    pub extra_cycles: u64,
}

impl EcallResult {
    fn ok(value: u64) -> Self {
        Self { status: status::OK, value, after: AfterCall::Resume, extra_cycles: 0 }
    }

    fn err(status: i64) -> Self {
        Self { status, value: 0, after: AfterCall::Resume, extra_cycles: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: usize,
    pub data: Vec<u8>,
}

impl MonitorSystem {
    /// Run service `fid` on behalf of the partition owning `hart`.
    ///
    /// Every input produces a status; nothing here halts the simulation.
    /// Buffers passed by the guest are checked against the caller's own PMP
    /// at the caller's privilege before the monitor touches them.
    pub fn dispatch_ecall(&mut self, hart: usize, fid: u64, args: [u64; 7]) -> EcallResult {
        let Some(caller) = self.harts[hart].owner else {
            return EcallResult::err(status::DENIED);
        };
        if self.partitions[caller].state != PartitionState::Running {
            return EcallResult::err(status::DENIED);
        }
        let Some(svc) = ServiceId::from_fid(fid) else {
            return EcallResult::err(status::NOT_SUPPORTED);
        };
        match svc {
            ServiceId::BenchNop => EcallResult::ok(0),
            ServiceId::TimerSet => {
                let due = self.harts[hart].hart.cycles().saturating_add(args[0]);
                self.harts[hart].timer = Some(due);
                EcallResult::ok(due)
            }
            ServiceId::HartRelease => EcallResult { after: AfterCall::Park, ..EcallResult::ok(0) },
            ServiceId::IpcSend => self.ipc_send(hart, caller, args),
            ServiceId::IpcRecv => self.ipc_recv(hart, caller, args),
            ServiceId::Power => {
                if args[0] >= POWER_STATES {
                    return EcallResult::err(status::INVALID_PARAM);
                }
                self.partitions[caller].power_requests.push(args[0]);
                EcallResult::ok(0)
            }
            ServiceId::RebootSelf => EcallResult { after: AfterCall::Reboot, ..EcallResult::ok(0) },
        }
    }

    fn caller_can(&self, hart: usize, addr: u64, len: u64, kind: AccessKind) -> bool {
        if len == 0 {
            return true;
        }
        let slot = &self.harts[hart];
        let privilege = match slot.hart.privilege {
            Privilege::M => slot.hart.csr.mstatus_mpp,
            p => p,
        };
        slot.pmp.check_access(&AccessQuery { addr, size: len, kind, privilege }) == Decision::Allow
    }

    /// a0 = destination partition id, a1 = buffer, a2 = length.
    fn ipc_send(&mut self, hart: usize, caller: usize, args: [u64; 7]) -> EcallResult {
        let [target, buf, len, ..] = args;
        let Some(dest) = usize::try_from(target).ok().filter(|t| *t < self.partitions.len()) else {
            return EcallResult::err(status::INVALID_PARAM);
        };
        if len > self.config.message_max as u64 {
            return EcallResult::err(status::INVALID_PARAM);
        }
        if !self.caller_can(hart, buf, len, AccessKind::Read) {
            return EcallResult::err(status::INVALID_ADDRESS);
        }
        if self.partitions[dest].mailbox.len() >= self.config.mailbox_capacity {
            return EcallResult::err(status::QUEUE_FULL);
        }
        let data = self.memory.read_bytes(buf, len as usize);
        let words = len.div_ceil(8);
        let extra = self.harts[hart].cost.price_n(crate::cost::InstrClass::Load, words)
            + self.harts[hart].cost.price_n(crate::cost::InstrClass::Store, words);
        let queue = &mut self.partitions[dest].mailbox;
        queue.push_back(Message { from: caller, data });
        EcallResult { extra_cycles: extra, ..EcallResult::ok(queue.len() as u64) }
    }

    /// a0 = buffer, a1 = capacity. Returns the message length in a1.
    fn ipc_recv(&mut self, hart: usize, caller: usize, args: [u64; 7]) -> EcallResult {
        let [buf, cap, ..] = args;
        let Some(front) = self.partitions[caller].mailbox.front() else {
            return EcallResult::err(status::EMPTY);
        };
        let len = front.data.len() as u64;
        if len > cap {
            return EcallResult { value: len, ..EcallResult::err(status::INVALID_PARAM) };
        }
        if !self.caller_can(hart, buf, len, AccessKind::Write) {
            return EcallResult::err(status::INVALID_ADDRESS);
        }
        let msg = self.partitions[caller].mailbox.pop_front().expect("checked non-empty");
        self.memory.write_bytes(hart, buf, &msg.data);
        let words = len.div_ceil(8);
        let extra = self.harts[hart].cost.price_n(crate::cost::InstrClass::Load, words)
            + self.harts[hart].cost.price_n(crate::cost::InstrClass::Store, words);
        EcallResult { extra_cycles: extra, ..EcallResult::ok(len) }
    }
}
