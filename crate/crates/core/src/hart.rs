//! The slice of the RISC-V privileged architecture the monitor depends on:
//! M/S/U modes, trap CSRs, an abstract instruction vocabulary and a per-hart
//! cycle counter.
//!
//! Instructions are not decoded from memory. A guest is a list of [`Instr`]
//! values laid out at 4-byte slots starting at its entry point, so `pc`
//! advances by [`INSTR_BYTES`] per retired instruction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{CycleCostModel, InstrClass};
use crate::memory::Memory;
use crate::pmp::{AccessKind, AccessQuery, Decision, PmpUnit};

/// Size of one abstract instruction slot.
pub const INSTR_BYTES: u64 = 4;

/// Trap cause codes, numbered as in the privileged architecture.
pub mod cause {
    pub const ILLEGAL_INSTRUCTION: u64 = 2;
    pub const LOAD_MISALIGNED: u64 = 4;
    pub const LOAD_ACCESS_FAULT: u64 = 5;
    pub const STORE_MISALIGNED: u64 = 6;
    pub const STORE_ACCESS_FAULT: u64 = 7;
    pub const ECALL_FROM_U: u64 = 8;
    pub const ECALL_FROM_S: u64 = 9;
    pub const ECALL_FROM_M: u64 = 11;

    pub fn is_defined(cause: u64) -> bool {
        matches!(cause, 0..=9 | 11 | 12 | 13 | 15)
    }

    pub fn name(cause: u64) -> &'static str {
        match cause {
            ILLEGAL_INSTRUCTION => "illegal-instruction",
            LOAD_MISALIGNED => "load-misaligned",
            LOAD_ACCESS_FAULT => "load-access-fault",
            STORE_MISALIGNED => "store-misaligned",
            STORE_ACCESS_FAULT => "store-access-fault",
            ECALL_FROM_U => "ecall-from-u",
            ECALL_FROM_S => "ecall-from-s",
            ECALL_FROM_M => "ecall-from-m",
            _ => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Privilege {
    U = 0,
    S = 1,
    M = 3,
}

impl Privilege {
    pub fn encoding(self) -> u64 {
        self as u64
    }

    /// Decode a 2-bit MPP field. The reserved value 2 is not a privilege.
    pub fn from_encoding(bits: u64) -> Option<Self> {
        match bits & 0b11 {
            0 => Some(Privilege::U),
            1 => Some(Privilege::S),
            3 => Some(Privilege::M),
            _ => None,
        }
    }
}

impl fmt::Display for Privilege {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Privilege::U => "U",
            Privilege::S => "S",
            Privilege::M => "M",
        })
    }
}

/// A general-purpose register index, `x0`..`x31`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const ZERO: Reg = Reg(0);
    pub const T0: Reg = Reg(5);
    pub const T1: Reg = Reg(6);
    pub const T2: Reg = Reg(7);
    pub const A0: Reg = Reg(10);
    pub const A1: Reg = Reg(11);
    pub const A7: Reg = Reg(17);

    pub fn new(idx: u8) -> Option<Self> {
        (idx < 32).then_some(Reg(idx))
    }

    /// Argument register `a<n>` (n < 8).
    pub fn arg(n: u8) -> Self {
        assert!(n < 8, "a{n} does not exist");
        Reg(10 + n)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
    "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
    "t5", "t6",
];

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

impl FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix('x').and_then(|n| n.parse::<u8>().ok()) {
            return Reg::new(n).ok_or_else(|| format!("register `{s}` out of range"));
        }
        if s == "fp" {
            return Ok(Reg(8));
        }
        ABI_NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| Reg(i as u8))
            .ok_or_else(|| format!("unknown register `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CsrId {
    Mstatus,
    Mepc,
    Mtvec,
    Mcause,
    Mtval,
    Mscratch,
    Sepc,
    Stvec,
    Scause,
    Cycle,
}

impl CsrId {
    pub const ALL: [CsrId; 10] = [
        CsrId::Mstatus,
        CsrId::Mepc,
        CsrId::Mtvec,
        CsrId::Mcause,
        CsrId::Mtval,
        CsrId::Mscratch,
        CsrId::Sepc,
        CsrId::Stvec,
        CsrId::Scause,
        CsrId::Cycle,
    ];

    /// Lowest privilege allowed to access this CSR.
    pub fn min_privilege(self) -> Privilege {
        match self {
            CsrId::Mstatus
            | CsrId::Mepc
            | CsrId::Mtvec
            | CsrId::Mcause
            | CsrId::Mtval
            | CsrId::Mscratch => Privilege::M,
            CsrId::Sepc | CsrId::Stvec | CsrId::Scause => Privilege::S,
            CsrId::Cycle => Privilege::U,
        }
    }

    pub fn is_read_only(self) -> bool {
        matches!(self, CsrId::Cycle)
    }

    pub fn name(self) -> &'static str {
        match self {
            CsrId::Mstatus => "mstatus",
            CsrId::Mepc => "mepc",
            CsrId::Mtvec => "mtvec",
            CsrId::Mcause => "mcause",
            CsrId::Mtval => "mtval",
            CsrId::Mscratch => "mscratch",
            CsrId::Sepc => "sepc",
            CsrId::Stvec => "stvec",
            CsrId::Scause => "scause",
            CsrId::Cycle => "cycle",
        }
    }
}

impl FromStr for CsrId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CsrId::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown CSR `{s}`"))
    }
}

const MSTATUS_MPP_SHIFT: u64 = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrFile {
    pub mstatus_mpp: Privilege,
    pub mepc: u64,
    pub mtvec: u64,
    pub mcause: u64,
    pub mtval: u64,
    pub mscratch: u64,
    pub sepc: u64,
    pub stvec: u64,
    pub scause: u64,
}

impl Default for CsrFile {
    fn default() -> Self {
        Self {
            mstatus_mpp: Privilege::U,
            mepc: 0,
            mtvec: 0,
            mcause: 0,
            mtval: 0,
            mscratch: 0,
            sepc: 0,
            stvec: 0,
            scause: 0,
        }
    }
}

impl CsrFile {
    fn read(&self, id: CsrId, cycles: u64) -> u64 {
        match id {
            CsrId::Mstatus => self.mstatus_mpp.encoding() << MSTATUS_MPP_SHIFT,
            CsrId::Mepc => self.mepc,
            CsrId::Mtvec => self.mtvec,
            CsrId::Mcause => self.mcause,
            CsrId::Mtval => self.mtval,
            CsrId::Mscratch => self.mscratch,
            CsrId::Sepc => self.sepc,
            CsrId::Stvec => self.stvec,
            CsrId::Scause => self.scause,
            CsrId::Cycle => cycles,
        }
    }

    fn write(&mut self, id: CsrId, value: u64) {
        match id {
            // MPP is WARL: the reserved encoding leaves the field unchanged.
            CsrId::Mstatus => {
                if let Some(p) = Privilege::from_encoding(value >> MSTATUS_MPP_SHIFT) {
                    self.mstatus_mpp = p;
                }
            }
            CsrId::Mepc => self.mepc = value & !0b11,
            CsrId::Mtvec => self.mtvec = value & !0b11,
            CsrId::Mcause => self.mcause = value,
            CsrId::Mtval => self.mtval = value,
            CsrId::Mscratch => self.mscratch = value,
            CsrId::Sepc => self.sepc = value & !0b11,
            CsrId::Stvec => self.stvec = value & !0b11,
            CsrId::Scause => self.scause = value,
            CsrId::Cycle => unreachable!("cycle is read-only"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    /// Occupies one ALU slot with no architectural effect.
    Nop,
    Li {
        rd: Reg,
        imm: u64,
    },
    Add {
        rd: Reg,
        rs1: Reg,
        rs2: Reg,
    },
    Sub {
        rd: Reg,
        rs1: Reg,
        rs2: Reg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instr {
    Alu(AluOp),
    Load {
        addr: u64,
        width: u8,
        rd: Reg,
    },
    Store {
        addr: u64,
        width: u8,
        rs: Reg,
    },
    /// `fid`, when present, is placed in a7 as the call issues.
    Ecall {
        fid: Option<u64>,
    },
    CsrRead {
        csr: CsrId,
        rd: Reg,
    },
    CsrWrite {
        csr: CsrId,
        value: u64,
    },
    Mret,
    Sret,
    Rdcycle {
        rd: Reg,
    },
    Ioctl,
    Halt,
}

impl Instr {
    pub fn class(&self) -> InstrClass {
        match self {
            Instr::Alu(_) => InstrClass::Alu,
            Instr::Load { .. } => InstrClass::Load,
            Instr::Store { .. } => InstrClass::Store,
            Instr::Ecall { .. } => InstrClass::Ecall,
            Instr::CsrRead { .. } | Instr::CsrWrite { .. } => InstrClass::Csr,
            Instr::Mret | Instr::Sret => InstrClass::Xret,
            Instr::Rdcycle { .. } => InstrClass::Rdcycle,
            Instr::Ioctl => InstrClass::Ioctl,
            Instr::Halt => InstrClass::Halt,
        }
    }

    /// Whether this instruction touches a CSR only M-mode may access.
    pub fn uses_m_only_csr(&self) -> bool {
        match self {
            Instr::CsrRead { csr, .. } | Instr::CsrWrite { csr, .. } => {
                csr.min_privilege() == Privilege::M
            }
            _ => false,
        }
    }
}

pub fn valid_width(width: u8) -> bool {
    matches!(width, 1 | 2 | 4 | 8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Normal,
    Trap { cause: u64, tval: u64 },
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HartState {
    pub hart_id: usize,
    pub pc: u64,
    pub privilege: Privilege,
    pub csr: CsrFile,
    pub halted: bool,
    gpr: [u64; 32],
    cycles: u64,
}

impl HartState {
    /// A hart out of reset: M-mode, pc 0, registers and counter zeroed.
    pub fn new(hart_id: usize) -> Self {
        Self {
            hart_id,
            pc: 0,
            privilege: Privilege::M,
            csr: CsrFile::default(),
            halted: false,
            gpr: [0; 32],
            cycles: 0,
        }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.gpr[r.index()]
    }

    /// Writes to x0 are discarded.
    pub fn set_reg(&mut self, r: Reg, value: u64) {
        if r.index() != 0 {
            self.gpr[r.index()] = value;
        }
    }

    pub fn regs(&self) -> &[u64; 32] {
        &self.gpr
    }

    pub fn set_regs(&mut self, regs: &[u64; 32]) {
        self.gpr = *regs;
        self.gpr[0] = 0;
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn advance(&mut self, cycles: u64) {
        self.cycles = self.cycles.saturating_add(cycles);
    }

    /// Move the counter forward to `target`; never moves it back.
    pub fn advance_to(&mut self, target: u64) {
        self.cycles = self.cycles.max(target);
    }
}

/// Execute one instruction at the hart's current privilege.
///
/// Loads and stores are checked against `pmp` before touching `mem`; a
/// denied access is never committed. On a trap the hart state is left at the
/// faulting instruction; the caller is expected to follow with
/// [`enter_trap`].
pub fn step(
    hart: &mut HartState,
    instr: &Instr,
    pmp: &PmpUnit,
    mem: &mut Memory,
    cost: &mut CycleCostModel,
) -> StepEvent {
    if hart.halted {
        return StepEvent::Halted;
    }
    let start = hart.cycles;
    hart.advance(cost.price(instr.class()));

    let trap = |cause, tval| StepEvent::Trap { cause, tval };
    let access = |hart: &HartState, addr, width: u8, kind| {
        pmp.check_access(&AccessQuery {
            addr,
            size: u64::from(width),
            kind,
            privilege: hart.privilege,
        })
    };

    match *instr {
        Instr::Alu(op) => match op {
            AluOp::Nop => {}
            AluOp::Li { rd, imm } => hart.set_reg(rd, imm),
            AluOp::Add { rd, rs1, rs2 } => {
                hart.set_reg(rd, hart.reg(rs1).wrapping_add(hart.reg(rs2)))
            }
            AluOp::Sub { rd, rs1, rs2 } => {
                hart.set_reg(rd, hart.reg(rs1).wrapping_sub(hart.reg(rs2)))
            }
        },
        Instr::Load { addr, width, rd } => {
            if addr % u64::from(width) != 0 {
                return trap(cause::LOAD_MISALIGNED, addr);
            }
            if access(hart, addr, width, AccessKind::Read) == Decision::Deny {
                return trap(cause::LOAD_ACCESS_FAULT, addr);
            }
            hart.set_reg(rd, mem.read(addr, width));
        }
        Instr::Store { addr, width, rs } => {
            if addr % u64::from(width) != 0 {
                return trap(cause::STORE_MISALIGNED, addr);
            }
            if access(hart, addr, width, AccessKind::Write) == Decision::Deny {
                return trap(cause::STORE_ACCESS_FAULT, addr);
            }
            mem.write(hart.hart_id, addr, width, hart.reg(rs));
        }
        Instr::Ecall { fid } => {
            if let Some(fid) = fid {
                hart.set_reg(Reg::A7, fid);
            }
            let c = match hart.privilege {
                Privilege::U => cause::ECALL_FROM_U,
                Privilege::S => cause::ECALL_FROM_S,
                Privilege::M => cause::ECALL_FROM_M,
            };
            return trap(c, 0);
        }
        Instr::CsrRead { csr, rd } => {
            if hart.privilege < csr.min_privilege() {
                return trap(cause::ILLEGAL_INSTRUCTION, 0);
            }
            let v = hart.csr.read(csr, start);
            hart.set_reg(rd, v);
        }
        Instr::CsrWrite { csr, value } => {
            if hart.privilege < csr.min_privilege() || csr.is_read_only() {
                return trap(cause::ILLEGAL_INSTRUCTION, 0);
            }
            hart.csr.write(csr, value);
        }
        Instr::Mret => {
            return match mret(hart, cost) {
                Ok(()) => StepEvent::Normal,
                Err(c) => trap(c, 0),
            };
        }
        Instr::Sret => {
            if hart.privilege == Privilege::U {
                return trap(cause::ILLEGAL_INSTRUCTION, 0);
            }
            // SPP is not modelled: SRET always drops to U.
            hart.privilege = Privilege::U;
            hart.pc = hart.csr.sepc;
            return StepEvent::Normal;
        }
        Instr::Rdcycle { rd } => hart.set_reg(rd, start),
        Instr::Ioctl => {}
        Instr::Halt => {
            hart.halted = true;
            return StepEvent::Halted;
        }
    }
    hart.pc = hart.pc.wrapping_add(INSTR_BYTES);
    StepEvent::Normal
}

/// Take a trap into M-mode. No delegation: every trap lands in the monitor.
pub fn enter_trap(hart: &mut HartState, trap_cause: u64, tval: u64, cost: &CycleCostModel) {
    debug_assert!(cause::is_defined(trap_cause), "undefined cause {trap_cause}");
    hart.csr.mepc = hart.pc;
    hart.csr.mcause = trap_cause;
    hart.csr.mtval = tval;
    hart.csr.mstatus_mpp = hart.privilege;
    hart.privilege = Privilege::M;
    hart.pc = hart.csr.mtvec;
    hart.advance(cost.trap_entry_latency());
}

/// Return from M-mode to the privilege in MPP. Errors with the
/// illegal-instruction cause when executed below M.
pub fn mret(hart: &mut HartState, cost: &CycleCostModel) -> Result<(), u64> {
    if hart.privilege != Privilege::M {
        return Err(cause::ILLEGAL_INSTRUCTION);
    }
    hart.privilege = hart.csr.mstatus_mpp;
    hart.csr.mstatus_mpp = Privilege::U;
    hart.pc = hart.csr.mepc;
    hart.advance(cost.trap_return_latency());
    Ok(())
}
