//! Scripted guests and the text format they are stored in.
//!
//! A script is one instruction per line. Blank lines and text after `#` are
//! ignored. Two directives name the program and the partition it runs in:
//!
//! ```text
//! .name bench-driver
//! .partition linux
//! IOCTL                      # U-mode request crossing into the S-mode driver
//! RDCYCLE x5
//! ECALL 0                    # fid goes to a7
//! RDCYCLE x6
//! ALU sub x7 x6 x5
//! STORE 0x80600000 8 x7
//! HALT
//! ```
//!
//! | line                       | instruction                               |
//! |----------------------------|-------------------------------------------|
//! | `ALU`                      | one ALU slot, no effect                   |
//! | `ALU li rd imm`            | `rd = imm`                                |
//! | `ALU add rd rs1 rs2`       | `rd = rs1 + rs2` (wrapping)               |
//! | `ALU sub rd rs1 rs2`       | `rd = rs1 - rs2` (wrapping)               |
//! | `LOAD addr width [rd]`     | load `width` bytes into `rd` (default x0) |
//! | `STORE addr width [rs]`    | store low bytes of `rs` (default x0)      |
//! | `ECALL [fid]`              | environment call, optional fid into a7    |
//! | `CSRR csr rd`              | read a CSR                                |
//! | `CSRW csr imm`             | write a CSR                               |
//! | `MRET`, `SRET`             | trap returns                              |
//! | `RDCYCLE rd`               | cycle counter into `rd`                   |
//! | `IOCTL`                    | U-mode to S-mode request crossing         |
//! | `HALT`                     | stop this hart                            |
//!
//! Numbers are decimal or `0x` hex; registers accept `xN` or ABI names.
//! Mnemonics are case-insensitive.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::hart::{AluOp, CsrId, Instr, Privilege, Reg, valid_width};
use crate::monitor::ServiceId;

#[derive(Debug, Error)]
pub enum GuestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing `.{0}` directive")]
    MissingDirective(&'static str),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestProgram {
    pub name: String,
    pub partition: String,
    pub script: Vec<Instr>,
}

impl GuestProgram {
    /// Guests always start in S-mode at their partition's entry point.
    pub const START_PRIVILEGE: Privilege = Privilege::S;

    pub fn new(name: impl Into<String>, partition: impl Into<String>, script: Vec<Instr>) -> Self {
        Self { name: name.into(), partition: partition.into(), script }
    }

    pub fn parse(text: &str) -> Result<Self, GuestError> {
        let mut name = None;
        let mut partition = None;
        let mut script = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| GuestError::Parse { line: i + 1, message };
            if let Some(rest) = line.strip_prefix('.') {
                let (key, value) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                let value = value.trim();
                if value.is_empty() {
                    return Err(err(format!("directive `.{key}` needs a value")));
                }
                match key {
                    "name" => name = Some(value.to_string()),
                    "partition" => partition = Some(value.to_string()),
                    other => return Err(err(format!("unknown directive `.{other}`"))),
                }
                continue;
            }
            script.push(parse_instr(line).map_err(err)?);
        }
        Ok(Self {
            name: name.ok_or(GuestError::MissingDirective("name"))?,
            partition: partition.ok_or(GuestError::MissingDirective("partition"))?,
            script,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GuestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| GuestError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(".name {}\n.partition {}\n", self.name, self.partition);
        for instr in &self.script {
            let _ = writeln!(out, "{}", DisplayInstr(instr));
        }
        out
    }

    /// Instructions that would trap as illegal in S-mode because they touch
    /// an M-only CSR or execute MRET.
    pub fn m_only_uses(&self) -> Vec<usize> {
        self.script
            .iter()
            .enumerate()
            .filter(|(_, i)| i.uses_m_only_csr() || matches!(i, Instr::Mret))
            .map(|(idx, _)| idx)
            .collect()
    }

    /// Number of ECALLs carrying `fid` as an immediate.
    pub fn count_ecalls(&self, fid: u64) -> usize {
        self.script
            .iter()
            .filter(|i| matches!(i, Instr::Ecall { fid: Some(f) } if *f == fid))
            .count()
    }
}

impl FromStr for GuestProgram {
    type Err = GuestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

fn parse_num(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    r.map_err(|_| format!("bad number `{s}`"))
}

fn parse_width(s: &str) -> Result<u8, String> {
    let w = parse_num(s)?;
    u8::try_from(w)
        .ok()
        .filter(|w| valid_width(*w))
        .ok_or_else(|| format!("width must be 1, 2, 4 or 8, got `{s}`"))
}

fn parse_instr(line: &str) -> Result<Instr, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let op = toks[0].to_ascii_uppercase();
    let args = &toks[1..];
    let arity = |lo: usize, hi: usize| {
        if (lo..=hi).contains(&args.len()) {
            Ok(())
        } else if lo == hi {
            Err(format!("{op} takes {lo} operand(s), got {}", args.len()))
        } else {
            Err(format!("{op} takes {lo} to {hi} operands, got {}", args.len()))
        }
    };
    let reg = |s: &str| s.parse::<Reg>();
    Ok(match op.as_str() {
        "ALU" => {
            if args.is_empty() {
                return Ok(Instr::Alu(AluOp::Nop));
            }
            match args[0].to_ascii_lowercase().as_str() {
                "nop" => {
                    arity(1, 1)?;
                    Instr::Alu(AluOp::Nop)
                }
                "li" => {
                    arity(3, 3)?;
                    Instr::Alu(AluOp::Li { rd: reg(args[1])?, imm: parse_num(args[2])? })
                }
                kind @ ("add" | "sub") => {
                    arity(4, 4)?;
                    let (rd, rs1, rs2) = (reg(args[1])?, reg(args[2])?, reg(args[3])?);
                    Instr::Alu(if kind == "add" {
                        AluOp::Add { rd, rs1, rs2 }
                    } else {
                        AluOp::Sub { rd, rs1, rs2 }
                    })
                }
                other => return Err(format!("unknown ALU op `{other}`")),
            }
        }
        "LOAD" | "STORE" => {
            arity(2, 3)?;
            let addr = parse_num(args[0])?;
            let width = parse_width(args[1])?;
            let r = args.get(2).map(|s| reg(s)).transpose()?.unwrap_or(Reg::ZERO);
            if op == "LOAD" {
                Instr::Load { addr, width, rd: r }
            } else {
                Instr::Store { addr, width, rs: r }
            }
        }
        "ECALL" => {
            arity(0, 1)?;
            Instr::Ecall { fid: args.first().map(|s| parse_num(s)).transpose()? }
        }
        "CSRR" => {
            arity(2, 2)?;
            Instr::CsrRead { csr: args[0].parse::<CsrId>()?, rd: reg(args[1])? }
        }
        "CSRW" => {
            arity(2, 2)?;
            Instr::CsrWrite { csr: args[0].parse::<CsrId>()?, value: parse_num(args[1])? }
        }
        "RDCYCLE" => {
            arity(1, 1)?;
            Instr::Rdcycle { rd: reg(args[0])? }
        }
        "MRET" | "SRET" | "IOCTL" | "HALT" => {
            arity(0, 0)?;
            match op.as_str() {
                "MRET" => Instr::Mret,
                "SRET" => Instr::Sret,
                "IOCTL" => Instr::Ioctl,
                _ => Instr::Halt,
            }
        }
        other => return Err(format!("unknown instruction `{other}`")),
    })
}

struct DisplayInstr<'a>(&'a Instr);

impl fmt::Display for DisplayInstr<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self.0 {
            Instr::Alu(AluOp::Nop) => f.write_str("ALU"),
            Instr::Alu(AluOp::Li { rd, imm }) => write!(f, "ALU li {rd} {imm:#x}"),
            Instr::Alu(AluOp::Add { rd, rs1, rs2 }) => write!(f, "ALU add {rd} {rs1} {rs2}"),
            Instr::Alu(AluOp::Sub { rd, rs1, rs2 }) => write!(f, "ALU sub {rd} {rs1} {rs2}"),
            Instr::Load { addr, width, rd } if rd == Reg::ZERO => {
                write!(f, "LOAD {addr:#x} {width}")
            }
            Instr::Load { addr, width, rd } => write!(f, "LOAD {addr:#x} {width} {rd}"),
            Instr::Store { addr, width, rs } if rs == Reg::ZERO => {
                write!(f, "STORE {addr:#x} {width}")
            }
            Instr::Store { addr, width, rs } => write!(f, "STORE {addr:#x} {width} {rs}"),
            Instr::Ecall { fid: None } => f.write_str("ECALL"),
            Instr::Ecall { fid: Some(fid) } => write!(f, "ECALL {fid}"),
            Instr::CsrRead { csr, rd } => write!(f, "CSRR {} {rd}", csr.name()),
            Instr::CsrWrite { csr, value } => write!(f, "CSRW {} {value:#x}", csr.name()),
            Instr::Mret => f.write_str("MRET"),
            Instr::Sret => f.write_str("SRET"),
            Instr::Rdcycle { rd } => write!(f, "RDCYCLE {rd}"),
            Instr::Ioctl => f.write_str("IOCTL"),
            Instr::Halt => f.write_str("HALT"),
        }
    }
}

const T0: Reg = Reg::T0;
const T1: Reg = Reg::T1;
const T2: Reg = Reg::T2;

/// Rich-OS benchmark driver for `iters` iterations. Each iteration stores
/// the RDCYCLE delta around one no-op ECALL at `sample_buf + 8*i`.
pub fn build_bench_driver(partition: &str, iters: usize, sample_buf: u64) -> GuestProgram {
    assert!(iters >= 1, "the driver needs at least one iteration");
    let mut script = Vec::with_capacity(iters * 6 + 1);
    for i in 0..iters as u64 {
        script.extend([
            Instr::Ioctl,
            Instr::Rdcycle { rd: T0 },
            Instr::Ecall { fid: Some(ServiceId::BenchNop.fid()) },
            Instr::Rdcycle { rd: T1 },
            Instr::Alu(AluOp::Sub { rd: T2, rs1: T1, rs2: T0 }),
            Instr::Store { addr: sample_buf + 8 * i, width: 8, rs: T2 },
        ]);
    }
    script.push(Instr::Halt);
    GuestProgram::new("bench-driver", partition, script)
}

/// RTOS periodic task: arm the timer for `period` cycles, release the hart,
/// and on wake-up run one job. Job `k` stores its start cycle at
/// `data + 8*k`; with `uart` set it also writes one byte there. With
/// `jobs == 0` the task releases its hart with no timer and never returns.
pub fn build_rtos_task(
    partition: &str,
    period: u64,
    jobs: usize,
    data: u64,
    uart: Option<u64>,
) -> GuestProgram {
    assert!(period >= 1, "period must be at least one cycle");
    let release = Instr::Ecall { fid: Some(ServiceId::HartRelease.fid()) };
    let mut script = Vec::new();
    if jobs == 0 {
        script.extend([release, Instr::Halt]);
        return GuestProgram::new("rtos-task", partition, script);
    }
    for k in 0..jobs as u64 {
        script.extend([
            Instr::Alu(AluOp::Li { rd: Reg::A0, imm: period }),
            Instr::Ecall { fid: Some(ServiceId::TimerSet.fid()) },
            release,
            Instr::Rdcycle { rd: T0 },
            Instr::Store { addr: data + 8 * k, width: 8, rs: T0 },
            Instr::Alu(AluOp::Li { rd: T1, imm: k + 1 }),
            Instr::Alu(AluOp::Add { rd: T2, rs1: T2, rs2: T1 }),
        ]);
        if let Some(uart) = uart {
            script.push(Instr::Store { addr: uart, width: 1, rs: T1 });
        }
    }
    script.push(Instr::Halt);
    GuestProgram::new("rtos-task", partition, script)
}

/// A single store of a recognisable pattern to `target`, then halt.
pub fn build_fault_injector(partition: &str, target: u64) -> GuestProgram {
    let width =
        [8u8, 4, 2, 1].into_iter().find(|w| target.is_multiple_of(u64::from(*w))).unwrap_or(1);
    GuestProgram::new(
        "fault-injector",
        partition,
        vec![
            Instr::Alu(AluOp::Li { rd: T0, imm: 0xdead_beef_cafe_f00d }),
            Instr::Store { addr: target, width, rs: T0 },
            Instr::Halt,
        ],
    )
}

/// Busy rich-OS load: `rounds` of load/add/store over a small buffer, with
/// a no-op ECALL every `ecall_every` rounds (0 disables them).
pub fn build_background_load(
    partition: &str,
    rounds: usize,
    buf: u64,
    ecall_every: usize,
) -> GuestProgram {
    let mut script = Vec::new();
    for r in 0..rounds {
        let addr = buf + 8 * (r as u64 % 16);
        script.extend([
            Instr::Load { addr, width: 8, rd: T0 },
            Instr::Alu(AluOp::Add { rd: T0, rs1: T0, rs2: T0 }),
            Instr::Store { addr, width: 8, rs: T0 },
        ]);
        if ecall_every > 0 && (r + 1) % ecall_every == 0 {
            script.push(Instr::Ecall { fid: Some(ServiceId::BenchNop.fid()) });
        }
    }
    script.push(Instr::Halt);
    GuestProgram::new("background-load", partition, script)
}
