//! Simulator of an M-mode partition monitor for RISC-V.
//!
//! The monitor isolates co-resident guest operating systems with the PMP
//! unit, services their ECALLs, and exposes the step marks needed to time the
//! trap path the way a hardware benchmark would with `rdcycle`.

pub mod bench;
pub mod cost;
pub mod guest;
pub mod hart;
pub mod manifest;
pub mod memory;
pub mod monitor;
pub mod pmp;
