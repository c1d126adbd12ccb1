//! Trap frame save and restore.

use crate::cost::{CycleCostModel, InstrClass, TrapPathCosts};
use crate::hart::{HartState, Privilege};

/// Registers saved by the monitor's trap prologue.
pub const SAVED_REGS: u64 = 32;

/// The guest context captured on trap entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapFrame {
    pub regs: [u64; 32],
    pub saved_pc: u64,
    pub saved_priv: Privilege,
}

/// Save all 32 general registers. Priced as the prologue plus 32 stores.
pub fn save_context(
    hart: &mut HartState,
    cost: &mut CycleCostModel,
    path: &TrapPathCosts,
) -> TrapFrame {
    debug_assert_eq!(hart.privilege, Privilege::M, "context save runs in M-mode");
    let cycles = cost.price_n(InstrClass::Alu, path.save_prologue)
        + cost.price_n(InstrClass::Store, SAVED_REGS);
    hart.advance(cycles);
    TrapFrame { regs: *hart.regs(), saved_pc: hart.csr.mepc, saved_priv: hart.csr.mstatus_mpp }
}

/// Reload all 32 general registers from `frame`. Priced as 32 loads plus
/// the epilogue. `mepc`/`mpp` are left alone: the handler may have moved
/// them on purpose.
pub fn restore_context(
    hart: &mut HartState,
    frame: &TrapFrame,
    cost: &mut CycleCostModel,
    path: &TrapPathCosts,
) {
    let cycles = cost.price_n(InstrClass::Load, SAVED_REGS)
        + cost.price_n(InstrClass::Alu, path.restore_epilogue);
    hart.set_regs(&frame.regs);
    hart.advance(cycles);
}
