//! The partition monitor: boot in criticality order, per-hart PMP
//! programming, the M-mode trap path and the fault policy.
//!
//! All harts advance in one deterministic round-robin loop, one guest
//! instruction per turn. Each hart keeps its own cycle counter; the monitor
//! work done on a hart (trap handling, reboot) is charged to that hart only.
//!
//! The ECALL trap path is stamped at nine points, written to the event log
//! as `STEP-MARK(k)`:
//!
//! | k | stamped when                                    |
//! |---|-------------------------------------------------|
//! | 1 | the ECALL issues in the guest                   |
//! | 2 | trap entry latency paid and context saved       |
//! | 3 | cause decoded                                   |
//! | 4 | first instruction of the service handler        |
//! | 5 | handler body done                               |
//! | 6 | handler returned (a0/a1 written, mepc advanced) |
//! | 7 | trap epilogue begins                            |
//! | 8 | context restore begins                          |
//! | 9 | MRET has landed back in the caller              |

mod log;
mod service;
mod trap;

use std::collections::VecDeque;

use thiserror::Error;

pub use self::log::{Event, EventKind, EventLog};
pub use self::service::{AfterCall, EcallResult, Message, POWER_STATES, ServiceId, status};
pub use self::trap::{SAVED_REGS, TrapFrame, restore_context, save_context};

use crate::cost::{CostProfile, CycleCostModel, InstrClass, JitterConfig};
use crate::guest::GuestProgram;
use crate::hart::{self, HartState, INSTR_BYTES, Privilege, Reg, StepEvent, cause};
use crate::manifest::{PartitionManifest, PartitionSpec, Violation, boot_order, validate};
use crate::memory::Memory;
use crate::pmp::{PmpEntry, PmpError, PmpUnit, compile_regions};

#[derive(Debug, Error)]
pub enum BootError {
    #[error("partition `{partition}` does not fit the PMP: {error}")]
    Pmp { partition: String, error: PmpError },
    #[error("manifest has {} violation(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("program `{program}` targets unknown partition `{partition}`")]
    UnknownPartition { program: String, partition: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MonitorError {
    #[error("no partition named `{0}`")]
    UnknownPartition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPolicy {
    /// Reboot the offending partition; once it has been rebooted
    /// `max_reboots` times, stop it instead.
    Reboot { max_reboots: u32 },
    /// Log the fault and skip the faulting instruction.
    LogOnly,
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy::Reboot { max_reboots: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub profile: CostProfile,
    pub jitter: Option<JitterConfig>,
    pub fault_policy: FaultPolicy,
    pub mailbox_capacity: usize,
    pub message_max: usize,
    /// Schedule only this hart (single-hart measurement mode).
    pub only_hart: Option<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            profile: CostProfile::default(),
            jitter: None,
            fault_policy: FaultPolicy::default(),
            mailbox_capacity: 16,
            message_max: 64,
            only_hart: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionState {
    Stopped,
    Booting,
    Running,
    Faulted,
}

impl PartitionState {
    fn can_become(self, next: PartitionState) -> bool {
        use PartitionState::*;
        matches!(
            (self, next),
            (Stopped, Booting)
                | (Booting, Running)
                | (Running, Faulted)
                | (Running, Stopped)
                | (Faulted, Booting)
                | (Faulted, Stopped)
        )
    }
}

#[derive(Debug, Clone)]
pub struct PartitionRuntime {
    pub spec: PartitionSpec,
    pub state: PartitionState,
    pub pmp_image: Vec<PmpEntry>,
    pub fault_count: u32,
    pub mailbox: VecDeque<Message>,
    pub power_requests: Vec<u64>,
    pub program: Option<GuestProgram>,
}

impl PartitionRuntime {
    fn set_state(&mut self, next: PartitionState) {
        assert!(
            self.state.can_become(next),
            "partition `{}`: illegal transition {:?} -> {:?}",
            self.spec.name,
            self.state,
            next
        );
        self.state = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HartRun {
    Running,
    /// Released via ECALL; woken by its timer, if one is armed.
    Parked,
    Halted,
    /// Not owned by any partition, or owner stopped.
    Offline,
}

#[derive(Debug, Clone)]
pub struct HartSlot {
    pub hart: HartState,
    pub pmp: PmpUnit,
    pub cost: CycleCostModel,
    pub owner: Option<usize>,
    pub run: HartRun,
    pub timer: Option<u64>,
    started: bool,
    ecalls: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultAction {
    Rebooted,
    Stopped,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapOutcome {
    Resume,
    Park,
    Reboot,
    Fault { partition: String, cause: u64, tval: u64, action: FaultAction },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub rounds: u64,
    pub instructions: u64,
    /// True if the loop stopped because no hart could make progress.
    pub idle: bool,
}

#[derive(Debug, Clone)]
pub struct MonitorSystem {
    manifest: PartitionManifest,
    config: SystemConfig,
    harts: Vec<HartSlot>,
    partitions: Vec<PartitionRuntime>,
    memory: Memory,
    log: EventLog,
}

/// Boot every partition of a valid manifest.
///
/// Partitions start in boot order, each on its own harts. A partition's
/// harts are held until every partition ahead of it has finished booting,
/// so the first instruction of a non-critical OS always comes after the last
/// boot step of every critical one.
pub fn boot_system(
    manifest: &PartitionManifest,
    programs: Vec<GuestProgram>,
    config: SystemConfig,
) -> Result<MonitorSystem, BootError> {
    let violations = validate(manifest);
    if let Some((partition, error)) = violations.iter().find_map(|v| match v {
        Violation::PmpCompile { partition, error } => Some((partition.clone(), error.clone())),
        _ => None,
    }) {
        return Err(BootError::Pmp { partition, error });
    }
    if !violations.is_empty() {
        return Err(BootError::Invalid(violations));
    }

    let mut partitions = Vec::with_capacity(manifest.partitions.len());
    for spec in &manifest.partitions {
        let pmp_image = compile_regions(&manifest.pmp_regions(spec))
            .map_err(|error| BootError::Pmp { partition: spec.name.clone(), error })?;
        partitions.push(PartitionRuntime {
            spec: spec.clone(),
            state: PartitionState::Stopped,
            pmp_image,
            fault_count: 0,
            mailbox: VecDeque::new(),
            power_requests: Vec::new(),
            program: None,
        });
    }
    for program in programs {
        let Some(p) = partitions.iter_mut().find(|p| p.spec.name == program.partition) else {
            return Err(BootError::UnknownPartition {
                program: program.name,
                partition: program.partition,
            });
        };
        p.program = Some(program);
    }

    let harts = (0..manifest.platform.harts)
        .map(|id| {
            let mut cost = CycleCostModel::new(config.profile.instr);
            if let Some(j) = config.jitter {
                cost = cost.with_jitter(j, id as u64);
            }
            HartSlot {
                hart: HartState::new(id),
                pmp: PmpUnit::default(),
                cost,
                owner: partitions.iter().position(|p| p.spec.harts.contains(&id)),
                run: HartRun::Offline,
                timer: None,
                started: false,
                ecalls: 0,
            }
        })
        .collect();

    let mut sys = MonitorSystem {
        manifest: manifest.clone(),
        config,
        harts,
        partitions,
        memory: Memory::new(),
        log: EventLog::default(),
    };

    let mtvec = sys.manifest.monitor.mtvec;
    for slot in &mut sys.harts {
        slot.hart.csr.mtvec = mtvec;
        let c = slot.cost.price(InstrClass::Csr);
        slot.hart.advance(c);
        let (cycle, id) = (slot.hart.cycles(), slot.hart.hart_id);
        sys.log.push(cycle, id, EventKind::Boot, format!("monitor mtvec={mtvec:#x}"));
    }

    let mut gate = 0;
    for name in boot_order(&sys.manifest) {
        let idx = sys.partition_index(&name).expect("boot order names come from the manifest");
        gate = sys.start_partition(idx, gate);
    }
    for slot in sys.harts.iter().filter(|s| s.owner.is_none()) {
        sys.log.push(slot.hart.cycles(), slot.hart.hart_id, EventKind::Boot, "parked unowned");
    }
    Ok(sys)
}

impl MonitorSystem {
    pub fn manifest(&self) -> &PartitionManifest {
        &self.manifest
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn hart(&self, id: usize) -> &HartState {
        &self.harts[id].hart
    }

    pub fn hart_slot(&self, id: usize) -> &HartSlot {
        &self.harts[id]
    }

    pub fn hart_count(&self) -> usize {
        self.harts.len()
    }

    pub fn partitions(&self) -> &[PartitionRuntime] {
        &self.partitions
    }

    pub fn partition_index(&self, name: &str) -> Option<usize> {
        self.partitions.iter().position(|p| p.spec.name == name)
    }

    pub fn partition(&self, name: &str) -> Option<&PartitionRuntime> {
        self.partitions.iter().find(|p| p.spec.name == name)
    }

    pub fn set_only_hart(&mut self, hart: Option<usize>) {
        self.config.only_hart = hart;
    }

    /// Charge the per-hart boot work, program the PMP and drop to S-mode at
    /// the entry point. Returns the cycle at which the partition is running.
    fn start_partition(&mut self, idx: usize, not_before: u64) -> u64 {
        let path = self.config.profile.trap_path;
        let name = self.partitions[idx].spec.name.clone();
        let entry = self.partitions[idx].spec.entry;
        self.partitions[idx].set_state(PartitionState::Booting);
        let image = self.partitions[idx].pmp_image.clone();
        let mut ready = not_before;
        for h in self.partitions[idx].spec.harts.clone() {
            let slot = &mut self.harts[h];
            slot.hart.advance_to(not_before);
            slot.hart.privilege = Privilege::M;
            slot.hart.halted = false;
            slot.hart.set_regs(&[0; 32]);
            let c = slot.cost.price_n(InstrClass::Alu, path.boot_setup)
                + slot.cost.price_n(InstrClass::Csr, 2 * image.len() as u64);
            slot.hart.advance(c);
            slot.pmp = PmpUnit::from_entries(&image);
            self.log.push(
                slot.hart.cycles(),
                h,
                EventKind::Boot,
                format!("partition={name} stage=pmp entries={}", image.len()),
            );
            slot.hart.csr.mepc = entry;
            slot.hart.csr.mstatus_mpp = Privilege::S;
            let c = slot.cost.price(InstrClass::Xret);
            slot.hart.advance(c);
            hart::mret(&mut slot.hart, &slot.cost).expect("boot hart is in M-mode");
            slot.run = HartRun::Running;
            slot.timer = None;
            slot.started = false;
            ready = ready.max(slot.hart.cycles());
        }
        self.partitions[idx].set_state(PartitionState::Running);
        let first = self.partitions[idx].spec.harts[0];
        self.log.push(
            ready,
            first,
            EventKind::Boot,
            format!("partition={name} stage=running entry={entry:#x}"),
        );
        ready
    }

    /// Run until every hart is halted, parked without a timer or offline,
    /// or until `max_rounds` round-robin rounds have elapsed.
    pub fn run(&mut self, max_rounds: u64) -> RunStats {
        let mut stats = RunStats::default();
        while stats.rounds < max_rounds {
            let mut progressed = false;
            for h in 0..self.harts.len() {
                if self.config.only_hart.is_some_and(|only| only != h) {
                    continue;
                }
                match self.turn(h) {
                    Turn::Idle => {}
                    Turn::Woke => progressed = true,
                    Turn::Executed => {
                        progressed = true;
                        stats.instructions += 1;
                    }
                }
            }
            stats.rounds += 1;
            if !progressed {
                stats.idle = true;
                break;
            }
        }
        stats
    }

    fn turn(&mut self, h: usize) -> Turn {
        match self.harts[h].run {
            HartRun::Halted | HartRun::Offline => return Turn::Idle,
            HartRun::Parked => {
                let slot = &mut self.harts[h];
                let Some(due) = slot.timer.take() else { return Turn::Idle };
                slot.hart.advance_to(due);
                slot.run = HartRun::Running;
                let name = slot.owner.map(|o| self.partitions[o].spec.name.as_str()).unwrap_or("-");
                self.log.push(
                    slot.hart.cycles(),
                    h,
                    EventKind::Timer,
                    format!("partition={name} due={due} pc={:#x}", slot.hart.pc),
                );
                return Turn::Woke;
            }
            HartRun::Running => {}
        }

        let owner = self.harts[h].owner.expect("running harts have an owner");
        let part = &self.partitions[owner];
        let instr = part.program.as_ref().and_then(|prog| {
            let pc = self.harts[h].hart.pc;
            let offset = pc.checked_sub(part.spec.entry)?;
            if offset % INSTR_BYTES != 0 {
                return None;
            }
            prog.script.get(usize::try_from(offset / INSTR_BYTES).ok()?).copied()
        });
        let Some(instr) = instr else {
            // Off the end of the script (or no script at all).
            self.harts[h].run = HartRun::Halted;
            self.harts[h].hart.halted = true;
            return Turn::Idle;
        };

        let slot = &mut self.harts[h];
        if !slot.started {
            slot.started = true;
            self.log.push(
                slot.hart.cycles(),
                h,
                EventKind::Boot,
                format!(
                    "partition={} stage=first-instruction pc={:#x}",
                    part.spec.name, slot.hart.pc
                ),
            );
        }
        let issued = slot.hart.cycles();
        match hart::step(&mut slot.hart, &instr, &slot.pmp, &mut self.memory, &mut slot.cost) {
            StepEvent::Normal => {}
            StepEvent::Halted => slot.run = HartRun::Halted,
            StepEvent::Trap { cause, tval } => {
                hart::enter_trap(&mut slot.hart, cause, tval, &slot.cost);
                self.handle_trap(h, issued);
            }
        }
        Turn::Executed
    }

    /// The M-mode trap path for a trap already entered on hart `h`.
    ///
    /// `issued` is the cycle at which the trapping instruction began; it is
    /// step mark (1) for ECALLs.
    pub fn handle_trap(&mut self, h: usize, issued: u64) -> TrapOutcome {
        let path = self.config.profile.trap_path;
        let owner = self.harts[h].owner.expect("traps come from owned harts");
        let (trap_cause, tval, mepc) = {
            let c = &self.harts[h].hart.csr;
            (c.mcause, c.mtval, c.mepc)
        };
        self.log.push(
            issued,
            h,
            EventKind::Trap,
            format!(
                "cause={trap_cause} ({}) mepc={mepc:#x} tval={tval:#x}",
                cause::name(trap_cause)
            ),
        );

        let mut marks = [0u64; 10];
        marks[1] = issued;
        let mut frame = {
            let slot = &mut self.harts[h];
            save_context(&mut slot.hart, &mut slot.cost, &path)
        };
        marks[2] = self.harts[h].hart.cycles();
        self.charge_alu(h, path.cause_decode);
        marks[3] = self.harts[h].hart.cycles();

        if trap_cause != cause::ECALL_FROM_S && trap_cause != cause::ECALL_FROM_U {
            return self.fault(h, owner, frame, trap_cause, tval);
        }

        self.charge_alu(h, path.dispatch);
        marks[4] = self.harts[h].hart.cycles();
        let fid = frame.regs[Reg::A7.index()];
        let mut args = [0u64; 7];
        args.copy_from_slice(&frame.regs[Reg::A0.index()..Reg::A0.index() + 7]);
        let result = if trap_cause == cause::ECALL_FROM_S {
            self.dispatch_ecall(h, fid, args)
        } else {
            EcallResult {
                status: status::NOT_SUPPORTED,
                value: 0,
                after: AfterCall::Resume,
                extra_cycles: 0,
            }
        };
        self.charge_alu(h, path.handler_body);
        self.harts[h].hart.advance(result.extra_cycles);
        marks[5] = self.harts[h].hart.cycles();

        let trap_seq = self.harts[h].ecalls;
        self.harts[h].ecalls += 1;
        let ecall_detail = format!(
            "fid={fid} a0={:#x} a1={:#x} status={} value={:#x}",
            args[0], args[1], result.status, result.value
        );

        if result.after == AfterCall::Reboot {
            self.log.push(marks[4], h, EventKind::Ecall, ecall_detail);
            let name = self.partitions[owner].spec.name.clone();
            self.partitions[owner].set_state(PartitionState::Stopped);
            self.restart(owner, &format!("partition={name} reason=self"));
            return TrapOutcome::Reboot;
        }

        frame.regs[Reg::A0.index()] = result.status as u64;
        frame.regs[Reg::A1.index()] = result.value;
        self.harts[h].hart.csr.mepc = mepc.wrapping_add(INSTR_BYTES);
        self.charge_alu(h, path.handler_return);
        marks[6] = self.harts[h].hart.cycles();
        self.charge_alu(h, path.dispatch_exit);
        marks[7] = self.harts[h].hart.cycles();
        self.charge_alu(h, path.trap_epilogue);
        marks[8] = self.harts[h].hart.cycles();
        self.return_to_guest(h, &frame);
        marks[9] = self.harts[h].hart.cycles();

        for (step, &cycle) in marks.iter().enumerate().skip(1) {
            self.log.push(
                cycle,
                h,
                EventKind::StepMark { step: step as u8, trap: trap_seq, fid },
                "",
            );
            if step == 4 {
                self.log.push(cycle, h, EventKind::Ecall, ecall_detail.clone());
            }
        }

        if result.after == AfterCall::Park {
            self.harts[h].run = HartRun::Parked;
            TrapOutcome::Park
        } else {
            TrapOutcome::Resume
        }
    }

    fn charge_alu(&mut self, h: usize, count: u64) {
        let slot = &mut self.harts[h];
        let c = slot.cost.price_n(InstrClass::Alu, count);
        slot.hart.advance(c);
    }

    fn return_to_guest(&mut self, h: usize, frame: &TrapFrame) {
        let path = self.config.profile.trap_path;
        let slot = &mut self.harts[h];
        restore_context(&mut slot.hart, frame, &mut slot.cost, &path);
        let c = slot.cost.price(InstrClass::Xret);
        slot.hart.advance(c);
        hart::mret(&mut slot.hart, &slot.cost).expect("trap path runs in M-mode");
    }

    fn fault(
        &mut self,
        h: usize,
        owner: usize,
        frame: TrapFrame,
        trap_cause: u64,
        tval: u64,
    ) -> TrapOutcome {
        let name = self.partitions[owner].spec.name.clone();
        self.log.push(
            self.harts[h].hart.cycles(),
            h,
            EventKind::Fault,
            format!(
                "partition={name} cause={trap_cause} ({}) tval={tval:#x} pc={:#x}",
                cause::name(trap_cause),
                frame.saved_pc
            ),
        );
        let action = match self.config.fault_policy {
            FaultPolicy::LogOnly => {
                let path = self.config.profile.trap_path;
                self.harts[h].hart.csr.mepc = frame.saved_pc.wrapping_add(INSTR_BYTES);
                self.charge_alu(h, path.trap_epilogue);
                self.return_to_guest(h, &frame);
                FaultAction::Skipped
            }
            FaultPolicy::Reboot { max_reboots } => {
                self.partitions[owner].set_state(PartitionState::Faulted);
                if self.partitions[owner].fault_count < max_reboots {
                    self.restart(owner, &format!("partition={name} reason=fault"));
                    FaultAction::Rebooted
                } else {
                    self.stop(owner);
                    FaultAction::Stopped
                }
            }
        };
        TrapOutcome::Fault { partition: name, cause: trap_cause, tval, action }
    }

    fn stop(&mut self, idx: usize) {
        self.partitions[idx].set_state(PartitionState::Stopped);
        let name = self.partitions[idx].spec.name.clone();
        for h in self.partitions[idx].spec.harts.clone() {
            let slot = &mut self.harts[h];
            slot.run = HartRun::Offline;
            slot.timer = None;
            self.log.push(
                slot.hart.cycles(),
                h,
                EventKind::Reboot,
                format!("partition={name} stopped"),
            );
        }
    }

    /// Reboot a partition in place: reset its harts to the entry point with
    /// zeroed registers, reprogram its PMP and bump `fault_count`. No other
    /// partition's harts, registers or PMP are touched.
    pub fn reboot_partition(&mut self, name: &str) -> Result<(), MonitorError> {
        let idx = self
            .partition_index(name)
            .ok_or_else(|| MonitorError::UnknownPartition(name.to_string()))?;
        match self.partitions[idx].state {
            PartitionState::Running => self.partitions[idx].set_state(PartitionState::Stopped),
            PartitionState::Booting => unreachable!("boot is not re-entrant"),
            PartitionState::Stopped | PartitionState::Faulted => {}
        }
        self.restart(idx, &format!("partition={name} reason=request"));
        Ok(())
    }

    fn restart(&mut self, idx: usize, detail: &str) {
        for &h in &self.partitions[idx].spec.harts {
            let slot = &self.harts[h];
            self.log.push(slot.hart.cycles(), h, EventKind::Reboot, detail);
        }
        let p = &mut self.partitions[idx];
        p.fault_count += 1;
        p.mailbox.clear();
        p.power_requests.clear();
        for &h in &p.spec.harts {
            self.harts[h].hart.csr.mstatus_mpp = Privilege::U;
            self.harts[h].hart.privilege = Privilege::M;
        }
        // start_partition never waits on a gate for a reboot.
        self.start_partition(idx, 0);
    }

    /// Reset the whole event log (handy between warm-up and measurement).
    pub fn clear_log(&mut self) {
        self.log = EventLog::default();
    }

    /// Write directly into guest memory, bypassing the PMP (test setup).
    pub fn poke(&mut self, addr: u64, width: u8, value: u64) {
        self.memory.write(usize::MAX, addr, width, value);
    }
}

enum Turn {
    Idle,
    Woke,
    Executed,
}
