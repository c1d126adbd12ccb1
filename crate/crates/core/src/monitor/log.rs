//! Line-oriented event log:
//! `cycle=<n> hart=<id> event=<KIND> detail=<...>`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Boot,
    Trap,
    Ecall,
    Fault,
    Reboot,
    Timer,
    /// Trap-path phase `step` (1..=9) of ECALL number `trap` on this hart.
    StepMark {
        step: u8,
        trap: u64,
        fid: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub cycle: u64,
    pub hart: usize,
    pub kind: EventKind,
    pub detail: String,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cycle={} hart={} event=", self.cycle, self.hart)?;
        match self.kind {
            EventKind::Boot => f.write_str("BOOT")?,
            EventKind::Trap => f.write_str("TRAP")?,
            EventKind::Ecall => f.write_str("ECALL")?,
            EventKind::Fault => f.write_str("FAULT")?,
            EventKind::Reboot => f.write_str("REBOOT")?,
            EventKind::Timer => f.write_str("TIMER")?,
            EventKind::StepMark { step, .. } => write!(f, "STEP-MARK({step})")?,
        }
        match self.kind {
            EventKind::StepMark { trap, fid, .. } => write!(f, " detail=trap={trap} fid={fid}"),
            _ => write!(f, " detail={}", self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, cycle: u64, hart: usize, kind: EventKind, detail: impl Into<String>) {
        self.events.push(Event { cycle, hart, kind, detail: detail.into() });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events that happened on any of `harts`, in log order.
    pub fn for_harts<'a>(&'a self, harts: &'a [usize]) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| harts.contains(&e.hart))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}
