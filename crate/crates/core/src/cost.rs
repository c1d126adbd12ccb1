//! Cycle pricing for guest instructions and for the monitor's trap path.
//!
//! Two built-in profiles ship with the crate. `default` uses round numbers;
//! `fu540-like` is calibrated so that, read through a 1 GHz conversion, the
//! four benchmark phases land on 460 / 660 / 71 / 48 cycles with jitter off.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("cost `{0}` must be at least 1 cycle")]
    ZeroCost(&'static str),
    #[error("unknown profile `{0}` (expected default, fu540-like, or a JSON file)")]
    UnknownProfile(String),
    #[error("reading profile {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing profile: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Pricing class of one executed instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstrClass {
    Alu,
    Load,
    Store,
    Csr,
    Ecall,
    Xret,
    Rdcycle,
    /// U-mode application request crossing into the S-mode driver.
    Ioctl,
    Halt,
}

/// Base cost per instruction class plus the two hardware trap latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrCosts {
    pub alu: u64,
    pub load: u64,
    pub store: u64,
    pub csr: u64,
    pub ecall: u64,
    pub xret: u64,
    pub rdcycle: u64,
    pub ioctl: u64,
    pub halt: u64,
    pub trap_entry_latency: u64,
    pub trap_return_latency: u64,
}

impl Default for InstrCosts {
    fn default() -> Self {
        Self {
            alu: 1,
            load: 2,
            store: 2,
            csr: 1,
            ecall: 1,
            xret: 1,
            rdcycle: 1,
            ioctl: 40,
            halt: 1,
            trap_entry_latency: 20,
            trap_return_latency: 10,
        }
    }
}

impl InstrCosts {
    pub fn base(&self, class: InstrClass) -> u64 {
        match class {
            InstrClass::Alu => self.alu,
            InstrClass::Load => self.load,
            InstrClass::Store => self.store,
            InstrClass::Csr => self.csr,
            InstrClass::Ecall => self.ecall,
            InstrClass::Xret => self.xret,
            InstrClass::Rdcycle => self.rdcycle,
            InstrClass::Ioctl => self.ioctl,
            InstrClass::Halt => self.halt,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let named = [
            ("alu", self.alu),
            ("load", self.load),
            ("store", self.store),
            ("csr", self.csr),
            ("ecall", self.ecall),
            ("xret", self.xret),
            ("rdcycle", self.rdcycle),
            ("ioctl", self.ioctl),
            ("halt", self.halt),
            ("trap_entry_latency", self.trap_entry_latency),
            ("trap_return_latency", self.trap_return_latency),
        ];
        match named.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(CostError::ZeroCost(name)),
            None => Ok(()),
        }
    }
}

/// Length of each monitor trap-path segment, in ALU-priced instructions.
/// Register save/restore are priced separately as 32 stores / 32 loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapPathCosts {
    pub save_prologue: u64,
    pub restore_epilogue: u64,
    pub cause_decode: u64,
    pub dispatch: u64,
    pub handler_body: u64,
    pub handler_return: u64,
    pub dispatch_exit: u64,
    pub trap_epilogue: u64,
    /// Per-hart setup at boot, excluding PMP CSR writes.
    pub boot_setup: u64,
}

impl Default for TrapPathCosts {
    fn default() -> Self {
        Self {
            save_prologue: 7,
            restore_epilogue: 7,
            cause_decode: 12,
            dispatch: 24,
            handler_body: 8,
            handler_return: 4,
            dispatch_exit: 2,
            trap_epilogue: 4,
            boot_setup: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    pub name: String,
    pub instr: InstrCosts,
    pub trap_path: TrapPathCosts,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self {
            name: "default".into(),
            instr: InstrCosts::default(),
            trap_path: TrapPathCosts::default(),
        }
    }
}

impl CostProfile {
    /// Calibrated against the published FU540 timings at a 1 GHz conversion.
    ///
    /// save    = ecall 1 + entry 30 + prologue 8 + 32 stores            =  71
    /// latency = save 71 + decode 45 + dispatch 344                     = 460
    /// restore = 32 loads + epilogue 5 + mret 1 + return 10             =  48
    /// overhead = latency 460 + body 100 + return 12 + exit 10
    ///          + epilogue 30 + restore 48                           = 660
    pub fn fu540_like() -> Self {
        Self {
            name: "fu540-like".into(),
            instr: InstrCosts {
                alu: 1,
                load: 1,
                store: 1,
                csr: 1,
                ecall: 1,
                xret: 1,
                rdcycle: 1,
                ioctl: 120,
                halt: 1,
                trap_entry_latency: 30,
                trap_return_latency: 10,
            },
            trap_path: TrapPathCosts {
                save_prologue: 8,
                restore_epilogue: 5,
                cause_decode: 45,
                dispatch: 344,
                handler_body: 100,
                handler_return: 12,
                dispatch_exit: 10,
                trap_epilogue: 30,
                boot_setup: 200,
            },
        }
    }

    /// Resolve `default`, `fu540-like`, or a path to a JSON profile.
    pub fn resolve(spec: &str) -> Result<Self, CostError> {
        let profile = match spec {
            "default" => Self::default(),
            "fu540-like" => Self::fu540_like(),
            path if Path::new(path).is_file() => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| CostError::Io { path: path.to_string(), source })?;
                serde_json::from_str(&text)?
            }
            other => return Err(CostError::UnknownProfile(other.to_string())),
        };
        profile.instr.validate()?;
        Ok(profile)
    }
}

/// Uniform integer noise in `[0, max]` added to every priced instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JitterConfig {
    pub max: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct Jitter {
    max: u64,
    rng: ChaCha8Rng,
}

/// Per-hart pricing state. Each hart owns its own jitter stream so one
/// hart's instruction mix never perturbs another hart's timing.
#[derive(Debug, Clone)]
pub struct CycleCostModel {
    costs: InstrCosts,
    jitter: Option<Jitter>,
}

impl CycleCostModel {
    pub fn new(costs: InstrCosts) -> Self {
        Self { costs, jitter: None }
    }

    /// Enable jitter; `stream` separates independent noise sequences that
    /// share one seed (one stream per hart).
    pub fn with_jitter(mut self, cfg: JitterConfig, stream: u64) -> Self {
        if cfg.max > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            self.jitter = Some(Jitter { max: cfg.max, rng });
        }
        self
    }

    pub fn costs(&self) -> &InstrCosts {
        &self.costs
    }

    /// Price one instruction of `class`, drawing jitter if enabled.
    pub fn price(&mut self, class: InstrClass) -> u64 {
        let noise = match self.jitter.as_mut() {
            Some(j) => j.rng.random_range(0..=j.max),
            None => 0,
        };
        self.costs.base(class) + noise
    }

    /// Price `count` instructions of one class.
    pub fn price_n(&mut self, class: InstrClass, count: u64) -> u64 {
        (0..count).map(|_| self.price(class)).sum()
    }

    pub fn trap_entry_latency(&self) -> u64 {
        self.costs.trap_entry_latency
    }

    pub fn trap_return_latency(&self) -> u64 {
        self.costs.trap_return_latency
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_costs_match_documented_values() {
        let c = InstrCosts::default();
        assert_eq!((c.alu, c.csr, c.load, c.store), (1, 1, 2, 2));
        assert_eq!((c.trap_entry_latency, c.trap_return_latency), (20, 10));
        c.validate().unwrap();
    }

    #[test]
    fn zero_cost_rejected() {
        let c = InstrCosts { load: 0, ..InstrCosts::default() };
        assert!(matches!(c.validate(), Err(CostError::ZeroCost("load"))));
    }

    #[test]
    fn pricing_without_jitter_is_pure() {
        let mut m = CycleCostModel::new(InstrCosts::default());
        for _ in 0..10 {
            assert_eq!(m.price(InstrClass::Store), 2);
        }
        assert_eq!(m.price_n(InstrClass::Alu, 5), 5);
    }

    #[test]
    fn jitter_is_bounded_and_seeded() {
        let cfg = JitterConfig { max: 3, seed: 7 };
        let mut a = CycleCostModel::new(InstrCosts::default()).with_jitter(cfg, 0);
        let mut b = CycleCostModel::new(InstrCosts::default()).with_jitter(cfg, 0);
        let xs: Vec<u64> = (0..200).map(|_| a.price(InstrClass::Alu)).collect();
        let ys: Vec<u64> = (0..200).map(|_| b.price(InstrClass::Alu)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|c| (1..=4).contains(c)));
        assert!(xs.iter().any(|c| *c != xs[0]));
    }

    #[test]
    fn jitter_streams_differ() {
        let cfg = JitterConfig { max: 5, seed: 1 };
        let mut a = CycleCostModel::new(InstrCosts::default()).with_jitter(cfg, 0);
        let mut b = CycleCostModel::new(InstrCosts::default()).with_jitter(cfg, 1);
        let xs: Vec<u64> = (0..64).map(|_| a.price(InstrClass::Alu)).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.price(InstrClass::Alu)).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn builtin_profiles_resolve() {
        assert_eq!(CostProfile::resolve("default").unwrap().name, "default");
        assert_eq!(CostProfile::resolve("fu540-like").unwrap().name, "fu540-like");
        assert!(matches!(CostProfile::resolve("nope"), Err(CostError::UnknownProfile(_))));
    }
}
