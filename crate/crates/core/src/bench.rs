//! Trap-path benchmark: run the driver guest, cut per-iteration samples out
//! of the step marks, summarise, and render CSV or histogram data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostProfile, JitterConfig};
use crate::guest::build_bench_driver;
use crate::manifest::{Criticality, PartitionManifest};
use crate::monitor::{
    BootError, EventKind, EventLog, FaultPolicy, ServiceId, SystemConfig, boot_system,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no samples to summarise")]
    Empty,
    #[error("clock frequency must be positive, got {0}")]
    BadClock(f64),
    #[error("histogram bin width must be positive, got {0}")]
    BadBin(f64),
    #[error("ECALL #{trap} on hart {hart} is missing step mark {step}")]
    MissingMark { hart: usize, trap: u64, step: u8 },
    #[error("expected {expected} samples, the driver produced {got}")]
    SampleCount { expected: usize, got: usize },
    #[error("no partition can host the benchmark driver: {0}")]
    NoDriver(String),
    #[error(transparent)]
    Boot(#[from] BootError),
}

/// One timed span of the trap path, named by the step marks it spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchPhase {
    Latency1to4,
    Overhead1to9,
    SaveContextAt1,
    RestoreContextAt9,
}

impl BenchPhase {
    pub const ALL: [BenchPhase; 4] = [
        BenchPhase::Latency1to4,
        BenchPhase::Overhead1to9,
        BenchPhase::SaveContextAt1,
        BenchPhase::RestoreContextAt9,
    ];

    /// (start, end) step marks.
    pub fn marks(self) -> (u8, u8) {
        match self {
            BenchPhase::Latency1to4 => (1, 4),
            BenchPhase::Overhead1to9 => (1, 9),
            BenchPhase::SaveContextAt1 => (1, 2),
            BenchPhase::RestoreContextAt9 => (8, 9),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchPhase::Latency1to4 => "latency_1to4",
            BenchPhase::Overhead1to9 => "overhead_1to9",
            BenchPhase::SaveContextAt1 => "save_context_at1",
            BenchPhase::RestoreContextAt9 => "restore_context_at9",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub stddev: f64,
    pub min: u64,
    pub max: u64,
}

/// Mean, population standard deviation and extremes (single pass).
pub fn compute_stats(samples: &[u64]) -> Result<Stats, BenchError> {
    let (&first, _) = samples.split_first().ok_or(BenchError::Empty)?;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let (mut min, mut max) = (first, first);
    for (i, &s) in samples.iter().enumerate() {
        let x = s as f64;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
        min = min.min(s);
        max = max.max(s);
    }
    let stddev = (m2 / samples.len() as f64).max(0.0).sqrt();
    Ok(Stats { mean, stddev, min, max })
}

pub fn cycles_to_us(cycles: f64, clock_hz: f64) -> Result<f64, BenchError> {
    if clock_hz.is_nan() || clock_hz <= 0.0 {
        return Err(BenchError::BadClock(clock_hz));
    }
    Ok(cycles * 1e6 / clock_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub phase: BenchPhase,
    pub samples: Vec<u64>,
    pub mean: f64,
    pub stddev: f64,
    pub min: u64,
    pub max: u64,
    pub clock_hz: f64,
}

impl BenchReport {
    pub fn new(phase: BenchPhase, samples: Vec<u64>, clock_hz: f64) -> Result<Self, BenchError> {
        cycles_to_us(0.0, clock_hz)?;
        let s = compute_stats(&samples)?;
        Ok(Self {
            phase,
            samples,
            mean: s.mean,
            stddev: s.stddev,
            min: s.min,
            max: s.max,
            clock_hz,
        })
    }

    pub fn mean_us(&self) -> f64 {
        self.mean * 1e6 / self.clock_hz
    }

    pub fn stddev_us(&self) -> f64 {
        self.stddev * 1e6 / self.clock_hz
    }
}

/// Step-mark cycles of every ECALL with `fid` on `hart`, in issue order.
/// Index `k` of each array holds mark `k`; index 0 is unused.
pub fn collect_marks(log: &EventLog, hart: usize, fid: u64) -> Result<Vec<[u64; 10]>, BenchError> {
    let mut by_trap: BTreeMap<u64, [Option<u64>; 10]> = BTreeMap::new();
    for e in log.events().iter().filter(|e| e.hart == hart) {
        if let EventKind::StepMark { step, trap, fid: f } = e.kind
            && f == fid
        {
            by_trap.entry(trap).or_default()[step as usize] = Some(e.cycle);
        }
    }
    by_trap
        .into_iter()
        .map(|(trap, marks)| {
            let mut out = [0; 10];
            for step in 1..=9u8 {
                out[step as usize] =
                    marks[step as usize].ok_or(BenchError::MissingMark { hart, trap, step })?;
            }
            Ok(out)
        })
        .collect()
}

/// Per-iteration samples of `phase` from the marks of one driver run.
pub fn measure(
    marks: &[[u64; 10]],
    phase: BenchPhase,
    iters: usize,
    clock_hz: f64,
) -> Result<BenchReport, BenchError> {
    if marks.len() != iters {
        return Err(BenchError::SampleCount { expected: iters, got: marks.len() });
    }
    let (a, b) = phase.marks();
    let samples = marks.iter().map(|m| m[b as usize] - m[a as usize]).collect();
    BenchReport::new(phase, samples, clock_hz)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub profile: CostProfile,
    pub iters: usize,
    pub seed: u64,
    /// Per-instruction jitter bound in cycles; `None` or 0 disables it.
    pub jitter: Option<u64>,
    pub clock_hz: f64,
    /// Partition that hosts the driver; defaults to the first non-critical
    /// partition, or the first partition if all are critical.
    pub partition: Option<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            profile: CostProfile::fu540_like(),
            iters: 500,
            seed: 42,
            jitter: None,
            clock_hz: 1e9,
            partition: None,
        }
    }
}

/// Where the driver runs and where it keeps its samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverPlacement {
    pub partition: String,
    pub hart: usize,
    pub sample_buf: u64,
}

pub fn place_driver(
    m: &PartitionManifest,
    wanted: Option<&str>,
    iters: usize,
) -> Result<DriverPlacement, BenchError> {
    let p = match wanted {
        Some(name) => m
            .partition(name)
            .ok_or_else(|| BenchError::NoDriver(format!("no partition named `{name}`")))?,
        None => m
            .partitions
            .iter()
            .find(|p| p.criticality == Criticality::NonCritical)
            .or_else(|| m.partitions.first())
            .ok_or_else(|| BenchError::NoDriver("manifest has no partitions".into()))?,
    };
    let hart = *p
        .harts
        .first()
        .ok_or_else(|| BenchError::NoDriver(format!("`{}` owns no hart", p.name)))?;
    let need = 8 * iters as u64;
    let region = p
        .regions
        .iter()
        .find(|r| r.perms.w && r.perms.x && r.size / 2 >= need)
        .ok_or_else(|| {
            BenchError::NoDriver(format!("`{}` has no writable region for {iters} samples", p.name))
        })?;
    // Upper half of the code region, clear of the script itself.
    let sample_buf = (region.base + region.size / 2) & !7;
    Ok(DriverPlacement { partition: p.name.clone(), hart, sample_buf })
}

/// Boot `m` with the driver in single-hart mode, run it to completion and
/// report all four phases.
pub fn run_benchmark(
    m: &PartitionManifest,
    cfg: &BenchConfig,
) -> Result<Vec<BenchReport>, BenchError> {
    cycles_to_us(0.0, cfg.clock_hz)?;
    let place = place_driver(m, cfg.partition.as_deref(), cfg.iters)?;
    let driver = build_bench_driver(&place.partition, cfg.iters, place.sample_buf);
    let sys_cfg = SystemConfig {
        profile: cfg.profile.clone(),
        jitter: cfg.jitter.filter(|j| *j > 0).map(|max| JitterConfig { max, seed: cfg.seed }),
        fault_policy: FaultPolicy::LogOnly,
        only_hart: Some(place.hart),
        ..SystemConfig::default()
    };
    let mut sys = boot_system(m, vec![driver], sys_cfg)?;
    sys.run(cfg.iters as u64 * 8 + 64);
    let marks = collect_marks(sys.log(), place.hart, ServiceId::BenchNop.fid())?;
    BenchPhase::ALL.iter().map(|&phase| measure(&marks, phase, cfg.iters, cfg.clock_hz)).collect()
}

/// `phase,iter,cycles,us`, one row per sample.
pub fn emit_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("phase,iter,cycles,us\n");
    for r in reports {
        for (i, &c) in r.samples.iter().enumerate() {
            let us = c as f64 * 1e6 / r.clock_hz;
            let _ = writeln!(out, "{},{i},{c},{us}", r.phase.name());
        }
    }
    out
}

/// `phase,bin_lo_us,bin_hi_us,count`. Bins are contiguous from the one
/// holding the minimum to the one holding the maximum, so empty bins in
/// between are listed with a zero count.
pub fn emit_histogram(reports: &[BenchReport], bin_us: f64) -> Result<String, BenchError> {
    if bin_us.is_nan() || bin_us <= 0.0 {
        return Err(BenchError::BadBin(bin_us));
    }
    // Absorbs decimal representation error, e.g. 0.29 / 0.01 = 28.999...
    const EPS: f64 = 1e-9;
    let mut out = String::from("phase,bin_lo_us,bin_hi_us,count\n");
    for r in reports {
        let bin_of = |c: u64| ((c as f64 * 1e6 / r.clock_hz) / bin_us + EPS).floor() as i64;
        let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
        for &c in &r.samples {
            *counts.entry(bin_of(c)).or_default() += 1;
        }
        let (Some(&lo), Some(&hi)) = (counts.keys().next(), counts.keys().next_back()) else {
            continue;
        };
        for b in lo..=hi {
            let n = counts.get(&b).copied().unwrap_or(0);
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{n}",
                r.phase.name(),
                b as f64 * bin_us,
                (b + 1) as f64 * bin_us
            );
        }
    }
    Ok(out)
}

/// Human-readable summary, one line per phase.
pub fn summary(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{:<20} n={} mean={:.3} cyc ({:.6} us) sigma={:.3} cyc ({:.6} us) min={} max={}",
            r.phase.name(),
            r.samples.len(),
            r.mean,
            r.mean_us(),
            r.stddev,
            r.stddev_us(),
            r.min,
            r.max
        );
    }
    out
}
