use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcmon::bench::{self, BenchConfig, BenchError};
use mcmon::cost::CostProfile;
use mcmon::guest::{GuestProgram, build_bench_driver, build_fault_injector, build_rtos_task};
use mcmon::manifest::{Criticality, PartitionManifest, parse_manifest, validate};
use mcmon::monitor::{BootError, SystemConfig, boot_system};
use mcmon::pmp::{PmpUnit, compile_regions};

#[derive(Parser)]
#[command(name = "mcmon", version, about = "RISC-V partition monitor simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the trap-path benchmark and write per-iteration samples as CSV.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// `default`, `fu540-like`, or a JSON profile file.
        #[arg(long, default_value = "fu540-like")]
        profile: String,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000.0)]
        clock_mhz: f64,
        /// Per-instruction jitter bound in cycles, or `off`.
        #[arg(long, default_value = "off", value_parser = parse_jitter)]
        jitter: Jitter,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        bin_us: f64,
        /// Partition hosting the driver (default: first non-critical).
        #[arg(long)]
        partition: Option<String>,
    },
    /// Check a manifest; exit status 1 if it has violations.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print the PMP entries programmed for one partition.
    PmpDump {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        partition: String,
    },
    /// Boot, run an RTOS task, a rich-OS driver and one fault, print the log.
    Demo {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "default")]
        profile: String,
        /// Load guest scripts from files instead of the built-in workloads.
        #[arg(long = "guest")]
        guests: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy)]
struct Jitter(Option<u64>);

fn parse_jitter(s: &str) -> Result<Jitter, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(Jitter(None));
    }
    s.parse::<u64>()
        .map(|j| Jitter(Some(j)))
        .map_err(|_| format!("expected a cycle count or `off`, got `{s}`"))
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Boot(b) => b.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<BootError> for Failure {
    fn from(e: BootError) -> Self {
        match e {
            BootError::Invalid(_) | BootError::Pmp { .. } => Failure::Invalid(e.to_string()),
            BootError::UnknownPartition { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_manifest(path: &Path) -> Result<PartitionManifest, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("reading {}: {e}", path.display())))?;
    parse_manifest(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| Failure::Runtime(format!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn profile(spec: &str) -> Result<CostProfile, Failure> {
    CostProfile::resolve(spec).map_err(|e| Failure::Runtime(e.to_string()))
}

/// The built-in demo: RTOS periodic task on every critical partition, the
/// benchmark driver on the first non-critical one followed by a store into
/// the first critical partition's RAM.
fn demo_programs(m: &PartitionManifest) -> Vec<GuestProgram> {
    let mut programs = Vec::new();
    let mut victim = None;
    for p in &m.partitions {
        let Some(region) = p.regions.iter().find(|r| r.perms.w) else { continue };
        match p.criticality {
            Criticality::Critical => {
                let uart = p.devices.first().and_then(|d| m.device(d)).map(|d| d.base);
                let data = region.base + region.size / 2;
                programs.push(build_rtos_task(&p.name, 2000, 3, data, uart));
                victim.get_or_insert(data);
            }
            Criticality::NonCritical => {}
        }
    }
    if let Some(p) = m.partitions.iter().find(|p| p.criticality == Criticality::NonCritical)
        && let Some(region) = p.regions.iter().find(|r| r.perms.w)
    {
        let mut driver = build_bench_driver(&p.name, 3, region.base + region.size / 2);
        driver.script.pop();
        if let Some(target) = victim {
            driver.script.extend(build_fault_injector(&p.name, target).script);
        }
        driver.name = "rich-os".into();
        programs.push(driver);
    }
    programs
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run {
            manifest,
            profile: prof,
            iters,
            seed,
            clock_mhz,
            jitter,
            out,
            hist,
            bin_us,
            partition,
        } => {
            let m = load_manifest(&manifest)?;
            if iters == 0 {
                return Err(Failure::Runtime("--iters must be at least 1".into()));
            }
            let cfg = BenchConfig {
                profile: profile(&prof)?,
                iters,
                seed,
                jitter: jitter.0,
                clock_hz: clock_mhz * 1e6,
                partition,
            };
            let reports = bench::run_benchmark(&m, &cfg)?;
            write_out(out.as_deref(), &bench::emit_csv(&reports))?;
            if let Some(h) = hist {
                write_out(Some(&h), &bench::emit_histogram(&reports, bin_us)?)?;
            }
            eprint!("{}", bench::summary(&reports));
            Ok(())
        }
        Cmd::Validate { manifest } => {
            let m = load_manifest(&manifest)?;
            let violations = validate(&m);
            for v in &violations {
                println!("{}: {v}", v.kind());
            }
            if violations.is_empty() {
                println!("ok: {} partition(s)", m.partitions.len());
                Ok(())
            } else {
                Err(Failure::Invalid(format!("{} violation(s)", violations.len())))
            }
        }
        Cmd::PmpDump { manifest, partition } => {
            let m = load_manifest(&manifest)?;
            let p = m
                .partition(&partition)
                .ok_or_else(|| Failure::Runtime(format!("no partition named `{partition}`")))?;
            let entries = compile_regions(&m.pmp_regions(p))
                .map_err(|e| Failure::Invalid(format!("`{partition}`: {e}")))?;
            print!("{}", PmpUnit::from_entries(&entries).dump());
            Ok(())
        }
        Cmd::Demo { manifest, profile: prof, guests } => {
            let m = load_manifest(&manifest)?;
            let programs = if guests.is_empty() {
                demo_programs(&m)
            } else {
                guests
                    .iter()
                    .map(GuestProgram::from_file)
                    .collect::<Result<_, _>>()
                    .map_err(|e| Failure::Runtime(e.to_string()))?
            };
            let cfg = SystemConfig { profile: profile(&prof)?, ..SystemConfig::default() };
            let mut sys = boot_system(&m, programs, cfg)?;
            sys.run(1_000_000);
            print!("{}", sys.log().render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
