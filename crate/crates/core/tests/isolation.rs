mod common;

use proptest::prelude::*;

use common::fixture;
use mcmon::guest::GuestProgram;
use mcmon::hart::{AluOp, Instr, Privilege, Reg};
use mcmon::manifest::PartitionManifest;
use mcmon::monitor::{FaultPolicy, SystemConfig, boot_system};
use mcmon::pmp::{AccessKind, AccessQuery, Decision, RegionSpec};

/// Addresses near every interesting boundary of the two-partition fixture.
fn probe_addr() -> impl Strategy<Value = u64> {
    let anchors = vec![
        0x8000_0000u64,
        0x801f_fff8,
        0x8020_0000,
        0x803f_fff8,
        0x8040_0000,
        0x9040_0000,
        0x1001_0000,
        0x1001_1000,
        0x1001_2000,
        0x7fff_fff8,
    ];
    (prop::sample::select(anchors), -64i64..64).prop_map(|(a, d)| a.wrapping_add_signed(d * 8))
}

fn writable(m: &PartitionManifest, name: &str) -> Vec<RegionSpec> {
    let p = m.partition(name).unwrap();
    m.pmp_regions(p).into_iter().filter(|r| r.perms.w).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn committed_writes_stay_in_the_writer_partition(
        linux_addrs in prop::collection::vec(probe_addr(), 1..24),
        rtos_addrs in prop::collection::vec(probe_addr(), 1..24),
    ) {
        let m = fixture("two_partition.json");
        let script = |addrs: &[u64]| {
            let mut s = vec![Instr::Alu(AluOp::Li { rd: Reg::T0, imm: u64::MAX })];
            s.extend(addrs.iter().map(|&addr| Instr::Store { addr, width: 8, rs: Reg::T0 }));
            s.push(Instr::Halt);
            s
        };
        let programs = vec![
            GuestProgram::new("l", "linux", script(&linux_addrs)),
            GuestProgram::new("r", "freertos", script(&rtos_addrs)),
        ];
        let cfg = SystemConfig { fault_policy: FaultPolicy::LogOnly, ..SystemConfig::default() };
        let mut sys = boot_system(&m, programs, cfg).unwrap();
        sys.memory_mut().enable_journal();
        sys.run(10_000);

        let names = ["freertos", "linux"];
        let hart_of = |name: &str| m.partition(name).unwrap().harts[0];
        for rec in sys.memory().journal() {
            let me = names.iter().copied().find(|n| hart_of(n) == rec.hart).unwrap();
            let other = names.iter().copied().find(|n| *n != me).unwrap();
            let q = AccessQuery {
                addr: rec.addr,
                size: u64::from(rec.width),
                kind: AccessKind::Write,
                privilege: Privilege::S,
            };
            prop_assert_eq!(sys.hart_slot(rec.hart).pmp.check_access(&q), Decision::Allow);
            let probe = RegionSpec::new(rec.addr, u64::from(rec.width), Default::default(), false);
            prop_assert!(writable(&m, other).iter().all(|r| !r.overlaps(&probe)));
            prop_assert!(!m.monitor.region.overlaps(rec.addr, u64::from(rec.width)));
        }
        // Every store that the manifest grants is committed; no other one is.
        for (name, addrs) in [("linux", &linux_addrs), ("freertos", &rtos_addrs)] {
            let mut want: Vec<u64> = addrs
                .iter()
                .copied()
                .filter(|&a| writable(&m, name).iter().any(|r| r.contains(a, 8)))
                .collect();
            let mut got: Vec<u64> = sys
                .memory()
                .journal()
                .iter()
                .filter(|r| r.hart == hart_of(name))
                .map(|r| r.addr)
                .collect();
            want.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }
}

#[test]
fn monitor_region_is_never_reachable_from_s_or_u() {
    for name in ["two_partition.json", "single_partition.json", "shared_mailbox.json"] {
        let m = fixture(name);
        let sys = boot_system(&m, Vec::new(), SystemConfig::default()).unwrap();
        let mon = m.monitor.region;
        let mut probes: Vec<u64> = (0..mon.size).step_by(0x1000).map(|o| mon.base + o).collect();
        probes.extend([mon.base, mon.base + mon.size - 8, mon.base + mon.size - 1]);
        for p in &m.partitions {
            for &h in &p.harts {
                let pmp = &sys.hart_slot(h).pmp;
                for &addr in &probes {
                    for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Exec] {
                        for privilege in [Privilege::S, Privilege::U] {
                            for size in [1, 4, 8] {
                                let q = AccessQuery { addr, size, kind, privilege };
                                assert_eq!(pmp.check_access(&q), Decision::Deny, "{name} {q:?}");
                            }
                        }
                    }
                }
                // A straddling access is denied too.
                let q = AccessQuery {
                    addr: mon.base + mon.size - 4,
                    size: 8,
                    kind: AccessKind::Read,
                    privilege: Privilege::S,
                };
                assert_eq!(pmp.check_access(&q), Decision::Deny);
            }
        }
    }
}

#[test]
fn shared_read_only_window_is_readable_not_writable() {
    let m = fixture("shared_mailbox.json");
    let sys = boot_system(&m, Vec::new(), SystemConfig::default()).unwrap();
    let linux = m.partition("linux").unwrap();
    let pmp = &sys.hart_slot(linux.harts[0]).pmp;
    let window = linux.regions.iter().find(|r| !r.perms.w).unwrap();
    let q = |kind| AccessQuery { addr: window.base, size: 8, kind, privilege: Privilege::S };
    assert_eq!(pmp.check_access(&q(AccessKind::Read)), Decision::Allow);
    assert_eq!(pmp.check_access(&q(AccessKind::Write)), Decision::Deny);
}
