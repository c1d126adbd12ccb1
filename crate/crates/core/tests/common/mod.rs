#![allow(dead_code)]

use mcmon::hart::Privilege;
use mcmon::manifest::{PartitionManifest, parse_manifest};
use mcmon::pmp::{AccessKind, AccessQuery, AddressMatching, Decision, PmpEntry};

pub fn fixture_text(name: &str) -> String {
    let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn fixture(name: &str) -> PartitionManifest {
    parse_manifest(&fixture_text(name)).unwrap()
}

pub const ALL_FIXTURES: [&str; 6] = [
    "two_partition.json",
    "single_partition.json",
    "shared_mailbox.json",
    "bad_overlap.json",
    "bad_device_shared.json",
    "bad_monitor_overlap.json",
];

/// Does entry `idx` of `entries` cover byte `b`? Written from the
/// architectural definitions, without sharing code with the crate.
fn covers(entries: &[PmpEntry], idx: usize, b: u64) -> bool {
    let e = entries[idx];
    match e.mode {
        AddressMatching::Off => false,
        AddressMatching::Tor => {
            let prev = if idx == 0 { 0 } else { entries[idx - 1].addr_reg };
            // pmpaddr(i-1) <= b>>2 < pmpaddr(i)
            prev <= b >> 2 && b >> 2 < e.addr_reg
        }
        AddressMatching::Na4 => b >> 2 == e.addr_reg,
        AddressMatching::Napot => {
            // Compare every bit above the trailing-ones run plus the zero
            // that terminates it.
            let mut g = 0u32;
            while (e.addr_reg >> g) & 1 == 1 {
                g += 1;
            }
            let shift = g + 1;
            if shift >= 64 {
                return true;
            }
            (b >> 2) >> shift == e.addr_reg >> shift
        }
    }
}

/// Per-byte, in-order reference: each byte's verdict comes from the first
/// entry covering it; an access passes only if every byte was decided by
/// the same entry (or by none) and that verdict grants it.
pub fn reference_check(entries: &[PmpEntry], q: &AccessQuery) -> Decision {
    let size = q.size.max(1);
    let first_match = |b: u64| (0..entries.len()).find(|&i| covers(entries, i, b));
    let owner = first_match(q.addr);
    for off in 1..size {
        if first_match(q.addr + off) != owner {
            return Decision::Deny;
        }
    }
    let allowed = match owner {
        None => q.privilege == Privilege::M,
        Some(i) => {
            let e = entries[i];
            let bit = match q.kind {
                AccessKind::Read => e.perms.r,
                AccessKind::Write => e.perms.w,
                AccessKind::Exec => e.perms.x,
            };
            if q.privilege == Privilege::M && !e.locked { true } else { bit }
        }
    };
    if allowed { Decision::Allow } else { Decision::Deny }
}

/// Random entry over a 16-bit toy address space (pmpaddr < 2^14).
pub fn random_entry(rng: &mut impl rand::Rng) -> PmpEntry {
    use rand::RngExt;
    let cfg: u8 = rng.random();
    let addr_reg = rng.random_range(0..1u64 << 14);
    PmpEntry::from_cfg(cfg & 0b1001_1111, addr_reg)
}

pub fn random_query(rng: &mut impl rand::Rng) -> AccessQuery {
    use rand::RngExt;
    let size = [1u64, 2, 4, 8][rng.random_range(0..4)];
    AccessQuery {
        addr: rng.random_range(0..(1u64 << 16) - 8),
        size,
        kind: [AccessKind::Read, AccessKind::Write, AccessKind::Exec][rng.random_range(0..3)],
        privilege: [Privilege::U, Privilege::S, Privilege::M][rng.random_range(0..3)],
    }
}
