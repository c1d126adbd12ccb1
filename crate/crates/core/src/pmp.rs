//! Physical Memory Protection unit.
//!
//! Bit-accurate entry encoding (`pmpcfg` octet + `pmpaddr` register), the
//! OFF/TOR/NA4/NAPOT matching modes, lock semantics and lowest-index
//! priority. Granularity is fixed at 4 bytes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::hart::Privilege;

/// Number of entries per hart.
pub const PMP_ENTRY_COUNT: usize = 16;

/// `pmpaddr` holds bits 55:2 of a physical address on RV64.
pub const PMPADDR_MASK: u64 = 0x003F_FFFF_FFFF_FFFF;

const CFG_R: u8 = 1 << 0;
const CFG_W: u8 = 1 << 1;
const CFG_X: u8 = 1 << 2;
const CFG_A_SHIFT: u8 = 3;
const CFG_L: u8 = 1 << 7;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PmpError {
    #[error("NAPOT size {0:#x} is not a power of two of at least 8 bytes")]
    NapotSize(u64),
    #[error("NAPOT base {base:#x} is not aligned to its size {size:#x}")]
    NapotAlignment { base: u64, size: u64 },
    #[error("region [{base:#x}, +{size:#x}) is not 4-byte granular")]
    Granularity { base: u64, size: u64 },
    #[error("region at {0:#x} is empty")]
    EmptyRegion(u64),
    #[error("region [{base:#x}, +{size:#x}) lies outside the 56-bit physical address space")]
    OutOfRange { base: u64, size: u64 },
    #[error(
        "region #{region} [{base:#x}, +{size:#x}) needs {needed} PMP entries, only {budget} available"
    )]
    BudgetExceeded { region: usize, base: u64, size: u64, needed: usize, budget: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl Perms {
    pub const NONE: Perms = Perms { r: false, w: false, x: false };
    pub const R: Perms = Perms { r: true, w: false, x: false };
    pub const RW: Perms = Perms { r: true, w: true, x: false };
    pub const RX: Perms = Perms { r: true, w: false, x: true };
    pub const RWX: Perms = Perms { r: true, w: true, x: true };

    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.r,
            AccessKind::Write => self.w,
            AccessKind::Exec => self.x,
        }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (set, c) in [(self.r, 'r'), (self.w, 'w'), (self.x, 'x')] {
            if set {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Perms {
    type Err = String;

    /// Accepts any subset of `r`, `w`, `x` written in that order (`""`,
    /// `"r"`, `"rx"`, ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut rest = s;
        let mut take = |c: char| match rest.strip_prefix(c) {
            Some(r) => {
                rest = r;
                true
            }
            None => false,
        };
        let p = Perms { r: take('r'), w: take('w'), x: take('x') };
        if !rest.is_empty() {
            return Err(format!("malformed permissions `{s}` (expected subset of `rwx`)"));
        }
        Ok(p)
    }
}

impl Serialize for Perms {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum AddressMatching {
    #[default]
    Off = 0,
    Tor = 1,
    Na4 = 2,
    Napot = 3,
}

impl AddressMatching {
    fn from_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0 => AddressMatching::Off,
            1 => AddressMatching::Tor,
            2 => AddressMatching::Na4,
            _ => AddressMatching::Napot,
        }
    }
}

impl fmt::Display for AddressMatching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AddressMatching::Off => "OFF",
            AddressMatching::Tor => "TOR",
            AddressMatching::Na4 => "NA4",
            AddressMatching::Napot => "NAPOT",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PmpEntry {
    pub perms: Perms,
    pub mode: AddressMatching,
    pub locked: bool,
    /// Raw `pmpaddr` value: the address shifted right by 2.
    pub addr_reg: u64,
}

impl PmpEntry {
    pub fn off(addr_reg: u64) -> Self {
        Self { addr_reg, ..Self::default() }
    }

    /// The `pmpcfg` octet for this entry.
    pub fn cfg_byte(&self) -> u8 {
        let mut b = (self.mode as u8) << CFG_A_SHIFT;
        if self.perms.r {
            b |= CFG_R;
        }
        if self.perms.w {
            b |= CFG_W;
        }
        if self.perms.x {
            b |= CFG_X;
        }
        if self.locked {
            b |= CFG_L;
        }
        b
    }

    pub fn from_cfg(cfg: u8, addr_reg: u64) -> Self {
        Self {
            perms: Perms { r: cfg & CFG_R != 0, w: cfg & CFG_W != 0, x: cfg & CFG_X != 0 },
            mode: AddressMatching::from_bits(cfg >> CFG_A_SHIFT),
            locked: cfg & CFG_L != 0,
            addr_reg: addr_reg & PMPADDR_MASK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Exec,
}

/// A request to access the byte range `[addr, addr + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessQuery {
    pub addr: u64,
    pub size: u64,
    pub kind: AccessKind,
    pub privilege: Privilege,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Allow,
    Deny,
}

/// Encode a naturally aligned power-of-two region as a `pmpaddr` value.
pub fn napot_encode(base: u64, size: u64) -> Result<u64, PmpError> {
    if size < 8 || !size.is_power_of_two() {
        return Err(PmpError::NapotSize(size));
    }
    if !base.is_multiple_of(size) {
        return Err(PmpError::NapotAlignment { base, size });
    }
    let value = (base >> 2) | ((size >> 3) - 1);
    if value & !PMPADDR_MASK != 0 {
        return Err(PmpError::OutOfRange { base, size });
    }
    Ok(value)
}

/// Inverse of [`napot_encode`]: the trailing-ones run gives the size.
pub fn napot_decode(addr_reg: u64) -> (u64, u64) {
    let ones = addr_reg.trailing_ones();
    let size = 8u64 << ones;
    let base = (addr_reg & !((1u64 << ones) - 1)) << 2;
    (base, size)
}

/// The set of entries programmed on one hart.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PmpUnit {
    entries: Vec<PmpEntry>,
}

impl Default for PmpUnit {
    fn default() -> Self {
        Self { entries: vec![PmpEntry::default(); PMP_ENTRY_COUNT] }
    }
}

impl PmpUnit {
    /// Program `entries` into slots 0.., leaving the rest OFF.
    ///
    /// # Panics
    /// If more than [`PMP_ENTRY_COUNT`] entries are supplied.
    pub fn from_entries(entries: &[PmpEntry]) -> Self {
        assert!(
            entries.len() <= PMP_ENTRY_COUNT,
            "{} entries exceed the {PMP_ENTRY_COUNT}-entry unit",
            entries.len()
        );
        let mut unit = Self::default();
        unit.entries[..entries.len()].copy_from_slice(entries);
        unit
    }

    pub fn entries(&self) -> &[PmpEntry] {
        &self.entries
    }

    pub fn set(&mut self, idx: usize, entry: PmpEntry) {
        self.entries[idx] = entry;
    }

    /// Byte range `[lo, hi)` matched by entry `idx`, or `None` if it cannot
    /// match anything. TOR uses the raw `pmpaddr` of the previous slot as its
    /// lower bound, whatever that slot's mode.
    pub fn region(&self, idx: usize) -> Option<(u128, u128)> {
        let e = &self.entries[idx];
        let addr = u128::from(e.addr_reg);
        let (lo, hi) = match e.mode {
            AddressMatching::Off => return None,
            AddressMatching::Tor => {
                let lo = if idx == 0 { 0 } else { u128::from(self.entries[idx - 1].addr_reg) };
                (lo << 2, addr << 2)
            }
            AddressMatching::Na4 => (addr << 2, (addr << 2) + 4),
            AddressMatching::Napot => {
                let ones = e.addr_reg.trailing_ones();
                let base = (addr & !((1u128 << ones) - 1)) << 2;
                (base, base + (8u128 << ones))
            }
        };
        (lo < hi).then_some((lo, hi))
    }

    pub fn check_access(&self, q: &AccessQuery) -> Decision {
        let lo = u128::from(q.addr);
        let hi = lo + u128::from(q.size.max(1));
        for (idx, e) in self.entries.iter().enumerate() {
            let Some((rlo, rhi)) = self.region(idx) else { continue };
            if hi <= rlo || lo >= rhi {
                continue;
            }
            if lo < rlo || hi > rhi {
                return Decision::Deny;
            }
            let granted = (q.privilege == Privilege::M && !e.locked) || e.perms.allows(q.kind);
            return if granted { Decision::Allow } else { Decision::Deny };
        }
        if q.privilege == Privilege::M { Decision::Allow } else { Decision::Deny }
    }

    /// One line per entry:
    /// `idx A=<mode> L=<0|1> RWX=<bits> addr_reg=<hex> region=[lo,hi)`.
    /// Entries that match nothing print `region=-`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (idx, e) in self.entries.iter().enumerate() {
            let region = match self.region(idx) {
                Some((lo, hi)) => format!("[{lo:#x},{hi:#x})"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{idx} A={} L={} RWX={}{}{} addr_reg={:#x} region={region}\n",
                e.mode,
                u8::from(e.locked),
                u8::from(e.perms.r),
                u8::from(e.perms.w),
                u8::from(e.perms.x),
                e.addr_reg,
            ));
        }
        out
    }
}

/// A declarative region to be protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionSpec {
    pub base: u64,
    pub size: u64,
    pub perms: Perms,
    pub lock: bool,
}

impl RegionSpec {
    pub fn new(base: u64, size: u64, perms: Perms, lock: bool) -> Self {
        Self { base, size, perms, lock }
    }

    pub fn end(&self) -> u128 {
        u128::from(self.base) + u128::from(self.size)
    }

    pub fn overlaps(&self, other: &RegionSpec) -> bool {
        u128::from(self.base) < other.end() && u128::from(other.base) < self.end()
    }

    pub fn contains(&self, addr: u64, size: u64) -> bool {
        u128::from(addr) >= u128::from(self.base)
            && u128::from(addr) + u128::from(size) <= self.end()
    }
}

/// Compile non-overlapping regions into PMP entries, in order.
///
/// Size-4 regions become NA4, aligned power-of-two regions NAPOT, anything
/// else a TOR pair. A TOR region reuses the previous slot as its lower bound
/// when that slot already holds the right address.
pub fn compile_regions(regions: &[RegionSpec]) -> Result<Vec<PmpEntry>, PmpError> {
    compile_regions_with_budget(regions, PMP_ENTRY_COUNT)
}

pub fn compile_regions_with_budget(
    regions: &[RegionSpec],
    budget: usize,
) -> Result<Vec<PmpEntry>, PmpError> {
    let mut entries: Vec<PmpEntry> = Vec::new();
    for (idx, r) in regions.iter().enumerate() {
        if r.size == 0 {
            return Err(PmpError::EmptyRegion(r.base));
        }
        if r.base % 4 != 0 || r.size % 4 != 0 {
            return Err(PmpError::Granularity { base: r.base, size: r.size });
        }
        if r.end() > u128::from(PMPADDR_MASK) << 2 {
            return Err(PmpError::OutOfRange { base: r.base, size: r.size });
        }
        let mk = |mode, addr_reg| PmpEntry { perms: r.perms, mode, locked: r.lock, addr_reg };
        let mut new = Vec::with_capacity(2);
        if r.size == 4 {
            new.push(mk(AddressMatching::Na4, r.base >> 2));
        } else if let Ok(v) = napot_encode(r.base, r.size) {
            new.push(mk(AddressMatching::Napot, v));
        } else {
            let lower = r.base >> 2;
            let chained = match entries.last() {
                Some(prev) => prev.addr_reg == lower,
                None => lower == 0,
            };
            if !chained {
                new.push(PmpEntry::off(lower));
            }
            new.push(mk(AddressMatching::Tor, ((r.base + r.size) >> 2) & PMPADDR_MASK));
        }
        if entries.len() + new.len() > budget {
            return Err(PmpError::BudgetExceeded {
                region: idx,
                base: r.base,
                size: r.size,
                needed: entries.len() + new.len(),
                budget,
            });
        }
        entries.extend(new);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(addr: u64, size: u64, kind: AccessKind, privilege: Privilege) -> AccessQuery {
        AccessQuery { addr, size, kind, privilege }
    }

    #[test]
    fn napot_examples() {
        assert_eq!(napot_encode(0x8000_0000, 0x2000).unwrap(), 0x2000_03FF);
        assert_eq!(napot_decode(0x2000_03FF), (0x8000_0000, 0x2000));
        assert_eq!(napot_encode(0, 8).unwrap(), 0);
        assert_eq!(napot_decode(0), (0, 8));
    }

    #[test]
    fn napot_rejects_bad_regions() {
        assert_eq!(napot_encode(0, 4), Err(PmpError::NapotSize(4)));
        assert_eq!(napot_encode(0, 0x3000), Err(PmpError::NapotSize(0x3000)));
        assert_eq!(
            napot_encode(0x1000, 0x2000),
            Err(PmpError::NapotAlignment { base: 0x1000, size: 0x2000 })
        );
    }

    #[test]
    fn cfg_byte_layout() {
        let e = PmpEntry {
            perms: Perms::RX,
            mode: AddressMatching::Napot,
            locked: true,
            addr_reg: 0x1ff,
        };
        assert_eq!(e.cfg_byte(), 0b1001_1101);
        assert_eq!(PmpEntry::from_cfg(e.cfg_byte(), e.addr_reg), e);
    }

    #[test]
    fn permission_grant_in_u_mode() {
        let unit = PmpUnit::from_entries(
            &compile_regions(&[RegionSpec::new(0x1000, 0x1000, Perms::R, false)]).unwrap(),
        );
        assert_eq!(
            unit.check_access(&q(0x1800, 8, AccessKind::Read, Privilege::U)),
            Decision::Allow
        );
        assert_eq!(
            unit.check_access(&q(0x1800, 8, AccessKind::Write, Privilege::U)),
            Decision::Deny
        );
    }

    #[test]
    fn default_asymmetry() {
        let unit = PmpUnit::default();
        assert_eq!(
            unit.check_access(&q(0x5000, 4, AccessKind::Write, Privilege::M)),
            Decision::Allow
        );
        assert_eq!(
            unit.check_access(&q(0x5000, 4, AccessKind::Write, Privilege::S)),
            Decision::Deny
        );
        assert_eq!(
            unit.check_access(&q(0x5000, 4, AccessKind::Read, Privilege::U)),
            Decision::Deny
        );
    }

    #[test]
    fn locked_entry_binds_m_mode() {
        let unit = PmpUnit::from_entries(
            &compile_regions(&[RegionSpec::new(0x1000, 0x1000, Perms::R, true)]).unwrap(),
        );
        assert_eq!(
            unit.check_access(&q(0x1000, 4, AccessKind::Write, Privilege::M)),
            Decision::Deny
        );
        assert_eq!(
            unit.check_access(&q(0x1000, 4, AccessKind::Read, Privilege::M)),
            Decision::Allow
        );

        let unlocked = PmpUnit::from_entries(
            &compile_regions(&[RegionSpec::new(0x1000, 0x1000, Perms::R, false)]).unwrap(),
        );
        assert_eq!(
            unlocked.check_access(&q(0x1000, 4, AccessKind::Write, Privilege::M)),
            Decision::Allow
        );
    }

    #[test]
    fn partial_overlap_denied_even_for_m() {
        let unit = PmpUnit::from_entries(
            &compile_regions(&[RegionSpec::new(0x1000, 0x1000, Perms::RWX, false)]).unwrap(),
        );
        for p in [Privilege::U, Privilege::S, Privilege::M] {
            assert_eq!(unit.check_access(&q(0x1ffc, 8, AccessKind::Read, p)), Decision::Deny);
            assert_eq!(unit.check_access(&q(0xffc, 8, AccessKind::Read, p)), Decision::Deny);
        }
    }

    #[test]
    fn lowest_index_wins() {
        let mut unit = PmpUnit::default();
        unit.set(
            0,
            PmpEntry {
                perms: Perms::NONE,
                mode: AddressMatching::Napot,
                locked: false,
                addr_reg: napot_encode(0x1000, 0x100).unwrap(),
            },
        );
        unit.set(
            1,
            PmpEntry {
                perms: Perms::RWX,
                mode: AddressMatching::Napot,
                locked: false,
                addr_reg: napot_encode(0x1000, 0x1000).unwrap(),
            },
        );
        assert_eq!(
            unit.check_access(&q(0x1010, 4, AccessKind::Read, Privilege::S)),
            Decision::Deny
        );
        assert_eq!(
            unit.check_access(&q(0x1200, 4, AccessKind::Read, Privilege::S)),
            Decision::Allow
        );
    }

    #[test]
    fn tor_uses_previous_raw_address() {
        let mut unit = PmpUnit::default();
        unit.set(0, PmpEntry::off(0x1000 >> 2));
        unit.set(
            1,
            PmpEntry {
                perms: Perms::RW,
                mode: AddressMatching::Tor,
                locked: false,
                addr_reg: 0x4000 >> 2,
            },
        );
        assert_eq!(unit.region(1), Some((0x1000, 0x4000)));
        assert_eq!(unit.region(0), None);
        // First-slot TOR starts at 0.
        let mut unit = PmpUnit::default();
        unit.set(
            0,
            PmpEntry { perms: Perms::R, mode: AddressMatching::Tor, locked: false, addr_reg: 0x40 },
        );
        assert_eq!(unit.region(0), Some((0, 0x100)));
        // Inverted bounds match nothing.
        let mut unit = PmpUnit::default();
        unit.set(0, PmpEntry::off(0x100));
        unit.set(
            1,
            PmpEntry { perms: Perms::R, mode: AddressMatching::Tor, locked: false, addr_reg: 0x10 },
        );
        assert_eq!(unit.region(1), None);
    }

    #[test]
    fn compile_single_napot() {
        let e = compile_regions(&[RegionSpec::new(0x8000_0000, 0x2000, Perms::RW, false)]).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].mode, AddressMatching::Napot);
        assert_eq!(e[0].addr_reg, 0x2000_03FF);
    }

    #[test]
    fn compile_tor_pair() {
        let e = compile_regions(&[RegionSpec::new(0x1000, 0x3000, Perms::RW, false)]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].mode, e[0].addr_reg), (AddressMatching::Off, 0x1000 >> 2));
        assert_eq!((e[1].mode, e[1].addr_reg), (AddressMatching::Tor, 0x4000 >> 2));
    }

    #[test]
    fn compile_na4_and_chained_tor() {
        let e = compile_regions(&[
            RegionSpec::new(0x0, 0x30, Perms::R, false),
            RegionSpec::new(0x30, 0x50, Perms::RW, false),
            RegionSpec::new(0x100, 4, Perms::RW, false),
        ])
        .unwrap();
        let modes: Vec<_> = e.iter().map(|e| e.mode).collect();
        assert_eq!(modes, [AddressMatching::Tor, AddressMatching::Tor, AddressMatching::Na4]);
    }

    #[test]
    fn budget_overflow_names_region() {
        let regions: Vec<_> =
            (0..17u64).map(|i| RegionSpec::new(0x1000 * (i + 1), 0x100, Perms::R, false)).collect();
        match compile_regions(&regions) {
            Err(PmpError::BudgetExceeded { region, base, .. }) => {
                assert_eq!(region, 16);
                assert_eq!(base, 0x11000);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn compile_rejects_bad_granularity() {
        assert!(matches!(
            compile_regions(&[RegionSpec::new(0x1002, 0x10, Perms::R, false)]),
            Err(PmpError::Granularity { .. })
        ));
        assert!(matches!(
            compile_regions(&[RegionSpec::new(0x1000, 0, Perms::R, false)]),
            Err(PmpError::EmptyRegion(0x1000))
        ));
    }

    #[test]
    fn dump_format() {
        let unit = PmpUnit::from_entries(
            &compile_regions(&[
                RegionSpec::new(0x8020_0000, 0x20_0000, Perms::RWX, false),
                RegionSpec::new(0x1001_1000, 0x1000, Perms::RW, true),
            ])
            .unwrap(),
        );
        let dump = unit.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), PMP_ENTRY_COUNT);
        assert_eq!(
            lines[0],
            "0 A=NAPOT L=0 RWX=111 addr_reg=0x200bffff region=[0x80200000,0x80400000)"
        );
        assert_eq!(
            lines[1],
            "1 A=NAPOT L=1 RWX=110 addr_reg=0x40045ff region=[0x10011000,0x10012000)"
        );
        assert_eq!(lines[2], "2 A=OFF L=0 RWX=000 addr_reg=0x0 region=-");
    }

    #[test]
    fn perms_parse() {
        assert_eq!("rwx".parse::<Perms>().unwrap(), Perms::RWX);
        assert_eq!("rx".parse::<Perms>().unwrap(), Perms::RX);
        assert_eq!("".parse::<Perms>().unwrap(), Perms::NONE);
        assert!("wr".parse::<Perms>().is_err());
        assert!("rwxx".parse::<Perms>().is_err());
        assert_eq!(Perms::RW.to_string(), "rw");
    }
}
