//! Partition manifest: which memory, devices and harts each OS owns.
//!
//! Manifests are JSON. Addresses and sizes are `"0x..."` strings so no
//! reader has to guess an integer width.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmp::{Perms, PmpError, RegionSpec, compile_regions};

mod hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("malformed address `{s}`")))
    }

    pub fn parse(s: &str) -> Option<u64> {
        let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
        let digits = digits.replace('_', "");
        if digits.is_empty() {
            return None;
        }
        u64::from_str_radix(&digits, 16).ok()
    }
}

pub use hex::parse as parse_hex;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("missing required field `{field}` (line {line}, column {column})")]
    MissingField { field: String, line: usize, column: usize },
    #[error("malformed address at line {line}, column {column}: {message}")]
    MalformedAddress { line: usize, column: usize, message: String },
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema { line: usize, column: usize, message: String },
}

impl From<serde_json::Error> for ManifestError {
    fn from(e: serde_json::Error) -> Self {
        use serde_json::error::Category;
        let (line, column) = (e.line(), e.column());
        let full = e.to_string();
        // serde_json appends " at line N column M"; keep only the message.
        let message = match full.rfind(" at line ") {
            Some(i) => full[..i].to_string(),
            None => full,
        };
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => {
                ManifestError::Syntax { line, column, message }
            }
            Category::Data => {
                if let Some(rest) = message.strip_prefix("missing field `") {
                    let field = rest.trim_end_matches('`').to_string();
                    ManifestError::MissingField { field, line, column }
                } else if message.starts_with("malformed address") {
                    ManifestError::MalformedAddress { line, column, message }
                } else {
                    ManifestError::Schema { line, column, message }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemRange {
    #[serde(with = "hex")]
    pub base: u64,
    #[serde(with = "hex")]
    pub size: u64,
}

impl MemRange {
    pub fn end(&self) -> u128 {
        u128::from(self.base) + u128::from(self.size)
    }

    pub fn overlaps(&self, base: u64, size: u64) -> bool {
        u128::from(self.base) < u128::from(base) + u128::from(size) && u128::from(base) < self.end()
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && u128::from(addr) < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    #[serde(with = "hex")]
    pub base: u64,
    #[serde(with = "hex")]
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub harts: usize,
    pub ram: MemRange,
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    pub region: MemRange,
    #[serde(with = "hex")]
    pub mtvec: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical,
    NonCritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDecl {
    #[serde(with = "hex")]
    pub base: u64,
    #[serde(with = "hex")]
    pub size: u64,
    pub perms: Perms,
    pub lock: bool,
}

impl From<RegionDecl> for RegionSpec {
    fn from(r: RegionDecl) -> Self {
        RegionSpec::new(r.base, r.size, r.perms, r.lock)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub name: String,
    pub criticality: Criticality,
    pub harts: Vec<usize>,
    pub regions: Vec<RegionDecl>,
    pub devices: Vec<String>,
    #[serde(with = "hex")]
    pub entry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub platform: PlatformSpec,
    pub monitor: MonitorSpec,
    pub partitions: Vec<PartitionSpec>,
}

/// Parse a manifest document. A blank document is treated as `{}`.
pub fn parse_manifest(text: &str) -> Result<PartitionManifest, ManifestError> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    Ok(serde_json::from_str(text)?)
}

impl PartitionManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn partition(&self, name: &str) -> Option<&PartitionSpec> {
        self.partitions.iter().find(|p| p.name == name)
    }

    pub fn device(&self, name: &str) -> Option<&DeviceSpec> {
        self.platform.devices.iter().find(|d| d.name == name)
    }

    /// Everything a partition's PMP must cover: its declared regions, then
    /// its devices' MMIO windows as unlocked read/write.
    pub fn pmp_regions(&self, p: &PartitionSpec) -> Vec<RegionSpec> {
        let mut regions: Vec<RegionSpec> = p.regions.iter().map(|r| (*r).into()).collect();
        regions.extend(
            p.devices
                .iter()
                .filter_map(|d| self.device(d))
                .map(|d| RegionSpec::new(d.base, d.size, Perms::RW, false)),
        );
        regions
    }

    fn writable_regions(&self, p: &PartitionSpec) -> Vec<RegionSpec> {
        self.pmp_regions(p).into_iter().filter(|r| r.perms.w).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicatePartition { name: String },
    NoHarts { partition: String },
    UnknownHart { partition: String, hart: usize },
    HartConflict { hart: usize, first: String, second: String },
    UnknownDevice { partition: String, device: String },
    DeviceConflict { device: String, first: String, second: String },
    DeviceOverlap { first: String, second: String },
    IntraPartitionOverlap { partition: String, first: usize, second: usize },
    WritableOverlap { first: String, second: String, base: u64, size: u64 },
    MonitorOverlap { partition: String, base: u64, size: u64 },
    MtvecOutsideMonitor { mtvec: u64 },
    EntryNotExecutable { partition: String, entry: u64 },
    PmpCompile { partition: String, error: PmpError },
}

impl Violation {
    /// Stable category name, independent of partition names.
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::DuplicatePartition { .. } => "duplicate-partition",
            Violation::NoHarts { .. } => "no-harts",
            Violation::UnknownHart { .. } => "unknown-hart",
            Violation::HartConflict { .. } => "hart-conflict",
            Violation::UnknownDevice { .. } => "unknown-device",
            Violation::DeviceConflict { .. } => "device-exclusivity",
            Violation::DeviceOverlap { .. } => "device-overlap",
            Violation::IntraPartitionOverlap { .. } => "intra-partition-overlap",
            Violation::WritableOverlap { .. } => "writable-overlap",
            Violation::MonitorOverlap { .. } => "monitor-integrity",
            Violation::MtvecOutsideMonitor { .. } => "mtvec-outside-monitor",
            Violation::EntryNotExecutable { .. } => "entry-not-executable",
            Violation::PmpCompile { .. } => "pmp-budget",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.kind())?;
        match self {
            Violation::DuplicatePartition { name } => {
                write!(f, "partition name `{name}` used twice")
            }
            Violation::NoHarts { partition } => write!(f, "`{partition}` owns no hart"),
            Violation::UnknownHart { partition, hart } => {
                write!(f, "`{partition}` claims hart {hart}, which the platform lacks")
            }
            Violation::HartConflict { hart, first, second } => {
                write!(f, "hart {hart} claimed by both `{first}` and `{second}`")
            }
            Violation::UnknownDevice { partition, device } => {
                write!(f, "`{partition}` claims unknown device `{device}`")
            }
            Violation::DeviceConflict { device, first, second } => {
                write!(f, "device `{device}` granted to both `{first}` and `{second}`")
            }
            Violation::DeviceOverlap { first, second } => {
                write!(f, "MMIO windows of `{first}` and `{second}` overlap")
            }
            Violation::IntraPartitionOverlap { partition, first, second } => {
                write!(f, "`{partition}` regions #{first} and #{second} overlap")
            }
            Violation::WritableOverlap { first, second, base, size } => write!(
                f,
                "`{first}` and `{second}` both have write access to [{base:#x}, +{size:#x})"
            ),
            Violation::MonitorOverlap { partition, base, size } => {
                write!(f, "`{partition}` region [{base:#x}, +{size:#x}) overlaps monitor memory")
            }
            Violation::MtvecOutsideMonitor { mtvec } => {
                write!(f, "trap vector {mtvec:#x} is outside the monitor region")
            }
            Violation::EntryNotExecutable { partition, entry } => {
                write!(f, "`{partition}` entry {entry:#x} is not in one of its executable regions")
            }
            Violation::PmpCompile { partition, error } => write!(f, "`{partition}`: {error}"),
        }
    }
}

/// Check every isolation rule. An empty result means the manifest is safe
/// to boot.
pub fn validate(m: &PartitionManifest) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen = BTreeSet::new();
    for p in &m.partitions {
        if !seen.insert(p.name.as_str()) {
            out.push(Violation::DuplicatePartition { name: p.name.clone() });
        }
    }

    if !m.monitor.region.contains(m.monitor.mtvec) {
        out.push(Violation::MtvecOutsideMonitor { mtvec: m.monitor.mtvec });
    }

    let mut hart_owner: BTreeMap<usize, &str> = BTreeMap::new();
    let mut device_owner: BTreeMap<&str, &str> = BTreeMap::new();
    for p in &m.partitions {
        if p.harts.is_empty() {
            out.push(Violation::NoHarts { partition: p.name.clone() });
        }
        for &h in &p.harts {
            if h >= m.platform.harts {
                out.push(Violation::UnknownHart { partition: p.name.clone(), hart: h });
            } else if let Some(first) = hart_owner.insert(h, &p.name)
                && first != p.name
            {
                out.push(Violation::HartConflict {
                    hart: h,
                    first: first.to_string(),
                    second: p.name.clone(),
                });
            }
        }
        for d in &p.devices {
            if m.device(d).is_none() {
                out.push(Violation::UnknownDevice { partition: p.name.clone(), device: d.clone() });
            } else if let Some(first) = device_owner.insert(d, &p.name) {
                out.push(Violation::DeviceConflict {
                    device: d.clone(),
                    first: first.to_string(),
                    second: p.name.clone(),
                });
            }
        }
    }

    let devs = &m.platform.devices;
    for (i, a) in devs.iter().enumerate() {
        for b in &devs[i + 1..] {
            if RegionSpec::new(a.base, a.size, Perms::NONE, false).overlaps(&RegionSpec::new(
                b.base,
                b.size,
                Perms::NONE,
                false,
            )) {
                out.push(Violation::DeviceOverlap {
                    first: a.name.clone(),
                    second: b.name.clone(),
                });
            }
        }
    }

    for p in &m.partitions {
        for (i, a) in p.regions.iter().enumerate() {
            let ra = RegionSpec::from(*a);
            for (j, b) in p.regions.iter().enumerate().skip(i + 1) {
                if ra.overlaps(&(*b).into()) {
                    out.push(Violation::IntraPartitionOverlap {
                        partition: p.name.clone(),
                        first: i,
                        second: j,
                    });
                }
            }
            if m.monitor.region.overlaps(a.base, a.size) {
                out.push(Violation::MonitorOverlap {
                    partition: p.name.clone(),
                    base: a.base,
                    size: a.size,
                });
            }
        }
        let executable =
            p.regions.iter().any(|r| r.perms.x && RegionSpec::from(*r).contains(p.entry, 4));
        if !executable {
            out.push(Violation::EntryNotExecutable { partition: p.name.clone(), entry: p.entry });
        }
        if let Err(error) = compile_regions(&m.pmp_regions(p)) {
            out.push(Violation::PmpCompile { partition: p.name.clone(), error });
        }
    }

    // Read-only sharing is allowed; two writers on the same bytes are not.
    for (i, a) in m.partitions.iter().enumerate() {
        let wa = m.writable_regions(a);
        for b in &m.partitions[i + 1..] {
            for rb in m.writable_regions(b) {
                for ra in wa.iter().filter(|ra| ra.overlaps(&rb)) {
                    let lo = ra.base.max(rb.base);
                    let hi = ra.end().min(rb.end());
                    out.push(Violation::WritableOverlap {
                        first: a.name.clone(),
                        second: b.name.clone(),
                        base: lo,
                        size: (hi - u128::from(lo)) as u64,
                    });
                }
            }
        }
    }

    out
}

/// Critical partitions first, then non-critical, each group in manifest
/// order.
pub fn boot_order(m: &PartitionManifest) -> Vec<String> {
    let mut order: Vec<&PartitionSpec> = m.partitions.iter().collect();
    order.sort_by_key(|p| p.criticality);
    order.into_iter().map(|p| p.name.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIXTURE: &str = include_str!("../fixtures/two_partition.json");

    fn fixture() -> PartitionManifest {
        parse_manifest(FIXTURE).unwrap()
    }

    fn kinds(v: &[Violation]) -> Vec<&'static str> {
        let mut k: Vec<_> = v.iter().map(Violation::kind).collect();
        k.sort();
        k
    }

    #[test]
    fn fixture_parses() {
        let m = fixture();
        assert_eq!(m.partitions.len(), 2);
        let linux = m.partition("linux").unwrap();
        assert_eq!(linux.harts, vec![1]);
        assert_eq!(linux.devices, vec!["UART0"]);
        let rtos = m.partition("freertos").unwrap();
        assert_eq!(rtos.harts, vec![0]);
        assert_eq!(rtos.devices, vec!["UART1"]);
        assert_eq!(rtos.regions[0].base, 0x8020_0000);
        assert_eq!(m.monitor.mtvec, 0x8000_0000);
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
    }

    #[test]
    fn empty_document_is_missing_field() {
        for doc in ["", "  \n", "{}"] {
            match parse_manifest(doc) {
                Err(ManifestError::MissingField { field, .. }) => assert_eq!(field, "platform"),
                other => panic!("expected missing field, got {other:?}"),
            }
        }
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_manifest("{\n  \"platform\": ,\n}") {
            Err(ManifestError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_address() {
        let bad = FIXTURE.replace("\"0x80400000\"", "\"80400000\"");
        assert!(matches!(parse_manifest(&bad), Err(ManifestError::MalformedAddress { .. })));
        let bad = FIXTURE.replace("\"0x10010000\"", "\"0xZZ\"");
        assert!(matches!(parse_manifest(&bad), Err(ManifestError::MalformedAddress { .. })));
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = FIXTURE.replace("\"mtvec\"", "\"colour\": 1, \"mtvec\"");
        assert!(matches!(parse_manifest(&bad), Err(ManifestError::Schema { .. })));
    }

    #[test]
    fn duplicate_partition_name() {
        let mut m = fixture();
        m.partitions[1].name = "linux".into();
        let v = validate(&m);
        assert!(v.contains(&Violation::DuplicatePartition { name: "linux".into() }), "{v:?}");
    }

    #[test]
    fn seeded_violation_fixtures() {
        let cases = [
            (include_str!("../fixtures/bad_overlap.json"), "writable-overlap"),
            (include_str!("../fixtures/bad_device_shared.json"), "device-exclusivity"),
            (include_str!("../fixtures/bad_monitor_overlap.json"), "monitor-integrity"),
        ];
        for (text, kind) in cases {
            let v = validate(&parse_manifest(text).unwrap());
            assert!(kinds(&v).contains(&kind), "{kind}: {v:?}");
        }
    }

    #[test]
    fn shared_read_only_page_is_allowed() {
        let m = parse_manifest(include_str!("../fixtures/shared_mailbox.json")).unwrap();
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
    }

    #[test]
    fn hart_rules() {
        let mut m = fixture();
        m.partitions[0].harts = vec![0];
        assert_eq!(kinds(&validate(&m)), ["hart-conflict"]);
        m.partitions[0].harts = vec![];
        assert_eq!(kinds(&validate(&m)), ["no-harts"]);
        m.partitions[0].harts = vec![7];
        assert_eq!(kinds(&validate(&m)), ["unknown-hart"]);
    }

    #[test]
    fn pmp_budget_violation() {
        let mut m = fixture();
        m.partitions[0].regions = (0..16u64)
            .map(|i| RegionDecl {
                base: 0x9000_0000 + i * 0x10_0000,
                size: 0x100,
                perms: Perms::RWX,
                lock: false,
            })
            .collect();
        m.partitions[0].entry = 0x9000_0000;
        assert_eq!(kinds(&validate(&m)), ["pmp-budget"]);
    }

    #[test]
    fn boot_order_examples() {
        let m = fixture();
        assert_eq!(boot_order(&m), ["freertos", "linux"]);

        let mut all_crit = fixture();
        for p in &mut all_crit.partitions {
            p.criticality = Criticality::Critical;
        }
        assert_eq!(boot_order(&all_crit), ["linux", "freertos"]);

        let single = parse_manifest(include_str!("../fixtures/single_partition.json")).unwrap();
        assert_eq!(boot_order(&single), ["freertos"]);
    }

    #[test]
    fn bundled_fixtures_round_trip() {
        for text in [
            FIXTURE,
            include_str!("../fixtures/bad_overlap.json"),
            include_str!("../fixtures/bad_device_shared.json"),
            include_str!("../fixtures/bad_monitor_overlap.json"),
            include_str!("../fixtures/single_partition.json"),
            include_str!("../fixtures/shared_mailbox.json"),
        ] {
            let m = parse_manifest(text).unwrap();
            let again = parse_manifest(&m.to_json()).unwrap();
            assert_eq!(m, again);
            assert_eq!(m.to_json(), again.to_json());
        }
    }

    fn arb_partition(idx: usize) -> impl Strategy<Value = PartitionSpec> {
        (
            prop_oneof![Just(Criticality::Critical), Just(Criticality::NonCritical)],
            0u64..0x100,
            1u64..0x40,
            "[rwx]{0,1}",
        )
            .prop_map(move |(criticality, page, pages, p)| {
                let base = 0x8100_0000 + page * 0x1000;
                PartitionSpec {
                    name: format!("p{idx}"),
                    criticality,
                    harts: vec![idx],
                    regions: vec![RegionDecl {
                        base,
                        size: pages * 0x1000,
                        perms: if p.is_empty() {
                            Perms::RWX
                        } else {
                            p.parse().unwrap_or(Perms::R)
                        },
                        lock: page % 2 == 0,
                    }],
                    devices: vec![],
                    entry: base,
                }
            })
    }

    fn arb_manifest() -> impl Strategy<Value = PartitionManifest> {
        (1usize..5).prop_flat_map(|n| (0..n).map(arb_partition).collect::<Vec<_>>()).prop_map(
            |partitions| {
                let mut m = fixture();
                m.platform.harts = partitions.len();
                m.partitions = partitions;
                m
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_parse_identity(m in arb_manifest()) {
            let again = parse_manifest(&m.to_json()).unwrap();
            prop_assert_eq!(&m, &again);
        }

        #[test]
        fn validate_is_order_insensitive(m in arb_manifest(), rot in 0usize..5) {
            let mut permuted = m.clone();
            let n = permuted.partitions.len();
            permuted.partitions.rotate_left(rot % n);
            permuted.partitions.reverse();
            prop_assert_eq!(kinds(&validate(&m)), kinds(&validate(&permuted)));
        }

        #[test]
        fn boot_order_is_a_critical_first_permutation(m in arb_manifest()) {
            let order = boot_order(&m);
            let mut names: Vec<_> = m.partitions.iter().map(|p| p.name.clone()).collect();
            let mut sorted = order.clone();
            names.sort();
            sorted.sort();
            prop_assert_eq!(names, sorted);
            let crit: Vec<_> = order
                .iter()
                .map(|n| m.partition(n).unwrap().criticality)
                .collect();
            prop_assert!(crit.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
