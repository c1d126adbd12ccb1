//! Sparse physical memory shared by all harts.

use std::collections::BTreeMap;
use std::ops::Range;

/// A committed store, recorded when journaling is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteRecord {
    pub hart: usize,
    pub addr: u64,
    pub width: u8,
}

/// Byte-addressed memory. Unwritten bytes read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    bytes: BTreeMap<u64, u8>,
    journal: Option<Vec<WriteRecord>>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start recording every committed store.
    pub fn enable_journal(&mut self) {
        self.journal.get_or_insert_with(Vec::new);
    }

    pub fn journal(&self) -> &[WriteRecord] {
        self.journal.as_deref().unwrap_or(&[])
    }

    /// Little-endian read of `width` bytes.
    pub fn read(&self, addr: u64, width: u8) -> u64 {
        (0..width as u64).fold(0u64, |acc, i| {
            let b = self.bytes.get(&addr.wrapping_add(i)).copied().unwrap_or(0);
            acc | (u64::from(b) << (8 * i))
        })
    }

    /// Little-endian write of the low `width` bytes of `value`.
    pub fn write(&mut self, hart: usize, addr: u64, width: u8, value: u64) {
        for i in 0..width as u64 {
            let b = (value >> (8 * i)) as u8;
            let a = addr.wrapping_add(i);
            if b == 0 {
                self.bytes.remove(&a);
            } else {
                self.bytes.insert(a, b);
            }
        }
        if let Some(j) = self.journal.as_mut() {
            j.push(WriteRecord { hart, addr, width });
        }
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len as u64)
            .map(|i| self.bytes.get(&addr.wrapping_add(i)).copied().unwrap_or(0))
            .collect()
    }

    pub fn write_bytes(&mut self, hart: usize, addr: u64, data: &[u8]) {
        for (chunk_idx, chunk) in data.chunks(8).enumerate() {
            let value =
                chunk.iter().enumerate().fold(0u64, |acc, (i, b)| acc | (u64::from(*b) << (8 * i)));
            self.write(hart, addr + 8 * chunk_idx as u64, chunk.len() as u8, value);
        }
    }

    /// Non-zero bytes inside `range`, in address order. Two memories agree on
    /// a range iff their snapshots are equal.
    pub fn snapshot(&self, range: Range<u64>) -> Vec<(u64, u8)> {
        self.bytes.range(range).map(|(a, b)| (*a, *b)).collect()
    }
}
