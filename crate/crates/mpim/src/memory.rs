//! Two-tier device memory: persistent MRAM holding model coefficients and
//! volatile SRAM holding activations, with per-tier access accounting.
//!
//! Regions are carved out of each tier by a first-fit allocator and addressed
//! by opaque ids. A power cycle wipes SRAM (contents and regions) while MRAM
//! survives byte for byte, which is what lets preloaded models skip any
//! external storage on the next boot. Snapshots serialize the MRAM image plus
//! its region table so persistence can cross process boundaries too.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_MRAM_CAPACITY: u64 = 40 * 1024 * 1024;
pub const DEFAULT_SRAM_CAPACITY: u64 = 9 * 1024 * 1024;

const SNAPSHOT_MAGIC: &[u8; 4] = b"MPIM";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("allocation length must be positive")]
    ZeroLength,
    #[error("{kind} capacity exceeded: requested {requested} bytes, {available} free")]
    CapacityExceeded {
        kind: MemoryKind,
        requested: u64,
        available: u64,
    },
    #[error(
        "{kind} fragmented: requested {requested} contiguous bytes, largest free gap {largest_gap}"
    )]
    Fragmented {
        kind: MemoryKind,
        requested: u64,
        largest_gap: u64,
    },
    #[error("no region with id {0:?}")]
    NoSuchRegion(RegionId),
    #[error("access [{offset}, {offset}+{len}) outside region of {region_len} bytes")]
    OutOfBounds {
        offset: u64,
        len: u64,
        region_len: u64,
    },
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot: {0}")]
    BadSnapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MemoryKind {
    Mram,
    Sram,
}

impl MemoryKind {
    /// Whether contents survive a power cycle.
    pub fn persistent(self) -> bool {
        matches!(self, MemoryKind::Mram)
    }
}

impl std::fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoryKind::Mram => "MRAM",
            MemoryKind::Sram => "SRAM",
        })
    }
}

/// Opaque handle to an allocated region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId(u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub id: RegionId,
    pub kind: MemoryKind,
    pub offset: u64,
    pub length: u64,
    pub owner: String,
}

/// Access statistics for one tier, in calls and bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct AccessCounters {
    pub reads: u64,
    pub writes: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone)]
pub struct DeviceMemory {
    mram: Vec<u8>,
    sram: Vec<u8>,
    regions: BTreeMap<RegionId, MemoryRegion>,
    next_id: u32,
    mram_counters: AccessCounters,
    sram_counters: AccessCounters,
}

impl Default for DeviceMemory {
    fn default() -> Self {
        Self::new(DEFAULT_MRAM_CAPACITY, DEFAULT_SRAM_CAPACITY)
    }
}

impl DeviceMemory {
    pub fn new(mram_capacity: u64, sram_capacity: u64) -> Self {
        Self {
            mram: vec![0; mram_capacity as usize],
            sram: vec![0; sram_capacity as usize],
            regions: BTreeMap::new(),
            next_id: 0,
            mram_counters: AccessCounters::default(),
            sram_counters: AccessCounters::default(),
        }
    }

    pub fn capacity(&self, kind: MemoryKind) -> u64 {
        self.store(kind).len() as u64
    }

    pub fn counters(&self, kind: MemoryKind) -> &AccessCounters {
        match kind {
            MemoryKind::Mram => &self.mram_counters,
            MemoryKind::Sram => &self.sram_counters,
        }
    }

    pub fn region(&self, id: RegionId) -> Option<&MemoryRegion> {
        self.regions.get(&id)
    }

    pub fn regions_of(&self, kind: MemoryKind) -> impl Iterator<Item = &MemoryRegion> {
        self.regions.values().filter(move |r| r.kind == kind)
    }

    pub fn free_bytes(&self, kind: MemoryKind) -> u64 {
        self.capacity(kind) - self.regions_of(kind).map(|r| r.length).sum::<u64>()
    }

    /// Carves a fresh region out of the first gap that fits.
    ///
    /// When no gap fits, the error distinguishes plain exhaustion (not enough
    /// free bytes in total) from fragmentation (enough in total, but no
    /// single gap large enough).
    pub fn allocate(
        &mut self,
        kind: MemoryKind,
        length: u64,
        owner: &str,
    ) -> Result<RegionId, MemoryError> {
        if length == 0 {
            return Err(MemoryError::ZeroLength);
        }
        let mut occupied: Vec<(u64, u64)> = self
            .regions_of(kind)
            .map(|r| (r.offset, r.length))
            .collect();
        occupied.sort_unstable();

        let capacity = self.capacity(kind);
        let mut cursor = 0u64;
        let mut chosen = None;
        let mut largest_gap = 0u64;
        for (off, len) in occupied.iter().chain(std::iter::once(&(capacity, 0))) {
            let gap = off - cursor;
            largest_gap = largest_gap.max(gap);
            if chosen.is_none() && gap >= length {
                chosen = Some(cursor);
            }
            cursor = off + len;
        }

        let offset = match chosen {
            Some(o) => o,
            None => {
                let available = self.free_bytes(kind);
                return Err(if available >= length {
                    MemoryError::Fragmented {
                        kind,
                        requested: length,
                        largest_gap,
                    }
                } else {
                    MemoryError::CapacityExceeded {
                        kind,
                        requested: length,
                        available,
                    }
                });
            }
        };

        let id = RegionId(self.next_id);
        self.next_id += 1;
        self.regions.insert(
            id,
            MemoryRegion {
                id,
                kind,
                offset,
                length,
                owner: owner.to_string(),
            },
        );
        debug_assert!(self.regions_disjoint());
        Ok(id)
    }

    /// Releases a region. The backing bytes are left as-is; only the region
    /// table entry goes away.
    pub fn free(&mut self, id: RegionId) -> Result<MemoryRegion, MemoryError> {
        self.regions
            .remove(&id)
            .ok_or(MemoryError::NoSuchRegion(id))
    }

    pub fn write(&mut self, id: RegionId, offset: u64, data: &[u8]) -> Result<(), MemoryError> {
        let (kind, base) = self.locate(id, offset, data.len() as u64)?;
        let start = (base + offset) as usize;
        self.store_mut(kind)[start..start + data.len()].copy_from_slice(data);
        let c = self.counters_mut(kind);
        c.writes += 1;
        c.bytes_written += data.len() as u64;
        Ok(())
    }

    pub fn read(&mut self, id: RegionId, offset: u64, length: u64) -> Result<Vec<u8>, MemoryError> {
        let (kind, base) = self.locate(id, offset, length)?;
        let start = (base + offset) as usize;
        let out = self.store(kind)[start..start + length as usize].to_vec();
        let c = self.counters_mut(kind);
        c.reads += 1;
        c.bytes_read += length;
        Ok(out)
    }

    /// Simulates power loss and restore: SRAM zeroed and its regions dropped,
    /// MRAM contents and region table untouched, session counters cleared.
    pub fn power_cycle(&mut self) {
        self.sram.fill(0);
        self.regions.retain(|_, r| r.kind == MemoryKind::Mram);
        self.mram_counters = AccessCounters::default();
        self.sram_counters = AccessCounters::default();
    }

    /// Writes the MRAM region table and image to `path`.
    ///
    /// Layout, all little-endian: magic "MPIM", version u16, region count
    /// u16, then per region (kind u8, owner length u16 + UTF-8 bytes,
    /// offset u64, length u64), then the raw MRAM image. Volatile SRAM is
    /// deliberately absent.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), MemoryError> {
        let mut buf = Vec::with_capacity(self.mram.len() + 64);
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        let mram_regions: Vec<&MemoryRegion> = self.regions_of(MemoryKind::Mram).collect();
        buf.extend_from_slice(&(mram_regions.len() as u16).to_le_bytes());
        for r in mram_regions {
            buf.push(0u8); // kind tag: 0 = MRAM, the only persisted kind
            let owner = r.owner.as_bytes();
            buf.extend_from_slice(&(owner.len() as u16).to_le_bytes());
            buf.extend_from_slice(owner);
            buf.extend_from_slice(&r.offset.to_le_bytes());
            buf.extend_from_slice(&r.length.to_le_bytes());
        }
        buf.extend_from_slice(&self.mram);
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Restores a device from a snapshot. MRAM capacity comes from the image
    /// length; SRAM starts empty at the requested capacity. Region ids are
    /// reassigned.
    pub fn load_snapshot(path: &Path, sram_capacity: u64) -> Result<Self, MemoryError> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut pos = 0usize;

        let take = |pos: &mut usize, n: usize| -> Result<&[u8], MemoryError> {
            if *pos + n > buf.len() {
                return Err(MemoryError::BadSnapshot(format!(
                    "truncated at byte {} (wanted {n} more)",
                    *pos
                )));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 4)? != SNAPSHOT_MAGIC {
            return Err(MemoryError::BadSnapshot("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(MemoryError::BadSnapshot(format!(
                "unsupported version {version}"
            )));
        }
        let count = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let mut parsed = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let kind = take(&mut pos, 1)?[0];
            if kind != 0 {
                return Err(MemoryError::BadSnapshot(format!(
                    "unexpected region kind tag {kind}"
                )));
            }
            let owner_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let owner = String::from_utf8(take(&mut pos, owner_len)?.to_vec())
                .map_err(|e| MemoryError::BadSnapshot(format!("owner not UTF-8: {e}")))?;
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let length = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            parsed.push((owner, offset, length));
        }
        let image = &buf[pos..];
        let mram_capacity = image.len() as u64;

        let mut mem = Self::new(mram_capacity, sram_capacity);
        mem.mram.copy_from_slice(image);
        for (owner, offset, length) in parsed {
            if offset + length > mram_capacity {
                return Err(MemoryError::BadSnapshot(format!(
                    "region [{offset}, {offset}+{length}) exceeds {mram_capacity}-byte image"
                )));
            }
            let id = RegionId(mem.next_id);
            mem.next_id += 1;
            mem.regions.insert(
                id,
                MemoryRegion {
                    id,
                    kind: MemoryKind::Mram,
                    offset,
                    length,
                    owner,
                },
            );
        }
        if !mem.regions_disjoint() {
            return Err(MemoryError::BadSnapshot("overlapping regions".into()));
        }
        Ok(mem)
    }

    fn locate(
        &self,
        id: RegionId,
        offset: u64,
        len: u64,
    ) -> Result<(MemoryKind, u64), MemoryError> {
        let region = self.regions.get(&id).ok_or(MemoryError::NoSuchRegion(id))?;
        if offset
            .checked_add(len)
            .is_none_or(|end| end > region.length)
        {
            return Err(MemoryError::OutOfBounds {
                offset,
                len,
                region_len: region.length,
            });
        }
        Ok((region.kind, region.offset))
    }

    fn store(&self, kind: MemoryKind) -> &[u8] {
        match kind {
            MemoryKind::Mram => &self.mram,
            MemoryKind::Sram => &self.sram,
        }
    }

    fn store_mut(&mut self, kind: MemoryKind) -> &mut [u8] {
        match kind {
            MemoryKind::Mram => &mut self.mram,
            MemoryKind::Sram => &mut self.sram,
        }
    }

    fn counters_mut(&mut self, kind: MemoryKind) -> &mut AccessCounters {
        match kind {
            MemoryKind::Mram => &mut self.mram_counters,
            MemoryKind::Sram => &mut self.sram_counters,
        }
    }

    fn regions_disjoint(&self) -> bool {
        for kind in [MemoryKind::Mram, MemoryKind::Sram] {
            let mut spans: Vec<(u64, u64)> = self
                .regions_of(kind)
                .map(|r| (r.offset, r.offset + r.length))
                .collect();
            spans.sort_unstable();
            let capacity = self.capacity(kind);
            let mut prev_end = 0;
            for (start, end) in spans {
                if start < prev_end || end > capacity {
                    return false;
                }
                prev_end = end;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1024 * 1024;

    #[test]
    fn four_models_fit_default_mram() {
        let mut mem = DeviceMemory::default();
        let ids: Vec<_> = (0..4)
            .map(|i| {
                mem.allocate(MemoryKind::Mram, 10 * MB, &format!("model{i}"))
                    .unwrap()
            })
            .collect();
        assert!(mem.regions_disjoint());
        assert_eq!(ids.len(), 4);
        assert_eq!(mem.free_bytes(MemoryKind::Mram), 0);
    }

    #[test]
    fn over_capacity_reports_requested_vs_available() {
        let mut mem = DeviceMemory::default();
        let err = mem.allocate(MemoryKind::Mram, 41 * MB, "big").unwrap_err();
        match err {
            MemoryError::CapacityExceeded {
                kind,
                requested,
                available,
            } => {
                assert_eq!(kind, MemoryKind::Mram);
                assert_eq!(requested, 41 * MB);
                assert_eq!(available, 40 * MB);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn zero_length_rejected() {
        let mut mem = DeviceMemory::default();
        assert!(matches!(
            mem.allocate(MemoryKind::Sram, 0, "x"),
            Err(MemoryError::ZeroLength)
        ));
    }

    #[test]
    fn fragmentation_reported_distinctly() {
        // layout: gap [0,3MB) | b | gap [7MB,10MB). 6 MB is free in total
        // but no single gap holds 5 MB.
        let mut mem = DeviceMemory::new(10 * MB, MB);
        let a = mem.allocate(MemoryKind::Mram, 3 * MB, "a").unwrap();
        let _b = mem.allocate(MemoryKind::Mram, 4 * MB, "b").unwrap();
        let c = mem.allocate(MemoryKind::Mram, 3 * MB, "c").unwrap();
        mem.free(a).unwrap();
        mem.free(c).unwrap();
        let err = mem.allocate(MemoryKind::Mram, 5 * MB, "big").unwrap_err();
        match err {
            MemoryError::Fragmented {
                requested,
                largest_gap,
                ..
            } => {
                assert_eq!(requested, 5 * MB);
                assert_eq!(largest_gap, 3 * MB);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn first_fit_reuses_earliest_gap() {
        let mut mem = DeviceMemory::new(10 * MB, MB);
        let a = mem.allocate(MemoryKind::Mram, 2 * MB, "a").unwrap();
        let _b = mem.allocate(MemoryKind::Mram, 2 * MB, "b").unwrap();
        mem.free(a).unwrap();
        let c = mem.allocate(MemoryKind::Mram, MB, "c").unwrap();
        assert_eq!(mem.region(c).unwrap().offset, 0);
    }

    #[test]
    fn write_then_read_round_trips() {
        let mut mem = DeviceMemory::new(MB, MB);
        let r = mem.allocate(MemoryKind::Sram, 1024, "buf").unwrap();
        let data: Vec<u8> = (0..=255).collect();
        mem.write(r, 100, &data).unwrap();
        assert_eq!(mem.read(r, 100, 256).unwrap(), data);
    }

    #[test]
    fn bounds_checked_on_both_sides() {
        let mut mem = DeviceMemory::new(MB, MB);
        let r = mem.allocate(MemoryKind::Sram, 64, "buf").unwrap();
        assert!(matches!(
            mem.write(r, 60, &[0; 8]),
            Err(MemoryError::OutOfBounds { .. })
        ));
        assert!(matches!(
            mem.read(r, 64, 1),
            Err(MemoryError::OutOfBounds { .. })
        ));
        // touching the last byte exactly is fine
        mem.write(r, 56, &[1; 8]).unwrap();
    }

    #[test]
    fn counters_accumulate_bytes_and_calls() {
        let mut mem = DeviceMemory::new(MB, MB);
        let r = mem.allocate(MemoryKind::Sram, 64 * 100, "buf").unwrap();
        for i in 0..100 {
            mem.write(r, i * 64, &[0xAB; 64]).unwrap();
        }
        let c = mem.counters(MemoryKind::Sram);
        assert_eq!(c.writes, 100);
        assert_eq!(c.bytes_written, 6400);
        assert_eq!(c.reads, 0);
        mem.read(r, 0, 64).unwrap();
        assert_eq!(mem.counters(MemoryKind::Sram).bytes_read, 64);
        assert_eq!(mem.counters(MemoryKind::Mram).writes, 0);
    }

    #[test]
    fn power_cycle_preserves_mram_wipes_sram() {
        let mut mem = DeviceMemory::new(MB, MB);
        let coeff = mem.allocate(MemoryKind::Mram, 128, "model").unwrap();
        let act = mem.allocate(MemoryKind::Sram, 128, "fmap").unwrap();
        mem.write(coeff, 0, &[0x5A; 128]).unwrap();
        mem.write(act, 0, &[0xC3; 128]).unwrap();

        mem.power_cycle();

        assert_eq!(mem.read(coeff, 0, 128).unwrap(), vec![0x5A; 128]);
        assert!(matches!(
            mem.read(act, 0, 1),
            Err(MemoryError::NoSuchRegion(_))
        ));
        let fresh = mem.allocate(MemoryKind::Sram, 128, "fmap").unwrap();
        assert_eq!(mem.read(fresh, 0, 128).unwrap(), vec![0; 128]);
    }

    #[test]
    fn power_cycle_resets_counters_and_is_idempotent() {
        let mut mem = DeviceMemory::new(MB, MB);
        let r = mem.allocate(MemoryKind::Mram, 64, "m").unwrap();
        mem.write(r, 0, &[1; 64]).unwrap();
        mem.power_cycle();
        assert_eq!(*mem.counters(MemoryKind::Mram), AccessCounters::default());

        let after_one = (mem.regions.clone(), mem.mram.clone(), mem.sram.clone());
        mem.power_cycle();
        assert_eq!(mem.regions, after_one.0);
        assert_eq!(mem.mram, after_one.1);
        assert_eq!(mem.sram, after_one.2);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.mpim");

        let mut mem = DeviceMemory::new(MB, MB);
        let a = mem.allocate(MemoryKind::Mram, 300, "alpha").unwrap();
        let b = mem.allocate(MemoryKind::Mram, 77, "beta").unwrap();
        let s = mem.allocate(MemoryKind::Sram, 50, "scratch").unwrap();
        mem.write(a, 0, &[7; 300]).unwrap();
        mem.write(b, 10, &[9; 60]).unwrap();
        mem.write(s, 0, &[1; 50]).unwrap();
        mem.save_snapshot(&path).unwrap();

        let mut back = DeviceMemory::load_snapshot(&path, 2 * MB).unwrap();
        assert_eq!(back.capacity(MemoryKind::Mram), MB);
        assert_eq!(back.capacity(MemoryKind::Sram), 2 * MB);
        assert_eq!(back.regions_of(MemoryKind::Mram).count(), 2);
        assert_eq!(back.regions_of(MemoryKind::Sram).count(), 0);

        let alpha = back
            .regions_of(MemoryKind::Mram)
            .find(|r| r.owner == "alpha")
            .unwrap()
            .id;
        assert_eq!(back.read(alpha, 0, 300).unwrap(), vec![7; 300]);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mpim");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            DeviceMemory::load_snapshot(&path, MB),
            Err(MemoryError::BadSnapshot(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Random interleavings of allocate and free keep regions
            /// disjoint and within capacity, and byte totals stay consistent.
            #[test]
            fn disjoint_under_random_alloc_free(ops in proptest::collection::vec((0u8..3, 1u64..600), 1..60)) {
                let mut mem = DeviceMemory::new(4096, 4096);
                let mut live: Vec<RegionId> = Vec::new();
                for (op, len) in ops {
                    match op {
                        0 => {
                            if let Ok(id) = mem.allocate(MemoryKind::Mram, len, "m") {
                                live.push(id);
                            }
                        }
                        1 => {
                            if let Ok(id) = mem.allocate(MemoryKind::Sram, len, "s") {
                                live.push(id);
                            }
                        }
                        _ => {
                            if !live.is_empty() {
                                let id = live.remove(len as usize % live.len());
                                mem.free(id).unwrap();
                            }
                        }
                    }
                    prop_assert!(mem.regions_disjoint());
                    prop_assert!(mem.free_bytes(MemoryKind::Mram) <= 4096);
                }
            }
        }
    }
}
