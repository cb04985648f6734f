//! Hybrid capability metadata: the enriched-word codec, the metadata table
//! with its intrusive free list, and the branchless bounds check.
//!
//! An enriched word keeps the pointer width at 64 bits:
//!
//! ```text
//!  63  62                    32 31                     0
//! +---+-------------------------+------------------------+
//! | 1 |     capability id       |      byte offset       |
//! +---+-------------------------+------------------------+
//! ```
//!
//! With bit 63 clear the word is a plain guest address, which the check
//! resolves against the reserved entry 0 (all of user space).

use alloc::string::String;
use alloc::vec::Vec;
use core::convert::Infallible;
use core::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

pub const ENRICHED_BIT: u64 = 1 << 63;
pub const OFFSET_MASK: u64 = 0xFFFF_FFFF;
pub const HIGH_MASK: u64 = !OFFSET_MASK;
pub const ID_MASK: u64 = 0x7FFF_FFFF;
/// One past the largest capability ID representable in the 31-bit field.
pub const ID_LIMIT: u64 = 1 << 31;
/// Exclusive end of canonical user space; the bounds of entry 0.
pub const USER_SPACE_END: u64 = 1 << 48;
pub const DEFAULT_CAPACITY: u32 = 1 << 20;

pub type CapId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapError {
    /// The ID does not fit in the 31-bit field.
    IdOutOfRange(u64),
    /// `next_entry` reached the table capacity.
    Exhausted { next_entry: CapId },
    /// Allocation with `base >= end`.
    EmptyRange { base: u64, end: u64 },
    /// Freeing entry 0, a freed entry, or an entry never handed out.
    InvalidFree(CapId),
}

impl fmt::Display for CapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapError::IdOutOfRange(id) => write!(f, "capability id {id} exceeds 31 bits"),
            CapError::Exhausted { next_entry } => {
                write!(f, "capability ids exhausted (next_entry = {next_entry})")
            }
            CapError::EmptyRange { base, end } => {
                write!(f, "empty capability range [{base:#x}, {end:#x})")
            }
            CapError::InvalidFree(id) => write!(f, "invalid or double free of capability {id}"),
        }
    }
}

/// A 64-bit guest value: either an enriched `{id, offset}` pair or a raw address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnrichedWord(pub u64);

impl fmt::Debug for EnrichedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EnrichedWord({:#018x})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decoded {
    pub enriched: bool,
    /// Bits 62..32 when enriched, 0 otherwise.
    pub id: CapId,
    /// Low 32 bits.
    pub offset: u32,
}

impl EnrichedWord {
    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub const fn is_enriched(self) -> bool {
        self.0 & ENRICHED_BIT != 0
    }

    /// All-ones when bit 63 is set, all-zeros otherwise (arithmetic shift).
    #[inline]
    pub const fn select_mask(self) -> u64 {
        ((self.0 as i64) >> 63) as u64
    }

    #[inline]
    pub const fn effective_id(self) -> CapId {
        (((self.0 >> 32) & ID_MASK) & self.select_mask()) as CapId
    }

    pub const fn decode(self) -> Decoded {
        Decoded { enriched: self.is_enriched(), id: self.effective_id(), offset: (self.0 & OFFSET_MASK) as u32 }
    }

    /// The value added to the entry's base to form the guest address: the
    /// 32-bit offset for enriched words, the whole word otherwise.
    #[inline]
    pub const fn address_offset(self) -> u64 {
        self.0 & (!self.select_mask() | OFFSET_MASK)
    }
}

pub fn encode(id: u64, offset: u32) -> Result<EnrichedWord, CapError> {
    if id >= ID_LIMIT {
        return Err(CapError::IdOutOfRange(id));
    }
    Ok(EnrichedWord(ENRICHED_BIT | (id << 32) | offset as u64))
}

/// Pointer arithmetic on a possibly-enriched word. Enriched words only ever
/// change in their low 32 bits, so an offset wrap can never reach the ID.
#[inline]
pub const fn ptr_add(word: u64, delta: u64) -> u64 {
    let sum = word.wrapping_add(delta);
    let keep_high = EnrichedWord(word).select_mask() & HIGH_MASK;
    (word & keep_high) | (sum & !keep_high)
}

/// Sign-bit bounds check. Returns 0 when `base <= addr` and
/// `addr + size <= end`, and `1 << 63` otherwise. Exact for canonical
/// operands (all below 2^48 + 2^32).
#[inline]
pub const fn check_bounds(base: u64, end: u64, addr: u64, size: u64) -> u64 {
    let below = addr.wrapping_sub(base);
    let above = end.wrapping_sub(addr.wrapping_add(size));
    (below | above) & ENRICHED_BIT
}

/// Same contract as [`check_bounds`] with compare-and-branch; kept for the
/// overhead microbenchmark.
#[inline(never)]
pub fn check_bounds_branching(base: u64, end: u64, addr: u64, size: u64) -> u64 {
    if addr < base {
        return ENRICHED_BIT;
    }
    match addr.checked_add(size) {
        Some(last) if last <= end => 0,
        _ => ENRICHED_BIT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub base: u64,
    /// Exclusive. Zero marks a freed (or never used) entry.
    pub end: u64,
}

impl MetadataEntry {
    pub const RESERVED: MetadataEntry = MetadataEntry { base: 0, end: USER_SPACE_END };

    #[inline]
    pub const fn is_live(&self) -> bool {
        self.end != 0
    }
}

/// Backing storage for the table. The simulated machine keeps the table in
/// guest memory where reads can fault; the in-process table never does.
pub trait EntryStore {
    type Fault;

    fn capacity(&self) -> u32;
    fn read_entry(&mut self, id: CapId) -> Result<MetadataEntry, Self::Fault>;
    fn write_entry(&mut self, id: CapId, entry: MetadataEntry) -> Result<(), Self::Fault>;
    fn next_entry(&mut self) -> Result<CapId, Self::Fault>;
    fn set_next_entry(&mut self, next: CapId) -> Result<(), Self::Fault>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableError<F> {
    Capability(CapError),
    Fault(F),
}

impl<F> From<CapError> for TableError<F> {
    fn from(e: CapError) -> Self {
        TableError::Capability(e)
    }
}

/// Pops the head of the free list and records `[base, end)` there.
pub fn alloc_entry<S: EntryStore>(
    store: &mut S,
    base: u64,
    end: u64,
) -> Result<(CapId, EnrichedWord), TableError<S::Fault>> {
    if base >= end {
        return Err(CapError::EmptyRange { base, end }.into());
    }
    let id = store.next_entry().map_err(TableError::Fault)?;
    if id >= store.capacity() {
        return Err(CapError::Exhausted { next_entry: id }.into());
    }
    let offset = store.read_entry(id).map_err(TableError::Fault)?.base;
    store.write_entry(id, MetadataEntry { base, end }).map_err(TableError::Fault)?;
    let next = (id as u64).wrapping_add(offset).wrapping_add(1);
    store.set_next_entry(next as CapId).map_err(TableError::Fault)?;
    Ok((id, encode(id as u64, 0)?))
}

/// Invalidates `id` and pushes it on the free list.
pub fn free_entry<S: EntryStore>(store: &mut S, id: CapId) -> Result<(), TableError<S::Fault>> {
    if id == 0 || id >= store.capacity() {
        return Err(CapError::InvalidFree(id).into());
    }
    let entry = store.read_entry(id).map_err(TableError::Fault)?;
    if !entry.is_live() {
        return Err(CapError::InvalidFree(id).into());
    }
    let next = store.next_entry().map_err(TableError::Fault)?;
    let link = (next as u64).wrapping_sub(id as u64).wrapping_sub(1);
    store.write_entry(id, MetadataEntry { base: link, end: 0 }).map_err(TableError::Fault)?;
    store.set_next_entry(id).map_err(TableError::Fault)
}

/// Resolves a word to a guest address, OR-ing `1 << 63` into it when the
/// access of `size` bytes falls outside the word's capability.
pub fn check<S: EntryStore>(store: &mut S, word: EnrichedWord, size: u64) -> Result<u64, S::Fault> {
    let entry = store.read_entry(word.effective_id())?;
    Ok(check_against(entry, word, size))
}

#[inline]
pub const fn check_against(entry: MetadataEntry, word: EnrichedWord, size: u64) -> u64 {
    let addr = entry.base.wrapping_add(word.address_offset());
    addr | check_bounds(entry.base, entry.end, addr, size)
}

/// Recovers the guest address without a bounds check (pointer-to-int casts).
pub fn unenrich<S: EntryStore>(store: &mut S, word: EnrichedWord) -> Result<u64, S::Fault> {
    let entry = store.read_entry(word.effective_id())?;
    Ok(entry.base.wrapping_add(word.address_offset()))
}

/// In-process metadata table, zero-initialised except for entry 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataTable {
    entries: Vec<MetadataEntry>,
    next_entry: CapId,
    capacity: u32,
    high_water: CapId,
}

impl Default for MetadataTable {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY)
    }
}

impl MetadataTable {
    /// `capacity` is clamped to `[2, 2^31]`; entries are materialised lazily.
    pub fn with_capacity(capacity: u32) -> Self {
        let capacity = capacity.clamp(2, ID_LIMIT as u32);
        let entries = alloc::vec![MetadataEntry::RESERVED];
        MetadataTable { entries, next_entry: 1, capacity, high_water: 1 }
    }

    pub fn next_entry_value(&self) -> CapId {
        self.next_entry
    }

    pub fn capacity_value(&self) -> u32 {
        self.capacity
    }

    pub fn entry(&self, id: CapId) -> MetadataEntry {
        self.entries.get(id as usize).copied().unwrap_or_default()
    }

    pub fn alloc(&mut self, base: u64, end: u64) -> Result<(CapId, EnrichedWord), CapError> {
        alloc_entry(self, base, end).map_err(unwrap_infallible)
    }

    pub fn free(&mut self, id: CapId) -> Result<(), CapError> {
        free_entry(self, id).map_err(unwrap_infallible)
    }

    pub fn check(&mut self, word: EnrichedWord, size: u64) -> u64 {
        check_against(self.entry(word.effective_id()), word, size)
    }

    pub fn live_ids(&self) -> Vec<CapId> {
        (1..self.high_water).filter(|&id| self.entry(id).is_live()).collect()
    }

    /// IDs reachable from `next_entry` through the free list, stopping at the
    /// never-used frontier. `None` if the walk touches a live entry or fails
    /// to terminate within `capacity` steps.
    pub fn free_chain(&self) -> Option<Vec<CapId>> {
        let mut chain = Vec::new();
        let mut id = self.next_entry as u64;
        for _ in 0..=self.capacity {
            if id >= self.high_water as u64 {
                return Some(chain);
            }
            let entry = self.entry(id as CapId);
            if entry.is_live() {
                return None;
            }
            chain.push(id as CapId);
            id = id.wrapping_add(entry.base).wrapping_add(1);
        }
        None
    }

    /// One line per touched entry: `id base end live|free`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for id in 0..self.high_water {
            let e = self.entry(id);
            let state = if e.is_live() { "live" } else { "free" };
            let _ = writeln!(out, "{id} {:#018x} {:#018x} {state}", e.base, e.end);
        }
        out
    }
}

fn unwrap_infallible(e: TableError<Infallible>) -> CapError {
    match e {
        TableError::Capability(c) => c,
        TableError::Fault(never) => match never {},
    }
}

impl EntryStore for MetadataTable {
    type Fault = Infallible;

    fn capacity(&self) -> u32 {
        self.capacity
    }

    fn read_entry(&mut self, id: CapId) -> Result<MetadataEntry, Infallible> {
        Ok(self.entry(id))
    }

    fn write_entry(&mut self, id: CapId, entry: MetadataEntry) -> Result<(), Infallible> {
        let idx = id as usize;
        if idx >= self.entries.len() {
            self.entries.resize(idx + 1, MetadataEntry::default());
        }
        self.entries[idx] = entry;
        self.high_water = self.high_water.max(id + 1);
        Ok(())
    }

    fn next_entry(&mut self) -> Result<CapId, Infallible> {
        Ok(self.next_entry)
    }

    fn set_next_entry(&mut self, next: CapId) -> Result<(), Infallible> {
        self.next_entry = next;
        Ok(())
    }
}
