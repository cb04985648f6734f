use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::layout::{round_up, HEAP_ALIGN, HEAP_BASE, HEAP_HEADER, HEAP_LIMIT};
use super::memory::{GuestMemory, MemFault};

const MAGIC_USED: u64 = 0xA110_C8ED_A110_C8ED;
const MAGIC_FREE: u64 = 0xF4EE_F4EE_F4EE_F4EE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeapError {
    /// Header access hit a bad address (e.g. an enriched pointer).
    Fault(MemFault),
    InvalidFree(u64),
    OutOfMemory(u64),
}

impl From<MemFault> for HeapError {
    fn from(f: MemFault) -> Self {
        HeapError::Fault(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resized {
    pub addr: u64,
    pub moved: bool,
}

/// Bump allocator with per-size LIFO bins. Each block is a 16-byte header
/// (rounded size, state word) followed by the user region, rounded up to 16
/// bytes. Headers are written with raw addresses.
#[derive(Debug)]
pub struct Heap {
    frontier: u64,
    bins: BTreeMap<u64, Vec<u64>>,
}

impl Default for Heap {
    fn default() -> Self {
        Heap { frontier: HEAP_BASE, bins: BTreeMap::new() }
    }
}

/// Bytes reserved for a request of `n`.
pub fn rounded_size(n: u64) -> u64 {
    round_up(n.max(1), HEAP_ALIGN)
}

impl Heap {
    pub fn malloc(&mut self, mem: &mut GuestMemory, n: u64) -> Result<u64, HeapError> {
        if n > HEAP_LIMIT {
            return Err(HeapError::OutOfMemory(n));
        }
        let size = rounded_size(n);
        let user = match self.bins.get_mut(&size).and_then(Vec::pop) {
            Some(user) => user,
            None => {
                let header = self.frontier;
                let next = header + HEAP_HEADER + size;
                if next - HEAP_BASE > HEAP_LIMIT {
                    return Err(HeapError::OutOfMemory(n));
                }
                mem.map(header, HEAP_HEADER + size);
                self.frontier = next;
                header + HEAP_HEADER
            }
        };
        mem.store(user - HEAP_HEADER, 8, size)?;
        mem.store(user - HEAP_HEADER + 8, 8, MAGIC_USED)?;
        Ok(user)
    }

    /// Rounded size of a live block, reading its header.
    fn live_block(&self, mem: &mut GuestMemory, p: u64) -> Result<u64, HeapError> {
        let header = p.wrapping_sub(HEAP_HEADER);
        let magic = mem.load(header.wrapping_add(8), 8)?;
        if p < HEAP_BASE + HEAP_HEADER || p >= self.frontier || magic != MAGIC_USED {
            return Err(HeapError::InvalidFree(p));
        }
        Ok(mem.load(header, 8)?)
    }

    pub fn free(&mut self, mem: &mut GuestMemory, p: u64) -> Result<(), HeapError> {
        if p == 0 {
            return Ok(());
        }
        let size = self.live_block(mem, p)?;
        mem.store(p - HEAP_HEADER + 8, 8, MAGIC_FREE)?;
        self.bins.entry(size).or_default().push(p);
        Ok(())
    }

    /// Shrinks or grows in place when the block already has room or ends at
    /// the frontier; otherwise allocates, copies and frees.
    pub fn realloc(&mut self, mem: &mut GuestMemory, p: u64, n: u64) -> Result<Resized, HeapError> {
        let old = self.live_block(mem, p)?;
        let new = rounded_size(n);
        if new <= old {
            return Ok(Resized { addr: p, moved: false });
        }
        if p + old == self.frontier && n <= HEAP_LIMIT && self.frontier + (new - old) - HEAP_BASE <= HEAP_LIMIT {
            mem.map(self.frontier, new - old);
            self.frontier += new - old;
            mem.store(p - HEAP_HEADER, 8, new)?;
            return Ok(Resized { addr: p, moved: false });
        }
        let q = self.malloc(mem, n)?;
        let mut buf = alloc::vec![0u8; old as usize];
        mem.read(p, &mut buf)?;
        mem.write(q, &buf)?;
        self.free(mem, p)?;
        Ok(Resized { addr: q, moved: true })
    }

    /// Bytes between the heap base and the bump frontier.
    pub fn footprint(&self) -> u64 {
        self.frontier - HEAP_BASE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Heap, GuestMemory) {
        (Heap::default(), GuestMemory::new())
    }

    #[test]
    fn malloc_rounds_and_writes_header() {
        let (mut h, mut m) = setup();
        let a = h.malloc(&mut m, 10).unwrap();
        assert_eq!(a, HEAP_BASE + 16);
        assert_eq!(m.load(a - 16, 8), Ok(16));
        let b = h.malloc(&mut m, 17).unwrap();
        assert_eq!(b, a + 16 + 16);
        assert_eq!(h.footprint(), 16 + 16 + 16 + 32);
        let z = h.malloc(&mut m, 0).unwrap();
        assert_eq!(m.load(z - 16, 8), Ok(16));
    }

    #[test]
    fn free_then_malloc_same_size_reuses_block() {
        let (mut h, mut m) = setup();
        let a = h.malloc(&mut m, 40).unwrap();
        let _b = h.malloc(&mut m, 40).unwrap();
        h.free(&mut m, a).unwrap();
        assert_eq!(h.malloc(&mut m, 33).unwrap(), a);
    }

    #[test]
    fn invalid_and_double_free() {
        let (mut h, mut m) = setup();
        let a = h.malloc(&mut m, 8).unwrap();
        assert_eq!(h.free(&mut m, a + 8), Err(HeapError::InvalidFree(a + 8)));
        h.free(&mut m, a).unwrap();
        assert_eq!(h.free(&mut m, a), Err(HeapError::InvalidFree(a)));
        assert_eq!(h.free(&mut m, 0), Ok(()));
        let enriched = 0x8000_0001_0000_0000;
        assert!(matches!(h.free(&mut m, enriched), Err(HeapError::Fault(_))));
    }

    #[test]
    fn realloc_in_place_and_moving() {
        let (mut h, mut m) = setup();
        let a = h.malloc(&mut m, 8).unwrap();
        assert_eq!(h.realloc(&mut m, a, 16), Ok(Resized { addr: a, moved: false }));
        assert_eq!(h.realloc(&mut m, a, 64), Ok(Resized { addr: a, moved: false }));
        let _b = h.malloc(&mut m, 8).unwrap();
        m.store(a, 8, 0xDEAD).unwrap();
        let r = h.realloc(&mut m, a, 128).unwrap();
        assert!(r.moved);
        assert_eq!(m.load(r.addr, 8), Ok(0xDEAD));
        assert_eq!(h.free(&mut m, a), Err(HeapError::InvalidFree(a)));
    }
}
