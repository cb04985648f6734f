use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::layout::{CANONICAL_LIMIT, PAGE_SIZE};

type Page = Box<[u8; PAGE_SIZE as usize]>;

/// An access touched a non-canonical address or an unmapped byte. Carries the
/// address of the access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemFault(pub u64);

/// Byte-exact range that is zero until first touched.
#[derive(Debug, Clone, Copy)]
struct DemandZero {
    start: u64,
    end: u64,
}

/// Sparse guest address space made of 4 KiB pages.
#[derive(Debug, Default)]
pub struct GuestMemory {
    index: BTreeMap<u64, usize>,
    pages: Vec<Page>,
    demand_zero: Vec<DemandZero>,
    cache: Option<(u64, usize)>,
}

fn page_of(addr: u64) -> u64 {
    addr / PAGE_SIZE
}

impl GuestMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps every page overlapping `[start, start + len)`.
    pub fn map(&mut self, start: u64, len: u64) {
        if len == 0 {
            return;
        }
        for p in page_of(start)..=page_of(start + len - 1) {
            self.materialize(p);
        }
    }

    /// Registers `[start, end)` as zero-filled on first touch. Bytes outside
    /// the range stay unmapped even when they share a page with it, so the
    /// range must not share pages with ordinary mappings.
    pub fn map_demand_zero(&mut self, start: u64, end: u64) {
        self.demand_zero.push(DemandZero { start, end });
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        self.index.contains_key(&page_of(addr))
    }

    fn materialize(&mut self, page: u64) -> usize {
        if let Some(&i) = self.index.get(&page) {
            return i;
        }
        let i = self.pages.len();
        self.pages.push(Box::new([0; PAGE_SIZE as usize]));
        self.index.insert(page, i);
        i
    }

    fn validate(&self, addr: u64, len: u64) -> Result<(), MemFault> {
        if addr >= CANONICAL_LIMIT {
            return Err(MemFault(addr));
        }
        let Some(last) = addr.checked_add(len.max(1) - 1).filter(|&l| l < CANONICAL_LIMIT) else {
            return Err(MemFault(addr));
        };
        let reserved = |d: &&DemandZero| {
            let lo = page_of(d.start) * PAGE_SIZE;
            let hi = (page_of(d.end - 1) + 1) * PAGE_SIZE;
            addr < hi && last >= lo
        };
        if let Some(dz) = self.demand_zero.iter().find(reserved) {
            return if addr >= dz.start && last < dz.end { Ok(()) } else { Err(MemFault(addr)) };
        }
        for p in page_of(addr)..=page_of(last) {
            if !self.index.contains_key(&p) {
                return Err(MemFault(addr));
            }
        }
        Ok(())
    }

    fn page_mut(&mut self, page: u64) -> &mut [u8; PAGE_SIZE as usize] {
        let i = match self.cache {
            Some((p, i)) if p == page => i,
            _ => {
                let i = self.materialize(page);
                self.cache = Some((page, i));
                i
            }
        };
        &mut self.pages[i]
    }

    pub fn read(&mut self, addr: u64, buf: &mut [u8]) -> Result<(), MemFault> {
        self.validate(addr, buf.len() as u64)?;
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u64;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            let page = self.page_mut(page_of(a));
            buf[done..done + n].copy_from_slice(&page[off..off + n]);
            done += n;
        }
        Ok(())
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MemFault> {
        self.validate(addr, data.len() as u64)?;
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let page = self.page_mut(page_of(a));
            page[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    /// Little-endian load of `size` ≤ 8 bytes, zero-extended.
    pub fn load(&mut self, addr: u64, size: u64) -> Result<u64, MemFault> {
        let mut buf = [0u8; 8];
        self.read(addr, &mut buf[..size as usize])?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Little-endian store of the low `size` ≤ 8 bytes of `value`.
    pub fn store(&mut self, addr: u64, size: u64, value: u64) -> Result<(), MemFault> {
        self.write(addr, &value.to_le_bytes()[..size as usize])
    }

    pub fn mapped_pages(&self) -> usize {
        self.pages.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmapped_and_noncanonical_fault() {
        let mut m = GuestMemory::new();
        assert_eq!(m.load(0x1000, 8), Err(MemFault(0x1000)));
        m.map(0x1000, 16);
        assert_eq!(m.load(0x1000, 8), Ok(0));
        let enriched = 0x8000_0001_0000_0000;
        assert_eq!(m.load(enriched, 1), Err(MemFault(enriched)));
        assert_eq!(m.store(0xFFFF_0000_0000_1000, 8, 1), Err(MemFault(0xFFFF_0000_0000_1000)));
    }

    #[test]
    fn store_load_round_trip_across_pages() {
        let mut m = GuestMemory::new();
        m.map(0x1000, 0x2000);
        m.store(0x1ffc, 8, 0x1122_3344_5566_7788).unwrap();
        assert_eq!(m.load(0x1ffc, 8), Ok(0x1122_3344_5566_7788));
        assert_eq!(m.load(0x2000, 4), Ok(0x1122_3344));
        assert_eq!(m.load(0x1ffc, 2), Ok(0x7788));
    }

    #[test]
    fn faulting_store_does_not_mutate() {
        let mut m = GuestMemory::new();
        m.map(0x1000, 0x1000);
        m.store(0x1ff8, 8, u64::MAX).unwrap();
        assert_eq!(m.store(0x1ffc, 8, 0), Err(MemFault(0x1ffc)));
        assert_eq!(m.load(0x1ff8, 8), Ok(u64::MAX));
    }

    #[test]
    fn demand_zero_is_byte_exact() {
        let mut m = GuestMemory::new();
        m.map_demand_zero(0x10_0000, 0x10_0020);
        assert_eq!(m.load(0x10_0018, 8), Ok(0));
        assert_eq!(m.load(0x10_0020, 8), Err(MemFault(0x10_0020)));
        assert_eq!(m.load(0x10_001c, 8), Err(MemFault(0x10_001c)));
        assert_eq!(m.mapped_pages(), 1);
    }
}
