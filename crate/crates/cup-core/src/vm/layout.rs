//! Fixed guest address-space layout. Every region sits below 2^48 with bit 63
//! clear, so raw addresses never look enriched.

pub const PAGE_SIZE: u64 = 4096;

/// Addresses at or above this have a nonzero top 16 bits and always fault.
pub const CANONICAL_LIMIT: u64 = 1 << 48;

pub const GLOBAL_BASE: u64 = 0x0000_0040_0000_0000;

pub const HEAP_BASE: u64 = 0x0000_1000_0000_0000;
pub const HEAP_LIMIT: u64 = 1 << 32;

/// The table's `next_entry` cursor, alone on its page.
pub const NEXT_ENTRY_ADDR: u64 = 0x0000_1FFF_FFFF_F000;
/// Entry `id` occupies `[TABLE_BASE + 16 * id, TABLE_BASE + 16 * id + 16)`:
/// base then end, both little-endian.
pub const TABLE_BASE: u64 = 0x0000_2000_0000_0000;
pub const ENTRY_SIZE: u64 = 16;

pub const STACK_TOP: u64 = 0x0000_7000_0000_0000;
pub const STACK_LIMIT: u64 = 8 << 20;

pub const HEAP_HEADER: u64 = 16;
pub const HEAP_ALIGN: u64 = 16;
pub const STACK_ALIGN: u64 = 16;

pub const fn entry_addr(id: u64) -> u64 {
    TABLE_BASE.wrapping_add(id.wrapping_mul(ENTRY_SIZE))
}

pub const fn round_up(n: u64, align: u64) -> u64 {
    n.wrapping_add(align - 1) & !(align - 1)
}
