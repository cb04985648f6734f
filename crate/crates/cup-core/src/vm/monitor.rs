use core::fmt::Debug;

use serde::{Deserialize, Serialize};

use super::Site;
use crate::ir::BinOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Stack,
    Heap,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Proceed,
    /// Skip the access; reads yield zero.
    Suppress,
}

/// Observer attached to an execution. Every register and every 8-byte memory
/// word carries a `Tag`; the interpreter propagates tags through copies,
/// pointer arithmetic and casts, and asks the monitor before each access.
///
/// The default methods make a monitor that observes nothing.
pub trait Monitor {
    type Tag: Copy + Default + PartialEq + Debug;

    fn object_created(&mut self, _region: Region, _base: u64, _size: u64, _site: Option<&Site>) -> Self::Tag {
        Self::Tag::default()
    }

    /// A stack object's frame was popped.
    fn stack_released(&mut self, _tag: Self::Tag) {}

    fn access(&mut self, _site: &Site, _tag: Self::Tag, _addr: u64, _size: u64, _kind: AccessKind) -> Access {
        Access::Proceed
    }

    /// Called before `free` or `realloc` hands `addr` to the allocator.
    fn heap_validate(&mut self, _site: &Site, _tag: Self::Tag, _addr: u64) -> Access {
        Access::Proceed
    }

    fn heap_freed(&mut self, _addr: u64) {}

    /// `realloc` moved or resized the block at `old` to `new` with `size`
    /// requested bytes.
    fn heap_resized(&mut self, _old: u64, _new: u64, _size: u64, _site: &Site) -> Self::Tag {
        Self::Tag::default()
    }

    fn store_tag(&mut self, _addr: u64, _size: u64, _tag: Self::Tag) {}

    fn load_tag(&mut self, _addr: u64, _size: u64) -> Self::Tag {
        Self::Tag::default()
    }

    fn copy_tags(&mut self, _dst: u64, _src: u64, _len: u64) {}

    fn clear_tags(&mut self, _dst: u64, _len: u64) {}

    fn binop(&mut self, _op: BinOp, _a: Self::Tag, _b: Self::Tag) -> Self::Tag {
        Self::Tag::default()
    }

    fn ptr_to_int(&mut self, tag: Self::Tag) -> Self::Tag {
        tag
    }

    fn int_to_ptr(&mut self, _site: &Site, tag: Self::Tag) -> Self::Tag {
        tag
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoMonitor;

impl Monitor for NoMonitor {
    type Tag = ();
}
