//! Ground-truth monitor for uninstrumented runs.
//!
//! Every pointer value carries the uid of the object it was derived from.
//! Provenance survives copies, pointer arithmetic, 8-byte memory round trips
//! and casts that the analysis matches. Integer arithmetic on a pointer, or
//! an unmatched integer-to-pointer cast, marks the tag laundered; accesses
//! through laundered or untagged pointers are counted as unknown provenance
//! and never judged. Violating accesses are recorded and suppressed so the
//! run continues.

use std::collections::{BTreeSet, HashMap};

use cup_core::analysis::Plan;
use cup_core::ir::{BinOp, Module};
use cup_core::vm::{self, Access, AccessKind, Config, ExecutionResult, Monitor, Program, Region, Site};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tag {
    /// 0 for values with no pointer provenance.
    pub uid: u32,
    pub laundered: bool,
}

impl Tag {
    fn exact(&self) -> bool {
        self.uid != 0 && !self.laundered
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Object {
    pub uid: u32,
    pub region: Region,
    pub base: u64,
    pub size: u64,
    pub live: bool,
    pub site: Option<Site>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    SpatialOver,
    SpatialUnder,
    Uaf,
    InvalidFree,
}

impl ViolationKind {
    pub fn is_temporal(self) -> bool {
        self == ViolationKind::Uaf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Read,
    Write,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub site: Site,
    pub kind: ViolationKind,
    pub operation: Operation,
    pub uid: u32,
    pub region: Region,
    pub addr: u64,
    pub size: u64,
    /// Byte offset of the access from the object's base.
    pub offset: i64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct OracleTrace {
    pub objects: Vec<Object>,
    pub violations: Vec<Violation>,
    /// Accesses through laundered or untagged pointers.
    pub unknown_provenance: Vec<Site>,
    pub accesses: u64,
}

#[derive(Debug, Default)]
pub struct Oracle {
    trace: OracleTrace,
    heap_blocks: HashMap<u64, u32>,
    /// Tags of pointer-sized words in guest memory, keyed by 8-aligned address.
    shadow: HashMap<u64, Tag>,
    matched_casts: BTreeSet<Site>,
}

impl Oracle {
    /// An oracle for `m`, trusting the casts that `plan` matches.
    pub fn new(m: &Module, plan: &Plan) -> Self {
        let matched_casts = plan
            .casts
            .iter()
            .filter(|c| c.source.is_some())
            .filter_map(|c| {
                let instr = m.function(&c.function)?.instr(c.at)?;
                Some(Site { function: c.function.clone(), line: instr.loc.line, instr_index: instr.loc.instr_index })
            })
            .collect();
        Oracle { matched_casts, ..Oracle::default() }
    }

    pub fn into_trace(self) -> OracleTrace {
        self.trace
    }

    fn object(&self, uid: u32) -> &Object {
        &self.trace.objects[uid as usize - 1]
    }

    fn record(&mut self, site: &Site, kind: ViolationKind, operation: Operation, uid: u32, addr: u64, size: u64) {
        let o = self.object(uid);
        let v = Violation {
            site: site.clone(),
            kind,
            operation,
            uid,
            region: o.region,
            addr,
            size,
            offset: addr.wrapping_sub(o.base) as i64,
        };
        self.trace.violations.push(v);
    }

    fn clear_words(&mut self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = addr & !7;
        let last = (addr + len - 1) & !7;
        let mut w = first;
        while w <= last {
            self.shadow.remove(&w);
            w += 8;
        }
    }
}

impl Monitor for Oracle {
    type Tag = Tag;

    fn object_created(&mut self, region: Region, base: u64, size: u64, site: Option<&Site>) -> Tag {
        let uid = self.trace.objects.len() as u32 + 1;
        self.trace.objects.push(Object { uid, region, base, size, live: true, site: site.cloned() });
        if region == Region::Heap {
            self.heap_blocks.insert(base, uid);
        }
        Tag { uid, laundered: false }
    }

    fn stack_released(&mut self, tag: Tag) {
        if tag.uid != 0 {
            self.trace.objects[tag.uid as usize - 1].live = false;
        }
    }

    fn access(&mut self, site: &Site, tag: Tag, addr: u64, size: u64, kind: AccessKind) -> Access {
        self.trace.accesses += 1;
        if !tag.exact() {
            self.trace.unknown_provenance.push(site.clone());
            return Access::Proceed;
        }
        let o = self.object(tag.uid);
        let op = match kind {
            AccessKind::Read => Operation::Read,
            AccessKind::Write => Operation::Write,
        };
        let violation = if !o.live {
            Some(ViolationKind::Uaf)
        } else if addr < o.base {
            Some(ViolationKind::SpatialUnder)
        } else if addr.checked_add(size).is_none_or(|e| e > o.base + o.size) {
            Some(ViolationKind::SpatialOver)
        } else {
            None
        };
        match violation {
            Some(k) => {
                self.record(site, k, op, tag.uid, addr, size);
                Access::Suppress
            }
            None => Access::Proceed,
        }
    }

    fn heap_validate(&mut self, site: &Site, tag: Tag, addr: u64) -> Access {
        if addr == 0 || !tag.exact() {
            return Access::Proceed;
        }
        let o = self.object(tag.uid);
        let kind = if !o.live {
            ViolationKind::Uaf
        } else if o.region != Region::Heap || addr != o.base {
            ViolationKind::InvalidFree
        } else {
            return Access::Proceed;
        };
        self.record(site, kind, Operation::Free, tag.uid, addr, 0);
        Access::Suppress
    }

    fn heap_freed(&mut self, addr: u64) {
        if let Some(uid) = self.heap_blocks.remove(&addr) {
            self.trace.objects[uid as usize - 1].live = false;
        }
    }

    fn heap_resized(&mut self, old: u64, new: u64, size: u64, site: &Site) -> Tag {
        if old == new {
            if let Some(&uid) = self.heap_blocks.get(&old) {
                self.trace.objects[uid as usize - 1].size = size;
                return Tag { uid, laundered: false };
            }
        }
        self.heap_freed(old);
        self.object_created(Region::Heap, new, size, Some(site))
    }

    fn store_tag(&mut self, addr: u64, size: u64, tag: Tag) {
        self.clear_words(addr, size);
        if size == 8 && addr.is_multiple_of(8) && tag.uid != 0 {
            self.shadow.insert(addr, tag);
        }
    }

    fn load_tag(&mut self, addr: u64, size: u64) -> Tag {
        if size == 8 && addr.is_multiple_of(8) {
            self.shadow.get(&addr).copied().unwrap_or_default()
        } else {
            Tag::default()
        }
    }

    fn copy_tags(&mut self, dst: u64, src: u64, len: u64) {
        let moved: Vec<_> = (0..len)
            .step_by(8)
            .filter(|k| (src + k).is_multiple_of(8) && k + 8 <= len)
            .map(|k| (dst + k, self.shadow.get(&(src + k)).copied()))
            .collect();
        self.clear_words(dst, len);
        for (addr, tag) in moved {
            if let (Some(tag), 0) = (tag, addr % 8) {
                self.shadow.insert(addr, tag);
            }
        }
    }

    fn clear_tags(&mut self, dst: u64, len: u64) {
        self.clear_words(dst, len);
    }

    fn binop(&mut self, _op: BinOp, a: Tag, b: Tag) -> Tag {
        match (a.uid, b.uid) {
            (0, 0) => Tag::default(),
            (_, 0) => Tag { laundered: true, ..a },
            (0, _) => Tag { laundered: true, ..b },
            _ => Tag::default(),
        }
    }

    fn int_to_ptr(&mut self, site: &Site, tag: Tag) -> Tag {
        if self.matched_casts.contains(site) {
            tag
        } else {
            Tag { laundered: tag.uid != 0, ..tag }
        }
    }
}

/// Runs `m` uninstrumented under the oracle.
pub fn oracle_run(m: &Module, args: &[u64], config: &Config) -> (ExecutionResult, OracleTrace) {
    let plan = cup_core::analysis::analyze(m);
    let oracle = Oracle::new(m, &plan);
    match Program::compile(m) {
        Ok(p) => {
            let (r, o) = vm::run_monitored(&p, args, config, oracle);
            (r, o.into_trace())
        }
        Err(_) => (vm::run(m, args, config), OracleTrace::default()),
    }
}
