//! Rewrites a module so that every protected allocation carries an enriched
//! pointer and every collected dereference goes through a bounds check.
//!
//! Two lowerings produce the same machine behaviour. `Intrinsic` emits calls
//! to the `cup.*` runtime hooks. `Expanded` emits the same semantics as
//! inline integer arithmetic and table loads/stores against the table in
//! guest memory.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, CheckKind, Classification, DerefKind, Diagnostic, Plan};
use crate::capability::{ENRICHED_BIT, HIGH_MASK, ID_MASK, OFFSET_MASK};
use crate::ir::{
    BinOp, Block, Function, GlobalDef, Instr, InstrKind, InstrRef, Intrinsic, Module, Operand, SourceLoc, ValueKind,
};
use crate::vm::layout::{ENTRY_SIZE, NEXT_ENTRY_ADDR, TABLE_BASE};
use crate::vm::Site;

const ALL_ONES: u64 = u64::MAX;
const LOW_48: u64 = (1 << 48) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoweringMode {
    Intrinsic,
    Expanded,
}

impl LoweringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LoweringMode::Intrinsic => "intrinsic",
            LoweringMode::Expanded => "expanded",
        }
    }
}

impl core::str::FromStr for LoweringMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intrinsic" => Ok(LoweringMode::Intrinsic),
            "expanded" => Ok(LoweringMode::Expanded),
            _ => Err(format!("unknown lowering mode `{s}` (expected intrinsic or expanded)")),
        }
    }
}

/// Why an instruction was inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    AllocMeta,
    DeallocMeta,
    Check,
    LocalBounds,
    UnenrichForIntrinsic,
    GlobalCtor,
    /// Load of a protected global's companion pointer at a use.
    GlobalUse,
    /// Pointer/integer cast rewrite.
    Cast,
    /// Split-width pointer arithmetic (expanded mode).
    PtrArith,
}

/// How a check group validates its address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupCheck {
    Metadata,
    Local,
}

/// One inserted instruction at its position in the output module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvEntry {
    pub function: String,
    pub block: usize,
    pub index: usize,
    pub reason: Reason,
    pub group: u32,
}

/// The instructions emitted for one rewrite. Deleting a group and renaming
/// `output` to `input` yields a module that still validates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: u32,
    pub function: String,
    pub reason: Reason,
    /// Location of the instruction the group serves.
    pub line: u32,
    pub instr_index: u32,
    pub check: Option<GroupCheck>,
    pub input: Option<Operand>,
    pub output: Option<String>,
}

impl Group {
    pub fn site(&self) -> Site {
        Site { function: self.function.clone(), line: self.line, instr_index: self.instr_index }
    }

    /// A check whose removal must make the guarded access fault whenever it
    /// executes with an enriched address.
    pub fn is_fail_closed_check(&self) -> bool {
        matches!(self.reason, Reason::Check | Reason::UnenrichForIntrinsic)
            && self.check == Some(GroupCheck::Metadata)
            && self.output.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub entries: Vec<ProvEntry>,
    pub groups: Vec<Group>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentedModule {
    pub module: Module,
    pub provenance: Provenance,
    pub mode: LoweringMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstrumentError {
    Unsupported(Vec<Diagnostic>),
    PlanMismatch(String),
}

impl fmt::Display for InstrumentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstrumentError::Unsupported(ds) => {
                for (i, d) in ds.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    write!(f, "{d}")?;
                }
                Ok(())
            }
            InstrumentError::PlanMismatch(m) => write!(f, "plan does not match module: {m}"),
        }
    }
}

/// Analyses and instruments `m`.
pub fn instrument(m: &Module, mode: LoweringMode) -> Result<InstrumentedModule, InstrumentError> {
    instrument_module(m, &analysis::analyze(m), mode)
}

pub fn instrument_module(m: &Module, plan: &Plan, mode: LoweringMode) -> Result<InstrumentedModule, InstrumentError> {
    if !plan.diagnostics.is_empty() {
        return Err(InstrumentError::Unsupported(plan.diagnostics.clone()));
    }
    let mut provenance = Provenance::default();
    if plan.allocations.is_empty() {
        // Nothing can ever hold an enriched word.
        return Ok(InstrumentedModule { module: m.clone(), provenance, mode });
    }
    let companions: BTreeMap<&str, &str> =
        plan.global_rewrites.iter().map(|r| (r.global.as_str(), r.companion.as_str())).collect();
    let mut out = m.clone();
    for (fi, f) in m.functions.iter().enumerate() {
        let mut rw = Rewriter::new(f, plan, mode, &companions, &mut provenance);
        let blocks = rw.function()?;
        out.functions[fi].blocks = blocks;
    }
    if let Some(first) = plan.global_rewrites.first() {
        for r in &plan.global_rewrites {
            out.globals.push(GlobalDef {
                name: r.companion.clone(),
                elem_size: 8,
                length: 1,
                is_array: false,
                is_extern: false,
            });
        }
        let ctor = Function {
            name: first.constructor.clone(),
            params: Vec::new(),
            is_variadic: false,
            returns: ValueKind::I64,
            blocks: Vec::new(),
        };
        let mut rw = Rewriter::new(&ctor, plan, mode, &companions, &mut provenance);
        let block = rw.global_ctor();
        let mut ctor = ctor;
        ctor.blocks.push(block);
        out.functions.push(ctor);
        out.constructors.insert(0, first.constructor.clone());
    }
    Ok(InstrumentedModule { module: out, provenance, mode })
}

/// `m` with group `id` deleted and its output renamed to its input.
pub fn remove_group(im: &InstrumentedModule, id: u32) -> Option<Module> {
    let group = im.provenance.groups.iter().find(|g| g.id == id)?;
    let mut m = im.module.clone();
    let f = m.function_mut(&group.function)?;
    let mut doomed: Vec<(usize, usize)> =
        im.provenance.entries.iter().filter(|e| e.group == id).map(|e| (e.block, e.index)).collect();
    doomed.sort_unstable();
    for &(b, i) in doomed.iter().rev() {
        f.blocks.get_mut(b)?.instrs.remove(i);
    }
    if let (Some(out), Some(input)) = (&group.output, &group.input) {
        for block in &mut f.blocks {
            for instr in &mut block.instrs {
                for op in instr.kind.operands_mut() {
                    if op.as_reg() == Some(out.as_str()) {
                        *op = input.clone();
                    }
                }
            }
        }
    }
    Some(m)
}

struct NameGen {
    taken: BTreeSet<String>,
    counter: u32,
}

impl NameGen {
    fn new(f: &Function) -> Self {
        let mut taken: BTreeSet<String> = f.params.iter().map(|p| p.name.clone()).collect();
        for (_, instr) in f.instrs() {
            if let Some(d) = instr.kind.dst() {
                taken.insert(d.into());
            }
        }
        NameGen { taken, counter: 0 }
    }

    fn fresh(&mut self, hint: &str) -> String {
        loop {
            self.counter += 1;
            let name = format!("cup.{hint}{}", self.counter);
            if self.taken.insert(name.clone()) {
                return name;
            }
        }
    }

    fn derived(&mut self, base: &str, suffix: &str) -> String {
        let name = format!("{base}.{suffix}");
        if self.taken.insert(name.clone()) {
            return name;
        }
        self.fresh(suffix)
    }
}

struct Rewriter<'a> {
    f: &'a Function,
    plan: &'a Plan,
    mode: LoweringMode,
    companions: &'a BTreeMap<&'a str, &'a str>,
    prov: &'a mut Provenance,
    names: NameGen,
    /// Local-checked allocation -> (base, end) registers.
    local_bounds: BTreeMap<String, (String, String)>,
    /// Metadata-checked stack allocations in allocation order.
    stack_meta: Vec<String>,
    /// Output for the block being built.
    block: usize,
    out: Vec<Instr>,
    loc: SourceLoc,
    group: Option<u32>,
}

impl<'a> Rewriter<'a> {
    fn new(
        f: &'a Function,
        plan: &'a Plan,
        mode: LoweringMode,
        companions: &'a BTreeMap<&'a str, &'a str>,
        prov: &'a mut Provenance,
    ) -> Self {
        Rewriter {
            f,
            plan,
            mode,
            companions,
            prov,
            names: NameGen::new(f),
            local_bounds: BTreeMap::new(),
            stack_meta: Vec::new(),
            block: 0,
            out: Vec::new(),
            loc: SourceLoc::default(),
            group: None,
        }
    }

    fn begin(&mut self, reason: Reason, check: Option<GroupCheck>, input: Option<Operand>) {
        let id = self.prov.groups.len() as u32;
        self.prov.groups.push(Group {
            id,
            function: self.f.name.clone(),
            reason,
            line: self.loc.line,
            instr_index: self.loc.instr_index,
            check,
            input,
            output: None,
        });
        self.group = Some(id);
    }

    fn end(&mut self, output: Option<&str>) {
        let id = self.group.take().expect("group open");
        self.prov.groups[id as usize].output = output.map(String::from);
    }

    /// Appends an instruction, attributing it to the open group if any.
    fn emit(&mut self, kind: InstrKind) {
        if let Some(g) = self.group {
            let reason = self.prov.groups[g as usize].reason;
            self.prov.entries.push(ProvEntry {
                function: self.f.name.clone(),
                block: self.block,
                index: self.out.len(),
                reason,
                group: g,
            });
        }
        self.out.push(Instr::new(kind, self.loc.clone()));
    }

    fn bin(&mut self, op: BinOp, a: impl Into<Operand>, b: impl Into<Operand>) -> Operand {
        let dst = self.names.fresh("t");
        self.bin_to(&dst, op, a, b);
        Operand::Reg(dst)
    }

    fn bin_to(&mut self, dst: &str, op: BinOp, a: impl Into<Operand>, b: impl Into<Operand>) {
        self.emit(InstrKind::BinOp { dst: dst.into(), op, a: a.into(), b: b.into() });
    }

    fn load8(&mut self, addr: impl Into<Operand>) -> Operand {
        let dst = self.names.fresh("t");
        self.emit(InstrKind::Load { dst: dst.clone(), ptr: addr.into(), size: 8 });
        Operand::Reg(dst)
    }

    fn store8(&mut self, addr: impl Into<Operand>, v: impl Into<Operand>) {
        self.emit(InstrKind::Store { ptr: addr.into(), src: v.into(), size: 8 });
    }

    fn intrinsic(&mut self, dst: Option<&str>, which: Intrinsic, args: Vec<Operand>) {
        self.emit(InstrKind::Intrinsic { dst: dst.map(String::from), name: which.name().into(), args });
    }

    /// All-ones when `w` is enriched, else zero.
    fn select_mask(&mut self, w: &Operand) -> Operand {
        self.bin(BinOp::AShr, w.clone(), 63)
    }

    /// `w`'s effective capability ID (0 for raw words).
    fn effective_id(&mut self, w: &Operand, mask: &Operand) -> Operand {
        let hi = self.bin(BinOp::LShr, w.clone(), 32);
        let id = self.bin(BinOp::And, hi, ID_MASK);
        self.bin(BinOp::And, id, mask.clone())
    }

    fn entry_addr(&mut self, id: Operand) -> (Operand, Operand) {
        let scaled = self.bin(BinOp::Shl, id, ENTRY_SIZE.trailing_zeros() as u64);
        let base_addr = self.bin(BinOp::Add, scaled, TABLE_BASE);
        let end_addr = self.bin(BinOp::Add, base_addr.clone(), 8);
        (base_addr, end_addr)
    }

    /// `max(size, 1)`.
    fn nonzero_size(&mut self, size: &Operand) -> Operand {
        match size {
            Operand::Imm(n) => Operand::Imm((*n).max(1)),
            Operand::Reg(_) => {
                let z = self.bin(BinOp::Eq, size.clone(), 0);
                self.bin(BinOp::Add, size.clone(), z)
            }
        }
    }

    /// `(a & keep) | (b & !keep)`.
    fn select(&mut self, keep: &Operand, not_keep: &Operand, a: Operand, b: Operand, dst: Option<&str>) -> Operand {
        let x = self.bin(BinOp::And, a, keep.clone());
        let y = self.bin(BinOp::And, b, not_keep.clone());
        match dst {
            Some(d) => {
                self.bin_to(d, BinOp::Or, x, y);
                Operand::reg(d)
            }
            None => self.bin(BinOp::Or, x, y),
        }
    }

    fn alloc_meta(&mut self, dst: &str, raw: Operand, size: Operand) {
        self.begin(Reason::AllocMeta, None, Some(raw.clone()));
        match self.mode {
            LoweringMode::Intrinsic => self.intrinsic(Some(dst), Intrinsic::AllocMeta, alloc::vec![raw, size]),
            LoweringMode::Expanded => {
                let size = self.nonzero_size(&size);
                let id = self.load8(NEXT_ENTRY_ADDR);
                let (base_addr, end_addr) = self.entry_addr(id.clone());
                // Faults on an exhausted table: the entry lies past the mapping.
                let link = self.load8(base_addr.clone());
                let end = self.bin(BinOp::Add, raw.clone(), size);
                self.store8(base_addr, raw);
                self.store8(end_addr, end);
                let next = self.bin(BinOp::Add, id.clone(), link);
                let next = self.bin(BinOp::Add, next, 1);
                self.store8(NEXT_ENTRY_ADDR, next);
                let hi = self.bin(BinOp::Shl, id, 32);
                self.bin_to(dst, BinOp::Or, hi, ENRICHED_BIT);
            }
        }
        self.end(Some(dst));
    }

    fn free_meta(&mut self, w: Operand) {
        self.begin(Reason::DeallocMeta, None, Some(w.clone()));
        match self.mode {
            LoweringMode::Intrinsic => self.intrinsic(None, Intrinsic::FreeMeta, alloc::vec![w]),
            LoweringMode::Expanded => {
                let mask = self.select_mask(&w);
                let id = self.effective_id(&w, &mask);
                // ID 0 leaves the table untouched.
                let is_zero = self.bin(BinOp::Eq, id.clone(), 0);
                let keep = self.bin(BinOp::Sub, 0, is_zero);
                let change = self.bin(BinOp::Xor, keep.clone(), ALL_ONES);
                let (base_addr, end_addr) = self.entry_addr(id.clone());
                let next = self.load8(NEXT_ENTRY_ADDR);
                let old_base = self.load8(base_addr.clone());
                let old_end = self.load8(end_addr.clone());
                let link = self.bin(BinOp::Sub, next.clone(), id.clone());
                let link = self.bin(BinOp::Sub, link, 1);
                let new_base = self.select(&keep, &change, old_base, link, None);
                let new_end = self.bin(BinOp::And, old_end, keep.clone());
                let new_next = self.select(&keep, &change, next, id, None);
                self.store8(base_addr, new_base);
                self.store8(end_addr, new_end);
                self.store8(NEXT_ENTRY_ADDR, new_next);
            }
        }
        self.end(None);
    }

    fn realloc_meta(&mut self, dst: &str, old: Operand, new: Operand, size: Operand) {
        self.begin(Reason::AllocMeta, None, Some(new.clone()));
        match self.mode {
            LoweringMode::Intrinsic => self.intrinsic(Some(dst), Intrinsic::ReallocMeta, alloc::vec![old, new, size]),
            LoweringMode::Expanded => {
                let mask = self.select_mask(&old);
                let id = self.effective_id(&old, &mask);
                let is_zero = self.bin(BinOp::Eq, id.clone(), 0);
                let keep = self.bin(BinOp::Sub, 0, is_zero);
                let change = self.bin(BinOp::Xor, keep.clone(), ALL_ONES);
                let size = self.nonzero_size(&size);
                let end = self.bin(BinOp::Add, new.clone(), size);
                let (base_addr, end_addr) = self.entry_addr(id.clone());
                let old_base = self.load8(base_addr.clone());
                let old_end = self.load8(end_addr.clone());
                let nb = self.select(&keep, &change, old_base, new.clone(), None);
                let ne = self.select(&keep, &change, old_end, end, None);
                self.store8(base_addr, nb);
                self.store8(end_addr, ne);
                let hi = self.bin(BinOp::Shl, id, 32);
                let word = self.bin(BinOp::Or, hi, ENRICHED_BIT);
                self.select(&keep, &change, new, word, Some(dst));
            }
        }
        self.end(Some(dst));
    }

    /// Emits the table-based check of `size` bytes at `w`; returns the
    /// checked address register.
    fn check(&mut self, reason: Reason, w: Operand, size: Operand) -> Operand {
        self.begin(reason, Some(GroupCheck::Metadata), Some(w.clone()));
        let dst = self.names.fresh("chk");
        match self.mode {
            LoweringMode::Intrinsic => self.intrinsic(Some(&dst), Intrinsic::Check, alloc::vec![w, size]),
            LoweringMode::Expanded => {
                let (base, offset) = self.resolve(&w);
                let end_addr = self.bin(BinOp::Add, base.1.clone(), 8);
                let end = self.load8(end_addr);
                let addr = self.bin(BinOp::Add, base.0.clone(), offset);
                self.bounds(&dst, addr, size, base.0, end);
            }
        }
        self.end(Some(&dst));
        Operand::Reg(dst)
    }

    /// Loads the entry base for `w`; returns ((base, entry address), offset).
    fn resolve(&mut self, w: &Operand) -> ((Operand, Operand), Operand) {
        let mask = self.select_mask(w);
        let id = self.effective_id(w, &mask);
        let raw = self.bin(BinOp::Xor, mask, ALL_ONES);
        let offset_mask = self.bin(BinOp::Or, raw, OFFSET_MASK);
        let offset = self.bin(BinOp::And, w.clone(), offset_mask);
        let scaled = self.bin(BinOp::Shl, id, ENTRY_SIZE.trailing_zeros() as u64);
        let entry = self.bin(BinOp::Add, scaled, TABLE_BASE);
        let base = self.load8(entry.clone());
        ((base, entry), offset)
    }

    /// `dst = addr | (((addr - base) | (end - (addr + size))) & (1 << 63))`.
    fn bounds(&mut self, dst: &str, addr: Operand, size: Operand, base: Operand, end: Operand) {
        let below = self.bin(BinOp::Sub, addr.clone(), base);
        let last = self.bin(BinOp::Add, addr.clone(), size);
        let above = self.bin(BinOp::Sub, end, last);
        let either = self.bin(BinOp::Or, below, above);
        let mask = self.bin(BinOp::And, either, ENRICHED_BIT);
        self.bin_to(dst, BinOp::Or, addr, mask);
    }

    fn check_local(&mut self, addr: Operand, size: u64, alloc: &str) -> Operand {
        let (lb, le) = self.local_bounds.get(alloc).cloned().expect("bounds emitted at the allocation");
        self.begin(Reason::Check, Some(GroupCheck::Local), Some(addr.clone()));
        let dst = self.names.fresh("chk");
        match self.mode {
            LoweringMode::Intrinsic => self.intrinsic(
                Some(&dst),
                Intrinsic::CheckLocal,
                alloc::vec![addr, Operand::Imm(size), Operand::Reg(lb), Operand::Reg(le)],
            ),
            LoweringMode::Expanded => self.bounds(&dst, addr, Operand::Imm(size), Operand::Reg(lb), Operand::Reg(le)),
        }
        self.end(Some(&dst));
        Operand::Reg(dst)
    }

    fn unenrich(&mut self, dst: &str, w: Operand) {
        self.begin(Reason::Cast, None, Some(w.clone()));
        match self.mode {
            LoweringMode::Intrinsic => self.intrinsic(Some(dst), Intrinsic::Unenrich, alloc::vec![w]),
            LoweringMode::Expanded => {
                let ((base, _), offset) = self.resolve(&w);
                self.bin_to(dst, BinOp::Add, base, offset);
            }
        }
        self.end(Some(dst));
    }

    fn ptr_add(&mut self, dst: &str, ptr: Operand, delta: Operand) {
        let mut kinds = Vec::new();
        let names = &mut self.names;
        lower_ptr_add(dst, ptr, delta, &mut |k| kinds.push(k), &mut || names.fresh("t"));
        self.begin(Reason::PtrArith, None, None);
        for k in kinds {
            self.emit(k);
        }
        self.end(Some(dst));
    }

    fn deref_check(&mut self, at: InstrRef, addr: &Operand, size: Operand, reason: Reason) -> Option<Operand> {
        let (plan, f) = (self.plan, self.f);
        let site = plan.deref(&f.name, at)?;
        Some(match (&site.check, &size) {
            (CheckKind::Local(a), Operand::Imm(n)) => {
                let a = a.clone();
                self.check_local(addr.clone(), *n, &a)
            }
            _ => self.check(reason, addr.clone(), size),
        })
    }

    fn function(&mut self) -> Result<Vec<Block>, InstrumentError> {
        let f = self.f;
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for (bi, block) in f.blocks.iter().enumerate() {
            self.block = bi;
            self.out = Vec::with_capacity(block.instrs.len());
            for (ii, instr) in block.instrs.iter().enumerate() {
                self.loc = instr.loc.clone();
                self.instr(InstrRef { block: bi, index: ii }, &instr.kind)?;
            }
            blocks.push(Block { label: block.label.clone(), instrs: core::mem::take(&mut self.out) });
        }
        Ok(blocks)
    }

    fn keep(&mut self, kind: &InstrKind) {
        self.out.push(Instr::new(kind.clone(), self.loc.clone()));
    }

    fn instr(&mut self, at: InstrRef, kind: &InstrKind) -> Result<(), InstrumentError> {
        let (plan, f) = (self.plan, self.f);
        let fname = &f.name;
        match kind {
            InstrKind::StackAlloc { dst, elem_size, length, address_taken } => {
                let size = elem_size * length;
                match plan.classification(fname, at) {
                    None | Some(Classification::Unprotected) => self.keep(kind),
                    Some(Classification::LocalChecked) => {
                        self.keep(kind);
                        let lb = self.names.derived(dst, "lb");
                        let le = self.names.derived(dst, "le");
                        self.begin(Reason::LocalBounds, None, None);
                        self.emit(InstrKind::Copy { dst: lb.clone(), src: Operand::reg(dst) });
                        self.bin_to(&le, BinOp::Add, Operand::reg(dst), size);
                        self.end(None);
                        self.local_bounds.insert(dst.clone(), (lb, le));
                    }
                    Some(Classification::MetadataChecked) => {
                        let raw = self.names.derived(dst, "raw");
                        self.keep(&InstrKind::StackAlloc {
                            dst: raw.clone(),
                            elem_size: *elem_size,
                            length: *length,
                            address_taken: *address_taken,
                        });
                        self.alloc_meta(dst, Operand::Reg(raw), Operand::Imm(size));
                        self.stack_meta.push(dst.clone());
                    }
                }
            }
            InstrKind::HeapAlloc { dst, size } => {
                let raw = self.names.derived(dst, "raw");
                self.keep(&InstrKind::HeapAlloc { dst: raw.clone(), size: size.clone() });
                self.alloc_meta(dst, Operand::Reg(raw), size.clone());
            }
            InstrKind::HeapFree { ptr } => {
                let checked = self.check(Reason::Check, ptr.clone(), Operand::Imm(1));
                self.keep(&InstrKind::HeapFree { ptr: checked });
                self.free_meta(ptr.clone());
            }
            InstrKind::HeapRealloc { dst, ptr, size } => {
                let checked = self.check(Reason::Check, ptr.clone(), Operand::Imm(1));
                let raw = self.names.derived(dst, "raw");
                self.keep(&InstrKind::HeapRealloc { dst: raw.clone(), ptr: checked, size: size.clone() });
                self.realloc_meta(dst, ptr.clone(), Operand::Reg(raw), size.clone());
            }
            InstrKind::Load { dst, ptr, size } => match self.deref_check(at, ptr, Operand::Imm(*size), Reason::Check) {
                Some(c) => self.keep(&InstrKind::Load { dst: dst.clone(), ptr: c, size: *size }),
                None => self.keep(kind),
            },
            InstrKind::Store { ptr, src, size } => {
                match self.deref_check(at, ptr, Operand::Imm(*size), Reason::Check) {
                    Some(c) => self.keep(&InstrKind::Store { ptr: c, src: src.clone(), size: *size }),
                    None => self.keep(kind),
                }
            }
            InstrKind::Intrinsic { dst, name, args } if plan.deref(fname, at).is_some() => {
                let site = plan.deref(fname, at).expect("checked above");
                if site.kind != DerefKind::Print || args.len() != 2 {
                    return Err(InstrumentError::PlanMismatch(format!("`@{name}` in `{fname}` is not a print site")));
                }
                let checked = self.check(Reason::UnenrichForIntrinsic, args[0].clone(), args[1].clone());
                let mut args = args.clone();
                args[0] = checked;
                self.keep(&InstrKind::Intrinsic { dst: dst.clone(), name: name.clone(), args });
            }
            InstrKind::PtrToInt { dst, ptr } => self.unenrich(dst, ptr.clone()),
            InstrKind::IntToPtr { dst, int } => {
                self.begin(Reason::Cast, None, None);
                match plan.cast_source(fname, at) {
                    Some(src) => self.emit(InstrKind::Copy { dst: dst.clone(), src: Operand::reg(src) }),
                    None => self.bin_to(dst, BinOp::And, int.clone(), LOW_48),
                }
                self.end(Some(dst));
            }
            InstrKind::PtrAdd { dst, ptr, delta } => match self.mode {
                LoweringMode::Intrinsic => self.keep(kind),
                LoweringMode::Expanded => self.ptr_add(dst, ptr.clone(), delta.clone()),
            },
            InstrKind::GlobalAddr { dst, global } => match self.companions.get(global.as_str()) {
                Some(companion) => {
                    let slot = self.names.fresh("g");
                    self.begin(Reason::GlobalUse, None, None);
                    self.emit(InstrKind::GlobalAddr { dst: slot.clone(), global: (*companion).into() });
                    self.emit(InstrKind::Load { dst: dst.clone(), ptr: Operand::Reg(slot), size: 8 });
                    self.end(Some(dst));
                }
                None => self.keep(kind),
            },
            InstrKind::Ret { .. } => {
                for a in self.stack_meta.clone().iter().rev() {
                    self.free_meta(Operand::reg(a));
                }
                self.keep(kind);
            }
            _ => self.keep(kind),
        }
        Ok(())
    }

    fn global_ctor(&mut self) -> Block {
        self.block = 0;
        self.out = Vec::new();
        let mut index = 0u32;
        for r in self.plan.global_rewrites.clone() {
            self.loc = SourceLoc { file: String::new(), line: 0, instr_index: index };
            index += 1;
            let addr = self.names.fresh("g");
            let word = self.names.fresh("w");
            let slot = self.names.fresh("g");
            self.begin(Reason::GlobalCtor, None, None);
            self.emit(InstrKind::GlobalAddr { dst: addr.clone(), global: r.global.clone() });
            self.end(None);
            self.alloc_meta(&word, Operand::Reg(addr), Operand::Imm(r.size));
            self.begin(Reason::GlobalCtor, None, None);
            self.emit(InstrKind::GlobalAddr { dst: slot.clone(), global: r.companion.clone() });
            self.store8(Operand::Reg(slot), Operand::Reg(word));
            self.end(None);
        }
        self.loc = SourceLoc { file: String::new(), line: 0, instr_index: index };
        self.begin(Reason::GlobalCtor, None, None);
        self.emit(InstrKind::Ret { val: Some(Operand::Imm(0)) });
        self.end(None);
        Block { label: "entry".into(), instrs: core::mem::take(&mut self.out) }
    }
}

/// Split-width pointer addition as primitive arithmetic: enriched words keep
/// bits 63..32 and add modulo 2^32 in the low half; raw words add in full.
pub fn lower_ptr_add(
    dst: &str,
    ptr: Operand,
    delta: Operand,
    emit: &mut dyn FnMut(InstrKind),
    fresh: &mut dyn FnMut() -> String,
) {
    let mut bin = |op: BinOp, a: Operand, b: Operand, d: Option<&str>| -> Operand {
        let d = match d {
            Some(d) => d.into(),
            None => fresh(),
        };
        emit(InstrKind::BinOp { dst: d.clone(), op, a, b });
        Operand::Reg(d)
    };
    let mask = bin(BinOp::AShr, ptr.clone(), Operand::Imm(63), None);
    let keep_high = bin(BinOp::And, mask, Operand::Imm(HIGH_MASK), None);
    let sum = bin(BinOp::Add, ptr.clone(), delta, None);
    let take_sum = bin(BinOp::Xor, keep_high.clone(), Operand::Imm(ALL_ONES), None);
    let high = bin(BinOp::And, ptr, keep_high, None);
    let low = bin(BinOp::And, sum, take_sum, None);
    bin(BinOp::Or, high, low, Some(dst));
}
