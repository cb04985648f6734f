//! Finds the allocations that need protection, decides which stack
//! allocations can be checked against function-local bounds, and collects the
//! dereferences that must be checked.
//!
//! Everything here is intra-procedural and a pure function of the module.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::Serialize;

use crate::ir::{Function, InstrKind, InstrRef, Intrinsic, Module, Operand};
use crate::vm::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    MetadataChecked,
    LocalChecked,
    Unprotected,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocSite {
    Instr { function: String, at: InstrRef, reg: String },
    Global { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProtectedAlloc {
    pub site: AllocSite,
    pub region: Region,
    pub classification: Classification,
    /// Static size in bytes, when known.
    pub size: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EscapeReason {
    Aliased,
    StoredThroughParamPointer,
    AssignedToGlobal,
    PassedToCallee,
    Returned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EscapeReport {
    pub function: String,
    pub at: InstrRef,
    pub alloc: String,
    pub escapes: bool,
    pub reasons: BTreeSet<EscapeReason>,
}

/// What a dereferenced address was ultimately derived from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Root {
    StackAlloc(String),
    HeapAlloc(String),
    Param(String),
    CallResult(String),
    IntrinsicResult(String),
    Loaded(String),
    Global(String),
    /// Integer-to-pointer cast without a matching pointer-to-integer cast.
    IntToPtr(String),
    /// Arithmetic or a pointer-to-integer result used as an address.
    Computed(String),
    Immediate(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DerefKind {
    Load,
    Store,
    /// A buffer handed to the `print` syscall.
    Print,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "alloc", rename_all = "snake_case")]
pub enum CheckKind {
    /// Compare against the base/end registers of this stack allocation.
    Local(String),
    Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DerefSite {
    pub function: String,
    pub at: InstrRef,
    pub kind: DerefKind,
    pub root: Root,
    /// `None` for `print`, whose length is dynamic.
    pub access_size: Option<u64>,
    pub check: CheckKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GlobalRewrite {
    pub global: String,
    pub companion: String,
    pub constructor: String,
    pub size: u64,
}

/// An integer-to-pointer cast and, when matched, the pointer it restores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CastMatch {
    pub function: String,
    pub at: InstrRef,
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// A global array defined outside the module cannot get a companion
    /// pointer; instrumentation is refused.
    UnsupportedExternGlobal { global: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnsupportedExternGlobal { global } => {
                write!(f, "extern global array `{global}` cannot be instrumented")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Plan {
    pub allocations: Vec<ProtectedAlloc>,
    pub escapes: Vec<EscapeReport>,
    pub derefs: Vec<DerefSite>,
    pub global_rewrites: Vec<GlobalRewrite>,
    pub casts: Vec<CastMatch>,
    pub diagnostics: Vec<Diagnostic>,
}

impl Plan {
    pub fn classification(&self, function: &str, at: InstrRef) -> Option<Classification> {
        self.allocations.iter().find_map(|a| match &a.site {
            AllocSite::Instr { function: f, at: i, .. } if f == function && *i == at => Some(a.classification),
            _ => None,
        })
    }

    pub fn cast_source(&self, function: &str, at: InstrRef) -> Option<&str> {
        self.casts.iter().find(|c| c.function == function && c.at == at)?.source.as_deref()
    }

    pub fn deref(&self, function: &str, at: InstrRef) -> Option<&DerefSite> {
        self.derefs.iter().find(|d| d.function == function && d.at == at)
    }
}

pub const COMPANION_SUFFIX: &str = "__cup";
pub const GLOBAL_CTOR: &str = "__cup_init_globals";

/// Runs every analysis over `m`.
pub fn analyze(m: &Module) -> Plan {
    let mut plan = Plan::default();
    let (rewrites, diagnostics) = plan_global_rewrites(m);
    plan.global_rewrites = rewrites;
    plan.diagnostics = diagnostics;
    let protected_globals = protected_globals(m);
    for f in &m.functions {
        let facts = FunctionFacts::new(f);
        let mut local = BTreeSet::new();
        for (at, instr) in f.instrs() {
            match &instr.kind {
                InstrKind::StackAlloc { dst, elem_size, length, address_taken } => {
                    if !is_protected_stack(*length, *address_taken) {
                        continue;
                    }
                    let report = facts.escape_report(f, at, dst);
                    let classification = if report.escapes {
                        Classification::MetadataChecked
                    } else {
                        local.insert(dst.clone());
                        Classification::LocalChecked
                    };
                    plan.allocations.push(ProtectedAlloc {
                        site: AllocSite::Instr { function: f.name.clone(), at, reg: dst.clone() },
                        region: Region::Stack,
                        classification,
                        size: Some(elem_size * length),
                    });
                    plan.escapes.push(report);
                }
                InstrKind::HeapAlloc { dst, size } | InstrKind::HeapRealloc { dst, size, .. } => {
                    plan.allocations.push(ProtectedAlloc {
                        site: AllocSite::Instr { function: f.name.clone(), at, reg: dst.clone() },
                        region: Region::Heap,
                        classification: Classification::MetadataChecked,
                        size: match size {
                            Operand::Imm(n) => Some(*n),
                            Operand::Reg(_) => None,
                        },
                    });
                }
                InstrKind::IntToPtr { int, .. } => plan.casts.push(CastMatch {
                    function: f.name.clone(),
                    at,
                    source: facts.matched_cast(int).map(String::from),
                }),
                _ => {}
            }
        }
        plan.derefs.extend(facts.dereferences(f, &local, &protected_globals));
    }
    for g in &m.globals {
        if g.is_array && !g.is_extern {
            plan.allocations.push(ProtectedAlloc {
                site: AllocSite::Global { name: g.name.clone() },
                region: Region::Global,
                classification: Classification::MetadataChecked,
                size: Some(g.byte_size()),
            });
        }
    }
    plan
}

fn is_protected_stack(length: u64, address_taken: bool) -> bool {
    length > 1 || address_taken
}

/// Every stack array, address-taken stack slot, heap allocation and defined
/// global array.
pub fn find_protected_allocations(m: &Module) -> Vec<ProtectedAlloc> {
    analyze(m).allocations
}

/// Escape classification of the stack allocation defined at `at` in `f`.
pub fn classify_escape(f: &Function, at: InstrRef) -> Option<EscapeReport> {
    match &f.instr(at)?.kind {
        InstrKind::StackAlloc { dst, .. } => Some(FunctionFacts::new(f).escape_report(f, at, dst)),
        _ => None,
    }
}

/// Dereference sites of `f`, given which stack allocations are local-checked.
pub fn collect_dereferences(m: &Module, f: &Function, local: &BTreeSet<String>) -> Vec<DerefSite> {
    FunctionFacts::new(f).dereferences(f, local, &protected_globals(m))
}

fn protected_globals(m: &Module) -> BTreeSet<String> {
    m.globals.iter().filter(|g| g.is_array && !g.is_extern).map(|g| g.name.clone()).collect()
}

/// One companion pointer per defined global array, initialised by a single
/// constructor; extern global arrays are reported instead.
pub fn plan_global_rewrites(m: &Module) -> (Vec<GlobalRewrite>, Vec<Diagnostic>) {
    let mut rewrites = Vec::new();
    let mut diagnostics = Vec::new();
    let mut taken: BTreeSet<String> = m.globals.iter().map(|g| g.name.clone()).collect();
    let ctor = fresh_name(GLOBAL_CTOR, |n| m.function(n).is_some());
    for g in m.globals.iter().filter(|g| g.is_array) {
        if g.is_extern {
            diagnostics.push(Diagnostic::UnsupportedExternGlobal { global: g.name.clone() });
            continue;
        }
        let companion = fresh_name(&format!("{}{COMPANION_SUFFIX}", g.name), |n| taken.contains(n));
        taken.insert(companion.clone());
        rewrites.push(GlobalRewrite {
            global: g.name.clone(),
            companion,
            constructor: ctor.clone(),
            size: g.byte_size(),
        });
    }
    (rewrites, diagnostics)
}

fn fresh_name(base: &str, taken: impl Fn(&str) -> bool) -> String {
    if !taken(base) {
        return base.into();
    }
    (1..).map(|i| format!("{base}{i}")).find(|n| !taken(n)).expect("unbounded")
}

/// Use-def facts for one function.
struct FunctionFacts<'f> {
    defs: BTreeMap<&'f str, &'f InstrKind>,
    params: BTreeSet<&'f str>,
    unprotected_slots: BTreeSet<&'f str>,
}

impl<'f> FunctionFacts<'f> {
    fn new(f: &'f Function) -> Self {
        let mut defs = BTreeMap::new();
        let mut unprotected_slots = BTreeSet::new();
        for (_, instr) in f.instrs() {
            if let Some(d) = instr.kind.dst() {
                defs.insert(d, &instr.kind);
            }
            if let InstrKind::StackAlloc { dst, length, address_taken, .. } = &instr.kind {
                if !is_protected_stack(*length, *address_taken) {
                    unprotected_slots.insert(dst.as_str());
                }
            }
        }
        let params = f.params.iter().map(|p| p.name.as_str()).collect();
        FunctionFacts { defs, params, unprotected_slots }
    }

    /// The pointer a cast of `int` restores: `int` must be a pointer-to-int
    /// result, possibly through copies.
    fn matched_cast(&self, int: &'f Operand) -> Option<&'f str> {
        let mut r = int.as_reg()?;
        loop {
            match self.defs.get(r)? {
                InstrKind::Copy { src: Operand::Reg(s), .. } => r = s,
                InstrKind::PtrToInt { ptr: Operand::Reg(p), .. } => return Some(p),
                _ => return None,
            }
        }
    }

    fn root(&self, op: &'f Operand) -> Root {
        let mut r = match op {
            Operand::Imm(v) => return Root::Immediate(*v),
            Operand::Reg(r) => r.as_str(),
        };
        for _ in 0..=self.defs.len() {
            if self.params.contains(r) {
                return Root::Param(r.into());
            }
            let Some(def) = self.defs.get(r) else { return Root::Computed(r.into()) };
            let next = match def {
                InstrKind::PtrAdd { ptr, .. } => ptr,
                InstrKind::Copy { src, .. } => src,
                InstrKind::IntToPtr { int, .. } => match self.matched_cast(int) {
                    Some(p) => {
                        r = p;
                        continue;
                    }
                    None => return Root::IntToPtr(r.into()),
                },
                InstrKind::StackAlloc { .. } => return Root::StackAlloc(r.into()),
                InstrKind::HeapAlloc { .. } | InstrKind::HeapRealloc { .. } => return Root::HeapAlloc(r.into()),
                InstrKind::Call { .. } => return Root::CallResult(r.into()),
                InstrKind::Intrinsic { .. } => return Root::IntrinsicResult(r.into()),
                InstrKind::Load { .. } => return Root::Loaded(r.into()),
                InstrKind::GlobalAddr { global, .. } => return Root::Global(global.clone()),
                _ => return Root::Computed(r.into()),
            };
            match next {
                Operand::Imm(v) => return Root::Immediate(*v),
                Operand::Reg(n) => r = n,
            }
        }
        Root::Computed(r.into())
    }

    /// Registers holding `alloc` or an address derived from it, and the
    /// subset derived through a register copy.
    fn derived(&self, f: &'f Function, alloc: &'f str) -> (BTreeSet<&'f str>, BTreeSet<&'f str>) {
        let mut set = BTreeSet::from([alloc]);
        let mut copied = BTreeSet::new();
        let mut changed = true;
        while changed {
            changed = false;
            for (_, instr) in f.instrs() {
                let (dst, from, is_copy) = match &instr.kind {
                    InstrKind::PtrAdd { dst, ptr: Operand::Reg(p), .. } => (dst.as_str(), p.as_str(), false),
                    InstrKind::Copy { dst, src: Operand::Reg(s) } => (dst.as_str(), s.as_str(), true),
                    InstrKind::IntToPtr { dst, int } => match self.matched_cast(int) {
                        Some(p) => (dst.as_str(), p, true),
                        None => continue,
                    },
                    _ => continue,
                };
                if set.contains(from) && set.insert(dst) {
                    changed = true;
                }
                if (is_copy && set.contains(from) || copied.contains(from)) && copied.insert(dst) {
                    changed = true;
                }
            }
        }
        (set, copied)
    }

    fn escape_report(&self, f: &'f Function, at: InstrRef, alloc: &'f str) -> EscapeReport {
        let (set, copied) = self.derived(f, alloc);
        let mut reasons = BTreeSet::new();
        let is_derived = |o: &Operand| o.as_reg().is_some_and(|r| set.contains(r));
        let mut escape = |o: &Operand, reason: EscapeReason| {
            if let Some(r) = o.as_reg().filter(|r| set.contains(r)) {
                reasons.insert(reason);
                if copied.contains(r) {
                    reasons.insert(EscapeReason::Aliased);
                }
            }
        };
        for (_, instr) in f.instrs() {
            match &instr.kind {
                InstrKind::Call { args, .. } | InstrKind::Intrinsic { args, .. } => {
                    args.iter().for_each(|a| escape(a, EscapeReason::PassedToCallee))
                }
                InstrKind::HeapFree { ptr } | InstrKind::HeapRealloc { ptr, .. } => {
                    escape(ptr, EscapeReason::PassedToCallee)
                }
                InstrKind::Ret { val: Some(v) } => escape(v, EscapeReason::Returned),
                InstrKind::Store { ptr, src, .. } if is_derived(src) => {
                    let reason = match self.root(ptr) {
                        Root::Param(_) => EscapeReason::StoredThroughParamPointer,
                        Root::Global(_) => EscapeReason::AssignedToGlobal,
                        _ => EscapeReason::Aliased,
                    };
                    escape(src, reason);
                }
                InstrKind::PtrToInt { ptr, .. } => escape(ptr, EscapeReason::Aliased),
                InstrKind::BinOp { a, b, .. } => {
                    escape(a, EscapeReason::Aliased);
                    escape(b, EscapeReason::Aliased);
                }
                InstrKind::HeapAlloc { size, .. } => escape(size, EscapeReason::Aliased),
                InstrKind::PtrAdd { delta, .. } => escape(delta, EscapeReason::Aliased),
                InstrKind::IntToPtr { int, .. } if self.matched_cast(int).is_none() => {
                    escape(int, EscapeReason::Aliased)
                }
                _ => {}
            }
        }
        EscapeReport { function: f.name.clone(), at, alloc: alloc.into(), escapes: !reasons.is_empty(), reasons }
    }

    /// Addresses rooted at an immediate, an unprotected global or an
    /// unmatched integer cast are always raw after instrumentation, so they
    /// are not dereference sites.
    fn dereferences(&self, f: &'f Function, local: &BTreeSet<String>, globals: &BTreeSet<String>) -> Vec<DerefSite> {
        let mut out = Vec::new();
        for (at, instr) in f.instrs() {
            let (kind, addr, access_size) = match &instr.kind {
                InstrKind::Load { ptr, size, .. } => (DerefKind::Load, ptr, Some(*size)),
                InstrKind::Store { ptr, size, .. } => (DerefKind::Store, ptr, Some(*size)),
                InstrKind::Intrinsic { name, args, .. }
                    if Intrinsic::from_name(name).is_some_and(Intrinsic::is_syscall) =>
                {
                    (DerefKind::Print, &args[0], None)
                }
                _ => continue,
            };
            if addr.as_reg().is_some_and(|r| self.unprotected_slots.contains(r)) {
                continue;
            }
            let root = self.root(addr);
            match &root {
                Root::Immediate(_) | Root::IntToPtr(_) => continue,
                Root::Global(g) if !globals.contains(g) => continue,
                _ => {}
            }
            let check = match &root {
                Root::StackAlloc(a) if local.contains(a) => CheckKind::Local(a.clone()),
                _ => CheckKind::Metadata,
            };
            out.push(DerefSite { function: f.name.clone(), at, kind, root, access_size, check });
        }
        out
    }
}
