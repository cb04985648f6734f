use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::ast::*;
use super::intrinsics::Intrinsic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub function: Option<String>,
    pub loc: Option<SourceLoc>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateFunction(String),
    MissingMain,
    UnknownConstructor(String),
    ConstructorTakesParams(String),
    DuplicateGlobal(String),
    BadElemSize(u64),
    BadLength(u64),
    DuplicateParam(String),
    EmptyFunction,
    DuplicateLabel(String),
    EmptyBlock(String),
    MissingTerminator(String),
    TerminatorNotLast(String),
    UnknownLabel(String),
    BranchToEntry,
    StackAllocOutsideEntry,
    BadAccessSize(u64),
    Redefinition(String),
    UndefinedRegister(String),
    UseNotDominated(String),
    UnknownCallee(String),
    Arity { callee: String, expected: usize, found: usize },
    UnknownIntrinsic(String),
    NoResult(String),
    UnknownGlobal(String),
    VaArgOutsideVariadic,
    ScalarSlotEscapes(String),
    ScalarAccessTooWide { slot: String, size: u64 },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ViolationKind::*;
        match self {
            DuplicateFunction(n) => write!(f, "function `{n}` defined more than once"),
            MissingMain => f.write_str("no `main` function"),
            UnknownConstructor(n) => write!(f, "constructor `{n}` is not a defined function"),
            ConstructorTakesParams(n) => write!(f, "constructor `{n}` must take no parameters"),
            DuplicateGlobal(n) => write!(f, "global `{n}` defined more than once"),
            BadElemSize(s) => write!(f, "element size {s} not in {{1,2,4,8}}"),
            BadLength(l) => write!(f, "invalid length {l}"),
            DuplicateParam(p) => write!(f, "parameter `{p}` declared twice"),
            EmptyFunction => f.write_str("function has no blocks"),
            DuplicateLabel(l) => write!(f, "label `{l}` defined twice"),
            EmptyBlock(l) => write!(f, "block `{l}` is empty"),
            MissingTerminator(l) => write!(f, "block `{l}` does not end in br/cbr/ret"),
            TerminatorNotLast(l) => write!(f, "terminator in the middle of block `{l}`"),
            UnknownLabel(l) => write!(f, "branch to undefined label `{l}`"),
            BranchToEntry => f.write_str("branch to the entry block"),
            StackAllocOutsideEntry => f.write_str("stack_alloc outside the entry block"),
            BadAccessSize(s) => write!(f, "access size {s} not in {{1,2,4,8}}"),
            Redefinition(r) => write!(f, "register `{r}` assigned more than once"),
            UndefinedRegister(r) => write!(f, "use of undefined register `{r}`"),
            UseNotDominated(r) => write!(f, "use of `{r}` not dominated by its definition"),
            UnknownCallee(c) => write!(f, "call to undefined function `{c}`"),
            Arity { callee, expected, found } => {
                write!(f, "`{callee}` expects {expected} arguments, got {found}")
            }
            UnknownIntrinsic(n) => write!(f, "unknown intrinsic `@{n}`"),
            NoResult(n) => write!(f, "`{n}` produces no value"),
            UnknownGlobal(g) => write!(f, "undefined global `{g}`"),
            VaArgOutsideVariadic => f.write_str("va_arg/va_count in a non-variadic function"),
            ScalarSlotEscapes(s) => {
                write!(f, "scalar slot `{s}` used as a value; mark it addr_taken")
            }
            ScalarAccessTooWide { slot, size } => {
                write!(f, "{size}-byte access overruns scalar slot `{slot}`")
            }
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(func) = &self.function {
            write!(f, "in `{func}`")?;
            if let Some(loc) = &self.loc {
                write!(f, " at line {}", loc.line)?;
            }
            f.write_str(": ")?;
        }
        write!(f, "{}", self.kind)
    }
}

fn valid_size(s: u64) -> bool {
    matches!(s, 1 | 2 | 4 | 8)
}

/// Empty iff the module satisfies every structural invariant.
pub fn validate(m: &Module) -> Vec<Violation> {
    let mut out = Vec::new();
    let module_level = |kind| Violation { function: None, loc: None, kind };

    let mut fnames = BTreeSet::new();
    for f in &m.functions {
        if !fnames.insert(f.name.as_str()) {
            out.push(module_level(ViolationKind::DuplicateFunction(f.name.clone())));
        }
    }
    if !fnames.contains("main") {
        out.push(module_level(ViolationKind::MissingMain));
    }
    for c in &m.constructors {
        match m.function(c) {
            None => out.push(module_level(ViolationKind::UnknownConstructor(c.clone()))),
            Some(f) if !f.params.is_empty() || f.is_variadic => {
                out.push(module_level(ViolationKind::ConstructorTakesParams(c.clone())))
            }
            Some(_) => {}
        }
    }
    let mut gnames = BTreeSet::new();
    for g in &m.globals {
        if !gnames.insert(g.name.as_str()) {
            out.push(module_level(ViolationKind::DuplicateGlobal(g.name.clone())));
        }
        if !valid_size(g.elem_size) {
            out.push(module_level(ViolationKind::BadElemSize(g.elem_size)));
        }
        if g.length == 0 || (!g.is_array && g.length != 1) {
            out.push(module_level(ViolationKind::BadLength(g.length)));
        }
    }
    for f in &m.functions {
        FunctionValidator { m, f, out: &mut out }.run();
    }
    out
}

struct FunctionValidator<'a> {
    m: &'a Module,
    f: &'a Function,
    out: &'a mut Vec<Violation>,
}

const PARAM_BLOCK: usize = usize::MAX;

impl<'a> FunctionValidator<'a> {
    fn push(&mut self, loc: Option<&SourceLoc>, kind: ViolationKind) {
        self.out.push(Violation { function: Some(self.f.name.clone()), loc: loc.cloned(), kind });
    }

    fn run(&mut self) {
        let f = self.f;
        let mut params = BTreeSet::new();
        for p in &f.params {
            if !params.insert(p.name.as_str()) {
                self.push(None, ViolationKind::DuplicateParam(p.name.clone()));
            }
        }
        if f.blocks.is_empty() {
            self.push(None, ViolationKind::EmptyFunction);
            return;
        }
        let mut labels = BTreeMap::new();
        for (i, b) in f.blocks.iter().enumerate() {
            if labels.insert(b.label.as_str(), i).is_some() {
                self.push(None, ViolationKind::DuplicateLabel(b.label.clone()));
            }
        }
        self.blocks_and_terminators(&labels);
        let defs = self.definitions();
        self.uses(&labels, &defs);
        self.scalar_slots();
    }

    fn blocks_and_terminators(&mut self, labels: &BTreeMap<&str, usize>) {
        let f = self.f;
        for (bi, b) in f.blocks.iter().enumerate() {
            match b.instrs.last() {
                None => self.push(None, ViolationKind::EmptyBlock(b.label.clone())),
                Some(last) if !last.kind.is_terminator() => {
                    self.push(Some(&last.loc), ViolationKind::MissingTerminator(b.label.clone()))
                }
                Some(_) => {}
            }
            let n = b.instrs.len();
            for (ii, instr) in b.instrs.iter().enumerate() {
                let loc = Some(&instr.loc);
                if instr.kind.is_terminator() && ii + 1 < n {
                    self.push(loc, ViolationKind::TerminatorNotLast(b.label.clone()));
                }
                for target in instr.kind.successors() {
                    match labels.get(target) {
                        None => self.push(loc, ViolationKind::UnknownLabel(target.into())),
                        Some(0) => self.push(loc, ViolationKind::BranchToEntry),
                        Some(_) => {}
                    }
                }
                match &instr.kind {
                    InstrKind::StackAlloc { elem_size, length, .. } => {
                        if bi != 0 {
                            self.push(loc, ViolationKind::StackAllocOutsideEntry);
                        }
                        if !valid_size(*elem_size) {
                            self.push(loc, ViolationKind::BadElemSize(*elem_size));
                        }
                        if *length == 0 || *length > u32::MAX as u64 {
                            self.push(loc, ViolationKind::BadLength(*length));
                        }
                    }
                    InstrKind::Load { size, .. } | InstrKind::Store { size, .. } if !valid_size(*size) => {
                        self.push(loc, ViolationKind::BadAccessSize(*size));
                    }
                    InstrKind::Call { callee, args, .. } => match self.m.function(callee) {
                        None => self.push(loc, ViolationKind::UnknownCallee(callee.clone())),
                        Some(g) => {
                            let expected = g.params.len();
                            let ok = if g.is_variadic { args.len() >= expected } else { args.len() == expected };
                            if !ok {
                                self.push(
                                    loc,
                                    ViolationKind::Arity { callee: callee.clone(), expected, found: args.len() },
                                );
                            }
                        }
                    },
                    InstrKind::Intrinsic { dst, name, args } => match Intrinsic::from_name(name) {
                        None => self.push(loc, ViolationKind::UnknownIntrinsic(name.clone())),
                        Some(i) => {
                            if args.len() != i.arity() {
                                self.push(
                                    loc,
                                    ViolationKind::Arity {
                                        callee: name.clone(),
                                        expected: i.arity(),
                                        found: args.len(),
                                    },
                                );
                            }
                            if dst.is_some() && i.returns().is_none() {
                                self.push(loc, ViolationKind::NoResult(name.clone()));
                            }
                            if matches!(i, Intrinsic::VaArg | Intrinsic::VaCount) && !self.f.is_variadic {
                                self.push(loc, ViolationKind::VaArgOutsideVariadic);
                            }
                        }
                    },
                    InstrKind::GlobalAddr { global, .. } if self.m.global(global).is_none() => {
                        self.push(loc, ViolationKind::UnknownGlobal(global.clone()));
                    }
                    _ => {}
                }
            }
        }
    }

    fn definitions(&mut self) -> BTreeMap<&'a str, (usize, usize)> {
        let f = self.f;
        let mut defs: BTreeMap<&'a str, (usize, usize)> = BTreeMap::new();
        for p in &f.params {
            defs.insert(p.name.as_str(), (PARAM_BLOCK, 0));
        }
        for (r, instr) in f.instrs() {
            if let Some(d) = instr.kind.dst() {
                if defs.insert(d, (r.block, r.index)).is_some() {
                    self.push(Some(&instr.loc), ViolationKind::Redefinition(d.into()));
                }
            }
        }
        defs
    }

    fn uses(&mut self, labels: &BTreeMap<&str, usize>, defs: &BTreeMap<&str, (usize, usize)>) {
        let f = self.f;
        let doms = dominators(f, labels);
        for (r, instr) in f.instrs() {
            let Some(block_doms) = &doms[r.block] else { continue };
            for u in instr.kind.uses() {
                match defs.get(u) {
                    None => self.push(Some(&instr.loc), ViolationKind::UndefinedRegister(u.into())),
                    Some(&(PARAM_BLOCK, _)) => {}
                    Some(&(db, di)) => {
                        let ok = if db == r.block { di < r.index } else { block_doms[db] };
                        if !ok {
                            self.push(Some(&instr.loc), ViolationKind::UseNotDominated(u.into()));
                        }
                    }
                }
            }
        }
    }

    /// Non-address-taken scalar slots may only be the address of a load or
    /// store that fits inside them.
    fn scalar_slots(&mut self) {
        let f = self.f;
        let mut slots = BTreeMap::new();
        for (_, instr) in f.instrs() {
            if let InstrKind::StackAlloc { dst, elem_size, length: 1, address_taken: false } = &instr.kind {
                slots.insert(dst.as_str(), *elem_size);
            }
        }
        if slots.is_empty() {
            return;
        }
        for (_, instr) in f.instrs() {
            let (addr, size) = match &instr.kind {
                InstrKind::Load { ptr, size, .. } => (Some(ptr), *size),
                InstrKind::Store { ptr, size, .. } => (Some(ptr), *size),
                _ => (None, 0),
            };
            for op in instr.kind.operands() {
                let Some(r) = op.as_reg() else { continue };
                let Some(&slot_size) = slots.get(r) else { continue };
                let is_addr = addr.is_some_and(|a| core::ptr::eq(a, op));
                if !is_addr {
                    self.push(Some(&instr.loc), ViolationKind::ScalarSlotEscapes(r.into()));
                } else if size > slot_size {
                    self.push(Some(&instr.loc), ViolationKind::ScalarAccessTooWide { slot: r.into(), size });
                }
            }
        }
    }
}

/// `result[b][d]` is true when block `d` dominates block `b`; `None` for
/// blocks unreachable from the entry.
fn dominators(f: &Function, labels: &BTreeMap<&str, usize>) -> Vec<Option<Vec<bool>>> {
    let n = f.blocks.len();
    let succs: Vec<Vec<usize>> = f
        .blocks
        .iter()
        .map(|b| {
            b.instrs
                .last()
                .map(|i| i.kind.successors().into_iter().filter_map(|t| labels.get(t).copied()).collect())
                .unwrap_or_default()
        })
        .collect();
    let mut reachable = vec![false; n];
    let mut stack = vec![0usize];
    while let Some(b) = stack.pop() {
        if core::mem::replace(&mut reachable[b], true) {
            continue;
        }
        stack.extend(succs[b].iter().copied());
    }
    let mut preds = vec![Vec::new(); n];
    for (b, ss) in succs.iter().enumerate() {
        if reachable[b] {
            for &s in ss {
                preds[s].push(b);
            }
        }
    }
    let mut doms: Vec<Vec<bool>> =
        (0..n).map(|b| if b == 0 { (0..n).map(|d| d == 0).collect() } else { vec![true; n] }).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for b in 1..n {
            if !reachable[b] {
                continue;
            }
            let mut new = vec![true; n];
            for &p in &preds[b] {
                for d in 0..n {
                    new[d] &= doms[p][d];
                }
            }
            new[b] = true;
            if new != doms[b] {
                doms[b] = new;
                changed = true;
            }
        }
    }
    doms.into_iter().zip(reachable).map(|(d, r)| r.then_some(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_unvalidated;

    fn violations(text: &str) -> Vec<ViolationKind> {
        validate(&parse_unvalidated(text, "t.mir").unwrap()).into_iter().map(|v| v.kind).collect()
    }

    #[test]
    fn valid_module_has_no_violations() {
        let text = "global g = int32 x 4\nfunc main() {\n  a = stack_alloc 4 x 10\n  i = stack_alloc 8 x 1\n  store 8 i, 0\n  br loop\nloop:\n  x = load 8 i\n  c = slt x, 10\n  cbr c, body, done\nbody:\n  p = ptr_add a, 4\n  store 4 p, x\n  y = add x, 1\n  store 8 i, y\n  br loop\ndone:\n  ret 0\n}\n";
        assert_eq!(violations(text), []);
    }

    #[test]
    fn duplicate_function() {
        assert_eq!(
            violations("func f() { ret 0 }\nfunc f() { ret 1 }\nfunc main() { ret 0 }"),
            [ViolationKind::DuplicateFunction("f".into())]
        );
    }

    #[test]
    fn load_size_three() {
        assert_eq!(
            violations("func main() { a = stack_alloc 4 x 2; x = load 3 a; ret 0 }"),
            [ViolationKind::BadAccessSize(3)]
        );
    }

    #[test]
    fn missing_main_and_bad_ctor() {
        let v = violations("ctors nope\nfunc f() { ret 0 }");
        assert!(v.contains(&ViolationKind::MissingMain));
        assert!(v.contains(&ViolationKind::UnknownConstructor("nope".into())));
    }

    #[test]
    fn redefinition_and_undefined() {
        let v = violations("func main() { x = add 1, 2; x = add y, 1; ret x }");
        assert!(v.contains(&ViolationKind::Redefinition("x".into())));
        assert!(v.contains(&ViolationKind::UndefinedRegister("y".into())));
    }

    #[test]
    fn use_must_be_dominated() {
        let text =
            "func main() {\n  c = add 0, 1\n  cbr c, a, b\na:\n  x = add 1, 1\n  br j\nb:\n  br j\nj:\n  ret x\n}\n";
        assert_eq!(violations(text), [ViolationKind::UseNotDominated("x".into())]);
    }

    #[test]
    fn stack_alloc_must_be_in_entry() {
        let text = "func main() {\n  br b\nb:\n  a = stack_alloc 4 x 2\n  ret 0\n}\n";
        assert_eq!(violations(text), [ViolationKind::StackAllocOutsideEntry]);
    }

    #[test]
    fn control_flow_shape() {
        let v = violations("func main() {\n  ret 0\n  ret 1\nx:\n  br main\n}\n");
        assert!(v.contains(&ViolationKind::TerminatorNotLast("entry".into())));
        assert!(v.contains(&ViolationKind::UnknownLabel("main".into())));
        let v = violations("func main() {\n  br l\nl:\n  br entry\n}\n");
        assert_eq!(v, [ViolationKind::BranchToEntry]);
        let v = violations("func main() {\n  x = add 1, 2\n}\n");
        assert_eq!(v, [ViolationKind::MissingTerminator("entry".into())]);
    }

    #[test]
    fn calls_and_intrinsics() {
        let v = violations(
            "func f(a: i64) { ret a }\nfunc main() { x = call f(); @nope(); y = @print(0, 1); z = call g(); ret 0 }",
        );
        assert!(v.contains(&ViolationKind::Arity { callee: "f".into(), expected: 1, found: 0 }));
        assert!(v.contains(&ViolationKind::UnknownIntrinsic("nope".into())));
        assert!(v.contains(&ViolationKind::NoResult("print".into())));
        assert!(v.contains(&ViolationKind::UnknownCallee("g".into())));
        let v = violations("func main() { x = @va_arg(0); ret 0 }");
        assert_eq!(v, [ViolationKind::VaArgOutsideVariadic]);
    }

    #[test]
    fn scalar_slot_rules() {
        let v = violations("func f(p: ptr) { ret 0 }\nfunc main() { i = stack_alloc 4 x 1; r = call f(i); ret 0 }");
        assert_eq!(v, [ViolationKind::ScalarSlotEscapes("i".into())]);
        let v = violations("func main() { i = stack_alloc 4 x 1; x = load 8 i; ret 0 }");
        assert_eq!(v, [ViolationKind::ScalarAccessTooWide { slot: "i".into(), size: 8 }]);
        let v = violations(
            "func f(p: ptr) { ret 0 }\nfunc main() { i = stack_alloc 4 x 1 addr_taken; r = call f(i); ret 0 }",
        );
        assert_eq!(v, []);
        let v = violations("func main() { i = stack_alloc 8 x 1; store 8 i, i; ret 0 }");
        assert_eq!(v, [ViolationKind::ScalarSlotEscapes("i".into())]);
    }

    #[test]
    fn global_invariants() {
        let v = violations("global g = 3 x 2\nglobal g = int8 x 0\nfunc main() { x = global_addr h; ret 0 }");
        assert!(v.contains(&ViolationKind::BadElemSize(3)));
        assert!(v.contains(&ViolationKind::DuplicateGlobal("g".into())));
        assert!(v.contains(&ViolationKind::BadLength(0)));
        assert!(v.contains(&ViolationKind::UnknownGlobal("h".into())));
    }
}
