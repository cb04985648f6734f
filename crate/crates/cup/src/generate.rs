//! Seeded random generator of corpus cases.
//!
//! A generated program allocates a handful of arrays on the stack, on the
//! heap and in globals, touches them at in-bounds offsets directly, through
//! helper functions and through `memset`, and prints a checksum of what it
//! read. The buggy variant adds exactly one violating access; the patched
//! variant is the same program with that access made valid or removed.

use std::fmt::Write as _;

use cup_core::vm::Region;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusCase, Designation, Expectation, InjectedViolation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Arrays allocated by `main`, 1..=16.
    pub n_objects: usize,
    /// Maximum element count per array, 2..=256.
    pub max_len: u64,
    /// In-bounds accesses, 0..=256.
    pub n_accesses: usize,
    /// Probability that the buggy variant differs from the patched one.
    pub bug_rate: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { n_objects: 4, max_len: 16, n_accesses: 12, bug_rate: 1.0 }
    }
}

impl GenParams {
    pub fn check(&self) -> Result<(), String> {
        if !(1..=16).contains(&self.n_objects) {
            return Err(format!("n_objects {} outside 1..=16", self.n_objects));
        }
        if !(2..=256).contains(&self.max_len) {
            return Err(format!("max_len {} outside 2..=256", self.max_len));
        }
        if self.n_accesses > 256 {
            return Err(format!("n_accesses {} exceeds 256", self.n_accesses));
        }
        if !(0.0..=1.0).contains(&self.bug_rate) {
            return Err(format!("bug_rate {} outside [0, 1]", self.bug_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Home {
    /// Only ever accessed directly, so it stays function-local.
    StackLocal,
    StackEscaping,
    Heap,
    Global,
}

impl Home {
    fn region(self) -> Region {
        match self {
            Home::StackLocal | Home::StackEscaping => Region::Stack,
            Home::Heap => Region::Heap,
            Home::Global => Region::Global,
        }
    }
}

#[derive(Debug, Clone)]
struct Obj {
    name: String,
    home: Home,
    elem: u64,
    len: u64,
}

impl Obj {
    fn bytes(&self) -> u64 {
        self.elem * self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Via {
    Direct,
    Helper,
    Memset,
}

#[derive(Debug, Clone)]
struct Access {
    obj: usize,
    offset: i64,
    size: u64,
    write: bool,
    via: Via,
    value: u8,
}

#[derive(Debug, Clone)]
enum Bug {
    Spatial {
        kind: InjectedViolation,
        access: Access,
        at: usize,
    },
    HeapUaf {
        access: Access,
        reuse: bool,
    },
    /// Dereference of a pointer to a returned frame's array.
    StackUaf {
        elem: u64,
        len: u64,
        offset: i64,
        reuse: bool,
    },
}

struct Gen {
    rng: ChaCha8Rng,
    objs: Vec<Obj>,
    regs: usize,
}

impl Gen {
    fn fresh(&mut self, prefix: &str) -> String {
        self.regs += 1;
        format!("{prefix}{}", self.regs)
    }

    fn object(&mut self, i: usize, max_len: u64) -> Obj {
        let home = *[Home::StackLocal, Home::StackEscaping, Home::Heap, Home::Global].choose(&mut self.rng).unwrap();
        let elem = *[1u64, 2, 4, 8].choose(&mut self.rng).unwrap();
        let len = self.rng.gen_range(2..=max_len);
        let prefix = match home {
            Home::StackLocal => "l",
            Home::StackEscaping => "s",
            Home::Heap => "h",
            Home::Global => "g",
        };
        Obj { name: format!("{prefix}{i}"), home, elem, len }
    }

    fn via_for(&mut self, home: Home) -> Via {
        if home == Home::StackLocal {
            Via::Direct
        } else {
            *[Via::Direct, Via::Helper, Via::Memset].choose(&mut self.rng).unwrap()
        }
    }

    fn in_bounds(&mut self, obj: usize) -> Access {
        let o = &self.objs[obj];
        let (home, elem, len) = (o.home, o.elem, o.len);
        let idx = self.rng.gen_range(0..len);
        let via = self.via_for(home);
        Access {
            obj,
            offset: (idx * elem) as i64,
            size: elem,
            write: via == Via::Memset || self.rng.gen_bool(0.5),
            via,
            value: self.rng.gen(),
        }
    }

    fn bug(&mut self, n_accesses: usize) -> Option<(Bug, Region)> {
        let kinds = [
            InjectedViolation::SpatialOver,
            InjectedViolation::SpatialUnder,
            InjectedViolation::LongStride,
            InjectedViolation::ElementSizeEdge,
            InjectedViolation::Uaf,
        ];
        let kind = *kinds.choose(&mut self.rng).unwrap();
        if kind == InjectedViolation::Uaf {
            let heap: Vec<usize> = (0..self.objs.len()).filter(|&i| self.objs[i].home == Home::Heap).collect();
            let reuse = self.rng.gen_bool(0.3);
            if let (Some(&obj), true) = (heap.choose(&mut self.rng), self.rng.gen_bool(0.6)) {
                let mut access = self.in_bounds(obj);
                if access.via == Via::Memset {
                    access.via = Via::Direct;
                }
                return Some((Bug::HeapUaf { access, reuse }, Region::Heap));
            }
            let elem = *[1u64, 2, 4, 8].choose(&mut self.rng).unwrap();
            let len = self.rng.gen_range(2..=8);
            let offset = (self.rng.gen_range(0..len) * elem) as i64;
            return Some((Bug::StackUaf { elem, len, offset, reuse }, Region::Stack));
        }
        let candidates: Vec<usize> = (0..self.objs.len())
            .filter(|&i| kind != InjectedViolation::ElementSizeEdge || self.objs[i].elem < 8)
            .collect();
        let obj = *candidates.choose(&mut self.rng)?;
        let (home, elem, len) = (self.objs[obj].home, self.objs[obj].elem, self.objs[obj].len);
        let end = (elem * len) as i64;
        let (offset, size) = match kind {
            InjectedViolation::SpatialOver => (end + (self.rng.gen_range(0..2) * elem) as i64, elem),
            InjectedViolation::SpatialUnder => (-((self.rng.gen_range(1..=2) * elem) as i64), elem),
            InjectedViolation::LongStride => {
                let stride = (self.rng.gen_range(256..65536) * elem) as i64;
                if self.rng.gen_bool(0.25) {
                    (-stride, elem)
                } else {
                    (end + stride, elem)
                }
            }
            _ => (end - elem as i64, elem * 2),
        };
        let via = self.via_for(home);
        let access = Access {
            obj,
            offset,
            size,
            write: via == Via::Memset || self.rng.gen_bool(0.5),
            via,
            value: self.rng.gen(),
        };
        let at = self.rng.gen_range(0..=n_accesses);
        Some((Bug::Spatial { kind, access, at }, home.region()))
    }
}

/// Deterministic in `(seed, params)`.
pub fn generate_program(seed: u64, params: &GenParams) -> CorpusCase {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), objs: Vec::new(), regs: 0 };
    g.objs = (0..params.n_objects).map(|i| g.object(i, params.max_len)).collect();
    let accesses: Vec<Access> = (0..params.n_accesses)
        .map(|_| {
            let obj = g.rng.gen_range(0..g.objs.len());
            g.in_bounds(obj)
        })
        .collect();
    let planned = g.bug(params.n_accesses);
    let inject = g.rng.gen_bool(params.bug_rate);
    let bug = planned.as_ref().filter(|_| inject).map(|(b, _)| b.clone());
    let (kind, region) = match &planned {
        Some((Bug::Spatial { kind, .. }, r)) => (*kind, *r),
        Some((_, r)) => (InjectedViolation::Uaf, *r),
        None => (InjectedViolation::SpatialOver, Region::Stack),
    };
    let expect = match &bug {
        None => Designation::NoViolation,
        Some(Bug::HeapUaf { reuse: true, .. } | Bug::StackUaf { reuse: true, .. }) => Designation::ExpectedMiss,
        Some(_) => Designation::Detect,
    };
    let header = format!("; generated: seed {seed}, {params:?}\n");
    let buggy = header.clone() + &emit(&mut g, &accesses, bug.as_ref(), true);
    g.regs = 0;
    let patched = header + &emit(&mut g, &accesses, bug.as_ref(), false);
    CorpusCase {
        name: format!("gen_{seed:06}"),
        buggy,
        patched,
        expected: Expectation { violation_kind: kind, region, expect, arch_dependent: false, note: None },
    }
}

fn emit(g: &mut Gen, accesses: &[Access], bug: Option<&Bug>, buggy: bool) -> String {
    let mut out = String::new();
    for o in g.objs.iter().filter(|o| o.home == Home::Global) {
        writeln!(out, "global {} = {} x {}", o.name, o.elem, o.len).unwrap();
    }
    for size in [1u64, 2, 4, 8] {
        write!(
            out,
            "\nfunc st{size}(p: ptr, off: i64, v: i64) {{\n  q = ptr_add p, off\n  store {size} q, v\n  ret 0\n}}\n\nfunc ld{size}(p: ptr, off: i64) -> i64 {{\n  q = ptr_add p, off\n  x = load {size} q\n  ret x\n}}\n"
        )
        .unwrap();
    }
    if let Some(Bug::StackUaf { elem, len, .. }) = bug {
        write!(
            out,
            "\nfunc dangle() -> ptr {{\n  a = stack_alloc {elem} x {len}\n  @memset(a, 7, {})\n  ret a\n}}\n",
            elem * len
        )
        .unwrap();
    }
    out += "\nfunc main() {\n";
    let objs = g.objs.clone();
    for o in &objs {
        if matches!(o.home, Home::StackLocal | Home::StackEscaping) {
            writeln!(out, "  {} = stack_alloc {} x {}", o.name, o.elem, o.len).unwrap();
        }
    }
    out += "  acc = stack_alloc 8 x 1\n  store 8 acc, 0\n";
    for o in &objs {
        match o.home {
            Home::Heap => {
                writeln!(out, "  {} = malloc {}\n  @memset({}, 0, {})", o.name, o.bytes(), o.name, o.bytes()).unwrap()
            }
            Home::StackEscaping => writeln!(out, "  @memset({}, 0, {})", o.name, o.bytes()).unwrap(),
            Home::Global => {
                writeln!(out, "  {} = global_addr {}", addr_reg(o), o.name).unwrap();
            }
            Home::StackLocal => {}
        }
    }
    let spatial = match bug {
        Some(Bug::Spatial { access, at, .. }) => Some((access, *at)),
        _ => None,
    };
    for (i, a) in accesses.iter().enumerate() {
        if let Some((bad, at)) = spatial {
            if at == i && buggy {
                emit_access(g, &mut out, &objs, bad);
            }
        }
        emit_access(g, &mut out, &objs, a);
    }
    if let Some((bad, at)) = spatial {
        if at == accesses.len() && buggy {
            emit_access(g, &mut out, &objs, bad);
        }
    }
    let mut freed_early = None;
    match bug {
        Some(Bug::HeapUaf { access, reuse }) => {
            let o = &objs[access.obj];
            if !buggy {
                emit_access(g, &mut out, &objs, access);
            }
            writeln!(out, "  free {}", o.name).unwrap();
            if *reuse {
                writeln!(out, "  r = malloc {}\n  @memset(r, 1, {})", o.bytes(), o.bytes()).unwrap();
            }
            if buggy {
                emit_access(g, &mut out, &objs, access);
            }
            if *reuse {
                out += "  free r\n";
            }
            freed_early = Some(access.obj);
        }
        Some(Bug::StackUaf { elem, offset, reuse, len }) => {
            out += "  d = call dangle()\n";
            if *reuse {
                writeln!(out, "  r = malloc {}\n  @memset(r, 1, {})", elem * len, elem * len).unwrap();
            }
            if buggy {
                let v = g.fresh("v");
                writeln!(out, "  {v} = call ld{elem}(d, {offset})").unwrap();
                accumulate(&mut out, &v);
            }
            if *reuse {
                out += "  free r\n";
            }
        }
        _ => {}
    }
    for (i, o) in objs.iter().enumerate() {
        if o.home == Home::Heap && freed_early != Some(i) {
            writeln!(out, "  free {}", o.name).unwrap();
        }
    }
    out += "  total = load 8 acc\n  @print_int(total)\n  ret 0\n}\n";
    out
}

fn addr_reg(o: &Obj) -> String {
    if o.home == Home::Global {
        format!("{}p", o.name)
    } else {
        o.name.clone()
    }
}

fn accumulate(out: &mut String, v: &str) {
    writeln!(out, "  t{v} = load 8 acc\n  u{v} = add t{v}, {v}\n  store 8 acc, u{v}").unwrap();
}

fn emit_access(g: &mut Gen, out: &mut String, objs: &[Obj], a: &Access) {
    let base = addr_reg(&objs[a.obj]);
    let (off, size, value) = (a.offset, a.size, a.value);
    match (a.via, a.write) {
        (Via::Memset, _) => {
            let p = g.fresh("p");
            writeln!(out, "  {p} = ptr_add {base}, {off}\n  @memset({p}, {value}, {size})").unwrap();
        }
        (Via::Helper, true) => {
            writeln!(out, "  {} = call st{size}({base}, {off}, {value})", g.fresh("c")).unwrap();
        }
        (Via::Helper, false) => {
            let v = g.fresh("v");
            writeln!(out, "  {v} = call ld{size}({base}, {off})").unwrap();
            accumulate(out, &v);
        }
        (Via::Direct, true) => {
            let p = g.fresh("p");
            writeln!(out, "  {p} = ptr_add {base}, {off}\n  store {size} {p}, {value}").unwrap();
        }
        (Via::Direct, false) => {
            let (p, v) = (g.fresh("p"), g.fresh("v"));
            writeln!(out, "  {p} = ptr_add {base}, {off}\n  {v} = load {size} {p}").unwrap();
            accumulate(out, &v);
        }
    }
}
