use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::heap::{Heap, HeapError};
use super::layout::*;
use super::memory::{GuestMemory, MemFault};
use super::monitor::{Access, AccessKind, Monitor, Region};
use super::program::{CInstr, Op, Program, RegId};
use super::trace::TraceEvent;
use super::{Config, ExecutionResult, Outcome, Site};
use crate::capability::{
    self, alloc_entry, check_bounds, encode, free_entry, CapError, CapId, EnrichedWord, EntryStore, MetadataEntry,
    TableError,
};
use crate::ir::Intrinsic;

const MAX_DEPTH: usize = 1 << 16;

/// The metadata table as it lives in guest memory.
pub(super) struct GuestTable<'a> {
    pub mem: &'a mut GuestMemory,
    pub capacity: u32,
}

impl EntryStore for GuestTable<'_> {
    type Fault = MemFault;

    fn capacity(&self) -> u32 {
        self.capacity
    }

    fn read_entry(&mut self, id: CapId) -> Result<MetadataEntry, MemFault> {
        let a = entry_addr(id as u64);
        Ok(MetadataEntry { base: self.mem.load(a, 8)?, end: self.mem.load(a + 8, 8)? })
    }

    fn write_entry(&mut self, id: CapId, e: MetadataEntry) -> Result<(), MemFault> {
        let a = entry_addr(id as u64);
        self.mem.store(a, 8, e.base)?;
        self.mem.store(a + 8, 8, e.end)
    }

    fn next_entry(&mut self) -> Result<CapId, MemFault> {
        Ok(self.mem.load(NEXT_ENTRY_ADDR, 8)? as CapId)
    }

    fn set_next_entry(&mut self, next: CapId) -> Result<(), MemFault> {
        self.mem.store(NEXT_ENTRY_ADDR, 8, next as u64)
    }
}

pub(super) enum Stop {
    Fault { site: Site, addr: u64 },
    Error { message: String, site: Option<Site> },
}

struct Frame<T> {
    func: usize,
    pc: usize,
    regs: Vec<u64>,
    tags: Vec<T>,
    varargs: Vec<(u64, T)>,
    saved_sp: u64,
    stack_objects: Vec<T>,
    ret_dst: Option<RegId>,
}

pub(super) struct Machine<'p, M: Monitor> {
    prog: &'p Program,
    config: &'p Config,
    pub mem: GuestMemory,
    heap: Heap,
    sp: u64,
    stack_floor: u64,
    rng: ChaCha8Rng,
    pub monitor: M,
    global_tags: Vec<M::Tag>,
    output: Vec<u8>,
    trace: Vec<TraceEvent>,
    steps: u64,
}

impl<'p, M: Monitor> Machine<'p, M> {
    pub fn new(prog: &'p Program, config: &'p Config, mut monitor: M) -> Self {
        let mut mem = GuestMemory::new();
        mem.map(GLOBAL_BASE, prog.globals_end - GLOBAL_BASE);
        mem.map(NEXT_ENTRY_ADDR, 8);
        let capacity = capacity_of(config);
        mem.map_demand_zero(TABLE_BASE, entry_addr(capacity as u64));
        {
            let mut t = GuestTable { mem: &mut mem, capacity };
            let init = t.write_entry(0, MetadataEntry::RESERVED).and_then(|_| t.set_next_entry(1));
            debug_assert!(init.is_ok());
        }
        let global_tags =
            prog.globals.iter().map(|g| monitor.object_created(Region::Global, g.addr, g.size, None)).collect();
        Machine {
            prog,
            config,
            mem,
            heap: Heap::default(),
            sp: STACK_TOP,
            stack_floor: STACK_TOP,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            monitor,
            global_tags,
            output: Vec::new(),
            trace: Vec::new(),
            steps: 0,
        }
    }

    pub fn run(mut self, args: &[u64]) -> (ExecutionResult, M) {
        let outcome = self.run_all(args);
        let result = ExecutionResult {
            outcome,
            output: self.output,
            trace: self.trace,
            steps: self.steps,
            heap_footprint: self.heap.footprint(),
        };
        (result, self.monitor)
    }

    fn run_all(&mut self, args: &[u64]) -> Outcome {
        for i in 0..self.prog.ctors.len() {
            let ctor = self.prog.ctors[i];
            if let Err(stop) = self.call_toplevel(ctor, &[]) {
                return stop.into();
            }
        }
        let main = &self.prog.funcs[self.prog.main];
        if args.len() < main.n_params || (args.len() > main.n_params && !main.is_variadic) {
            return Outcome::VmError {
                message: format!("main takes {} arguments, got {}", main.n_params, args.len()),
                site: None,
            };
        }
        match self.call_toplevel(self.prog.main, args) {
            Ok(code) => Outcome::Exit { code: code as i64 },
            Err(stop) => stop.into(),
        }
    }

    fn table(&mut self) -> GuestTable<'_> {
        GuestTable { mem: &mut self.mem, capacity: capacity_of(self.config) }
    }

    fn next_entry(&mut self) -> CapId {
        self.mem.load(NEXT_ENTRY_ADDR, 8).unwrap_or(0) as CapId
    }

    fn record(&mut self, ev: TraceEvent) {
        if self.config.trace {
            self.trace.push(ev);
        }
    }

    fn new_frame(
        &mut self,
        func: usize,
        args: Vec<(u64, M::Tag)>,
        ret_dst: Option<RegId>,
    ) -> Result<Frame<M::Tag>, Stop> {
        let f = &self.prog.funcs[func];
        let mut regs = vec![0u64; f.n_regs];
        let mut tags = vec![M::Tag::default(); f.n_regs];
        let mut args = args.into_iter();
        for i in 0..f.n_params {
            let (v, t) = args.next().ok_or_else(|| Stop::Error {
                message: format!("`{}` called with too few arguments", f.name),
                site: None,
            })?;
            regs[i] = v;
            tags[i] = t;
        }
        let varargs: Vec<_> = args.collect();
        if !varargs.is_empty() && !f.is_variadic {
            return Err(Stop::Error { message: format!("`{}` called with too many arguments", f.name), site: None });
        }
        if self.config.trace {
            let next_entry = self.next_entry();
            self.trace.push(TraceEvent::Call { function: f.name.clone(), next_entry });
        }
        Ok(Frame { func, pc: 0, regs, tags, varargs, saved_sp: self.sp, stack_objects: Vec::new(), ret_dst })
    }

    fn call_toplevel(&mut self, func: usize, args: &[u64]) -> Result<u64, Stop> {
        let args = args.iter().map(|&a| (a, M::Tag::default())).collect();
        let frame = self.new_frame(func, args, None)?;
        let mut frames = vec![frame];
        self.execute(&mut frames)
    }

    fn execute(&mut self, frames: &mut Vec<Frame<M::Tag>>) -> Result<u64, Stop> {
        let prog = self.prog;
        loop {
            self.steps += 1;
            if self.steps > self.config.step_limit {
                return Err(Stop::Error { message: "step limit exceeded".into(), site: None });
            }
            let frame = frames.last_mut().expect("frame stack is never empty here");
            let func = &prog.funcs[frame.func];
            let pc = frame.pc;
            let site = &func.sites[pc];
            frame.pc += 1;
            let val = |f: &Frame<M::Tag>, o: &Op| match *o {
                Op::Reg(r) => f.regs[r as usize],
                Op::Imm(v) => v,
            };
            let tag = |f: &Frame<M::Tag>, o: &Op| match *o {
                Op::Reg(r) => f.tags[r as usize],
                Op::Imm(_) => M::Tag::default(),
            };
            macro_rules! set {
                ($dst:expr, $v:expr, $t:expr) => {{
                    let (v, t) = ($v, $t);
                    let f = frames.last_mut().unwrap();
                    f.regs[$dst as usize] = v;
                    f.tags[$dst as usize] = t;
                }};
            }
            match &func.instrs[pc] {
                CInstr::StackAlloc { dst, size } => {
                    let sp = (self.sp.wrapping_sub(*size)) & !(STACK_ALIGN - 1);
                    if STACK_TOP - sp > STACK_LIMIT {
                        return Err(Stop::Error { message: "stack overflow".into(), site: Some(site.clone()) });
                    }
                    self.sp = sp;
                    if sp < self.stack_floor {
                        self.mem.map(sp, self.stack_floor - sp);
                        self.stack_floor = sp & !(PAGE_SIZE - 1);
                    }
                    let t = self.monitor.object_created(Region::Stack, sp, *size, Some(site));
                    frame.stack_objects.push(t);
                    set!(*dst, sp, t);
                }
                CInstr::HeapAlloc { dst, size } => {
                    let n = val(frame, size);
                    let addr = self.heap.malloc(&mut self.mem, n).map_err(|e| heap_stop(e, site))?;
                    self.record(TraceEvent::Malloc { site: site.clone(), addr, size: n });
                    let t = self.monitor.object_created(Region::Heap, addr, n, Some(site));
                    self.monitor.clear_tags(addr, n);
                    set!(*dst, addr, t);
                }
                CInstr::HeapFree { ptr } => {
                    let (p, t) = (val(frame, ptr), tag(frame, ptr));
                    if self.monitor.heap_validate(site, t, p) == Access::Proceed {
                        self.heap.free(&mut self.mem, p).map_err(|e| heap_stop(e, site))?;
                        self.record(TraceEvent::Free { site: site.clone(), addr: p });
                        self.monitor.heap_freed(p);
                    }
                }
                CInstr::HeapRealloc { dst, ptr, size } => {
                    let (p, t, n) = (val(frame, ptr), tag(frame, ptr), val(frame, size));
                    if p == 0 {
                        return Err(Stop::Error {
                            message: "realloc of a null pointer".into(),
                            site: Some(site.clone()),
                        });
                    }
                    if self.monitor.heap_validate(site, t, p) == Access::Proceed {
                        let r = self.heap.realloc(&mut self.mem, p, n).map_err(|e| heap_stop(e, site))?;
                        self.record(TraceEvent::Realloc { site: site.clone(), old: p, new: r.addr, size: n });
                        if r.moved {
                            self.monitor.copy_tags(r.addr, p, n);
                        }
                        let nt = self.monitor.heap_resized(p, r.addr, n, site);
                        set!(*dst, r.addr, nt);
                    } else {
                        set!(*dst, p, t);
                    }
                }
                CInstr::Load { dst, ptr, size } => {
                    let (addr, t) = (val(frame, ptr), tag(frame, ptr));
                    if self.monitor.access(site, t, addr, *size, AccessKind::Read) == Access::Proceed {
                        let v = self.mem.load(addr, *size).map_err(|f| fault(site, f))?;
                        let vt = if *size == 8 { self.monitor.load_tag(addr, 8) } else { M::Tag::default() };
                        set!(*dst, v, vt);
                    } else {
                        set!(*dst, 0, M::Tag::default());
                    }
                }
                CInstr::Store { ptr, src, size } => {
                    let (addr, t) = (val(frame, ptr), tag(frame, ptr));
                    let (v, vt) = (val(frame, src), tag(frame, src));
                    if self.monitor.access(site, t, addr, *size, AccessKind::Write) == Access::Proceed {
                        self.mem.store(addr, *size, v).map_err(|f| fault(site, f))?;
                        self.monitor.store_tag(addr, *size, vt);
                    }
                }
                CInstr::PtrAdd { dst, ptr, delta } => {
                    let r = capability::ptr_add(val(frame, ptr), val(frame, delta));
                    let t = tag(frame, ptr);
                    set!(*dst, r, t);
                }
                CInstr::PtrToInt { dst, src } => {
                    let (v, t) = (val(frame, src), tag(frame, src));
                    let t = self.monitor.ptr_to_int(t);
                    set!(*dst, v, t);
                }
                CInstr::IntToPtr { dst, src } => {
                    let (v, t) = (val(frame, src), tag(frame, src));
                    let t = self.monitor.int_to_ptr(site, t);
                    set!(*dst, v, t);
                }
                CInstr::Copy { dst, src } => {
                    let (v, t) = (val(frame, src), tag(frame, src));
                    set!(*dst, v, t);
                }
                CInstr::BinOp { dst, op, a, b } => {
                    let r = op
                        .eval(val(frame, a), val(frame, b))
                        .ok_or_else(|| Stop::Error { message: "division by zero".into(), site: Some(site.clone()) })?;
                    let t = self.monitor.binop(*op, tag(frame, a), tag(frame, b));
                    set!(*dst, r, t);
                }
                CInstr::Call { dst, func: callee, args } => {
                    let args = args.iter().map(|a| (val(frame, a), tag(frame, a))).collect();
                    if frames.len() >= MAX_DEPTH {
                        return Err(Stop::Error { message: "call depth exceeded".into(), site: Some(site.clone()) });
                    }
                    let new = self.new_frame(*callee, args, *dst).map_err(|s| with_site(s, site))?;
                    frames.push(new);
                }
                CInstr::Intrinsic { dst, which, args } => {
                    let argv: Vec<(u64, M::Tag)> = args.iter().map(|a| (val(frame, a), tag(frame, a))).collect();
                    let varargs = core::mem::take(&mut frame.varargs);
                    let r = self.intrinsic(*which, &argv, &varargs, site);
                    frames.last_mut().unwrap().varargs = varargs;
                    let (v, t) = r?;
                    if let Some(d) = dst {
                        set!(*d, v, t);
                    }
                }
                CInstr::Br { target } => frame.pc = *target,
                CInstr::CondBr { cond, then_pc, else_pc } => {
                    frame.pc = if val(frame, cond) != 0 { *then_pc } else { *else_pc };
                }
                CInstr::Ret { val: rv } => {
                    let (v, t) = rv.as_ref().map(|o| (val(frame, o), tag(frame, o))).unwrap_or_default();
                    let done = frames.pop().unwrap();
                    for t in done.stack_objects.iter().rev() {
                        self.monitor.stack_released(*t);
                    }
                    self.sp = done.saved_sp;
                    if self.config.trace {
                        let next_entry = self.next_entry();
                        self.trace.push(TraceEvent::Return { function: func.name.clone(), next_entry });
                    }
                    match frames.last_mut() {
                        None => return Ok(v),
                        Some(caller) => {
                            if let Some(d) = done.ret_dst {
                                caller.regs[d as usize] = v;
                                caller.tags[d as usize] = t;
                            }
                        }
                    }
                }
                CInstr::GlobalAddr { dst, global } => {
                    let g = &prog.globals[*global];
                    let t = self.global_tags[*global];
                    set!(*dst, g.addr, t);
                }
            }
        }
    }

    fn tick(&mut self, site: &Site) -> Result<(), Stop> {
        self.steps += 1;
        if self.steps > self.config.step_limit {
            return Err(Stop::Error { message: "step limit exceeded".into(), site: Some(site.clone()) });
        }
        Ok(())
    }

    /// One byte of a libc intrinsic, checked against the word's capability
    /// exactly like an instrumented dereference. `None` if the monitor
    /// suppressed it.
    fn libc_byte(
        &mut self,
        site: &Site,
        word: u64,
        tag: M::Tag,
        i: u64,
        kind: AccessKind,
    ) -> Result<Option<u64>, Stop> {
        self.tick(site)?;
        let w = EnrichedWord(capability::ptr_add(word, i));
        let entry = self.table().read_entry(w.effective_id()).map_err(|f| fault(site, f))?;
        let addr = capability::check_against(entry, w, 1);
        self.record(TraceEvent::Check { site: site.clone(), word: w.raw(), size: 1, entry, result: addr });
        match self.monitor.access(site, tag, addr, 1, kind) {
            Access::Proceed => Ok(Some(addr)),
            Access::Suppress => Ok(None),
        }
    }

    fn read_byte(&mut self, site: &Site, word: u64, tag: M::Tag, i: u64) -> Result<u8, Stop> {
        match self.libc_byte(site, word, tag, i, AccessKind::Read)? {
            Some(a) => Ok(self.mem.load(a, 1).map_err(|f| fault(site, f))? as u8),
            None => Ok(0),
        }
    }

    fn write_byte(&mut self, site: &Site, word: u64, tag: M::Tag, i: u64, b: u8) -> Result<(), Stop> {
        if let Some(a) = self.libc_byte(site, word, tag, i, AccessKind::Write)? {
            self.mem.store(a, 1, b as u64).map_err(|f| fault(site, f))?;
        }
        Ok(())
    }

    fn intrinsic(
        &mut self,
        which: Intrinsic,
        args: &[(u64, M::Tag)],
        varargs: &[(u64, M::Tag)],
        site: &Site,
    ) -> Result<(u64, M::Tag), Stop> {
        if args.len() != which.arity() {
            return Err(Stop::Error { message: format!("@{} arity mismatch", which.name()), site: Some(site.clone()) });
        }
        let none = M::Tag::default();
        let arg = |i: usize| args[i].0;
        let cap_err = |e: TableError<MemFault>, site: &Site| match e {
            TableError::Fault(f) => fault(site, f),
            TableError::Capability(CapError::Exhausted { next_entry }) => {
                Stop::Fault { site: site.clone(), addr: entry_addr(next_entry as u64) }
            }
            TableError::Capability(e) => Stop::Error { message: format!("{e}"), site: Some(site.clone()) },
        };
        Ok(match which {
            Intrinsic::Memcpy => {
                let (d, s, n) = (args[0], args[1], arg(2));
                for i in 0..n {
                    let b = self.read_byte(site, s.0, s.1, i)?;
                    self.write_byte(site, d.0, d.1, i, b)?;
                }
                self.monitor.copy_tags(d.0, s.0, n);
                d
            }
            Intrinsic::Memset => {
                let (d, c, n) = (args[0], arg(1) as u8, arg(2));
                for i in 0..n {
                    self.write_byte(site, d.0, d.1, i, c)?;
                }
                self.monitor.clear_tags(d.0, n);
                d
            }
            Intrinsic::Strcpy => {
                let (d, s) = (args[0], args[1]);
                let mut i = 0;
                loop {
                    let b = self.read_byte(site, s.0, s.1, i)?;
                    self.write_byte(site, d.0, d.1, i, b)?;
                    if b == 0 {
                        break;
                    }
                    i += 1;
                }
                self.monitor.clear_tags(d.0, i + 1);
                d
            }
            Intrinsic::Strlen => {
                let s = args[0];
                let mut i = 0;
                while self.read_byte(site, s.0, s.1, i)? != 0 {
                    i += 1;
                }
                (i, none)
            }
            Intrinsic::Print => {
                let (p, n) = (args[0], arg(1));
                self.tick(site)?;
                if self.monitor.access(site, p.1, p.0, n, AccessKind::Read) == Access::Proceed && n > 0 {
                    let mut buf = vec![0u8; n.min(1 << 20) as usize];
                    self.mem.read(p.0, &mut buf).map_err(|f| fault(site, f))?;
                    self.output.extend_from_slice(&buf);
                }
                (0, none)
            }
            Intrinsic::PrintInt => {
                self.output.extend_from_slice(format!("{}\n", arg(0) as i64).as_bytes());
                (0, none)
            }
            Intrinsic::Rand => (self.rng.next_u64(), none),
            Intrinsic::VaArg => *varargs.get(arg(0) as usize).ok_or_else(|| Stop::Error {
                message: format!("va_arg({}) out of range", arg(0)),
                site: Some(site.clone()),
            })?,
            Intrinsic::VaCount => (varargs.len() as u64, none),
            Intrinsic::AllocMeta => {
                let (raw, size) = (arg(0), arg(1).max(1));
                let (id, word) =
                    alloc_entry(&mut self.table(), raw, raw.wrapping_add(size)).map_err(|e| cap_err(e, site))?;
                self.record(TraceEvent::AllocMeta { site: site.clone(), id, base: raw, end: raw.wrapping_add(size) });
                (word.raw(), args[0].1)
            }
            Intrinsic::FreeMeta => {
                let id = EnrichedWord(arg(0)).effective_id();
                if id != 0 {
                    free_entry(&mut self.table(), id).map_err(|e| cap_err(e, site))?;
                    self.record(TraceEvent::FreeMeta { site: site.clone(), id });
                }
                (0, none)
            }
            Intrinsic::ReallocMeta => {
                let (old, new, size) = (EnrichedWord(arg(0)), arg(1), arg(2).max(1));
                let id = old.effective_id();
                if id == 0 {
                    return Ok((new, args[1].1));
                }
                let end = new.wrapping_add(size);
                let mut table = self.table();
                let current = table.read_entry(id).map_err(|f| fault(site, f))?;
                let (id, moved) = if current.base == new {
                    table.write_entry(id, MetadataEntry { base: new, end }).map_err(|f| fault(site, f))?;
                    (id, false)
                } else {
                    free_entry(&mut table, id).map_err(|e| cap_err(e, site))?;
                    let (nid, _) = alloc_entry(&mut table, new, end).map_err(|e| cap_err(e, site))?;
                    (nid, true)
                };
                self.record(TraceEvent::ReallocMeta { site: site.clone(), id, base: new, end, moved });
                let word = encode(id as u64, 0).map_err(|e| cap_err(e.into(), site))?;
                (word.raw(), args[1].1)
            }
            Intrinsic::Check => {
                let (w, size) = (EnrichedWord(arg(0)), arg(1));
                let entry = self.table().read_entry(w.effective_id()).map_err(|f| fault(site, f))?;
                let result = capability::check_against(entry, w, size);
                self.record(TraceEvent::Check { site: site.clone(), word: w.raw(), size, entry, result });
                (result, args[0].1)
            }
            Intrinsic::CheckLocal => {
                let (addr, size, base, end) = (arg(0), arg(1), arg(2), arg(3));
                let result = addr | check_bounds(base, end, addr, size);
                self.record(TraceEvent::LocalCheck { site: site.clone(), addr, size, base, end, result });
                (result, args[0].1)
            }
            Intrinsic::Unenrich => {
                let v = capability::unenrich(&mut self.table(), EnrichedWord(arg(0))).map_err(|f| fault(site, f))?;
                (v, args[0].1)
            }
        })
    }
}

fn capacity_of(config: &Config) -> u32 {
    config.table_capacity.clamp(2, capability::ID_LIMIT as u32)
}

fn fault(site: &Site, f: MemFault) -> Stop {
    Stop::Fault { site: site.clone(), addr: f.0 }
}

fn heap_stop(e: HeapError, site: &Site) -> Stop {
    match e {
        HeapError::Fault(f) => fault(site, f),
        HeapError::InvalidFree(p) => {
            Stop::Error { message: format!("invalid free of {p:#x}"), site: Some(site.clone()) }
        }
        HeapError::OutOfMemory(n) => {
            Stop::Error { message: format!("out of memory allocating {n} bytes"), site: Some(site.clone()) }
        }
    }
}

fn with_site(s: Stop, site: &Site) -> Stop {
    match s {
        Stop::Error { message, site: None } => Stop::Error { message, site: Some(site.clone()) },
        other => other,
    }
}

impl From<Stop> for Outcome {
    fn from(s: Stop) -> Self {
        match s {
            Stop::Fault { site, addr } => Outcome::HardwareFault { site, addr },
            Stop::Error { message, site } => Outcome::VmError { message, site },
        }
    }
}
