use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layout::{round_up, GLOBAL_BASE, PAGE_SIZE};
use super::Site;
use crate::ir::{BinOp, InstrKind, Intrinsic, Module, Operand};

pub(super) type RegId = u32;

#[derive(Debug, Clone, Copy)]
pub(super) enum Op {
    Reg(RegId),
    Imm(u64),
}

#[derive(Debug, Clone)]
pub(super) enum CInstr {
    StackAlloc { dst: RegId, size: u64 },
    HeapAlloc { dst: RegId, size: Op },
    HeapFree { ptr: Op },
    HeapRealloc { dst: RegId, ptr: Op, size: Op },
    Load { dst: RegId, ptr: Op, size: u64 },
    Store { ptr: Op, src: Op, size: u64 },
    PtrAdd { dst: RegId, ptr: Op, delta: Op },
    PtrToInt { dst: RegId, src: Op },
    IntToPtr { dst: RegId, src: Op },
    Copy { dst: RegId, src: Op },
    BinOp { dst: RegId, op: BinOp, a: Op, b: Op },
    Call { dst: Option<RegId>, func: usize, args: Vec<Op> },
    Intrinsic { dst: Option<RegId>, which: Intrinsic, args: Vec<Op> },
    Br { target: usize },
    CondBr { cond: Op, then_pc: usize, else_pc: usize },
    Ret { val: Option<Op> },
    GlobalAddr { dst: RegId, global: usize },
}

#[derive(Debug, Clone)]
pub(super) struct CFunc {
    pub name: String,
    pub n_regs: usize,
    pub n_params: usize,
    pub is_variadic: bool,
    pub instrs: Vec<CInstr>,
    pub sites: Vec<Site>,
}

#[derive(Debug, Clone)]
pub(super) struct CGlobal {
    pub addr: u64,
    pub size: u64,
}

/// A module lowered to an index-based form the interpreter executes directly.
/// Compile once, run many times.
#[derive(Debug, Clone)]
pub struct Program {
    pub(super) funcs: Vec<CFunc>,
    pub(super) globals: Vec<CGlobal>,
    pub(super) main: usize,
    pub(super) ctors: Vec<usize>,
    pub(super) globals_end: u64,
}

impl Program {
    /// Fails on constructs that validation would reject.
    pub fn compile(m: &Module) -> Result<Program, String> {
        let fidx: BTreeMap<&str, usize> = m.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
        let mut gidx = BTreeMap::new();
        let mut globals = Vec::new();
        let mut cursor = GLOBAL_BASE;
        for (i, g) in m.globals.iter().enumerate() {
            let size = g.byte_size().max(1);
            globals.push(CGlobal { addr: cursor, size });
            cursor = round_up(cursor + size, 16);
            gidx.insert(g.name.as_str(), i);
        }
        let globals_end = round_up(cursor.max(GLOBAL_BASE + 1), PAGE_SIZE);

        let mut funcs = Vec::new();
        for f in &m.functions {
            let mut regs: BTreeMap<&str, RegId> = BTreeMap::new();
            for p in &f.params {
                let n = regs.len() as RegId;
                regs.entry(p.name.as_str()).or_insert(n);
            }
            for (_, instr) in f.instrs() {
                if let Some(d) = instr.kind.dst() {
                    let n = regs.len() as RegId;
                    regs.entry(d).or_insert(n);
                }
            }
            let mut block_pc = BTreeMap::new();
            let mut pc = 0usize;
            for b in &f.blocks {
                block_pc.insert(b.label.as_str(), pc);
                pc += b.instrs.len();
            }
            let err = |what: String| format!("in `{}`: {what}", f.name);
            let op = |o: &Operand| -> Result<Op, String> {
                match o {
                    Operand::Imm(v) => Ok(Op::Imm(*v)),
                    Operand::Reg(r) => regs
                        .get(r.as_str())
                        .map(|&i| Op::Reg(i))
                        .ok_or_else(|| err(format!("undefined register `{r}`"))),
                }
            };
            let reg = |r: &str| regs[r];
            let target = |l: &str| block_pc.get(l).copied().ok_or_else(|| err(format!("unknown label `{l}`")));
            let mut instrs = Vec::with_capacity(pc);
            let mut sites = Vec::with_capacity(pc);
            for (_, instr) in f.instrs() {
                use InstrKind as K;
                let c = match &instr.kind {
                    K::StackAlloc { dst, elem_size, length, .. } => {
                        CInstr::StackAlloc { dst: reg(dst), size: elem_size.saturating_mul(*length).max(1) }
                    }
                    K::HeapAlloc { dst, size } => CInstr::HeapAlloc { dst: reg(dst), size: op(size)? },
                    K::HeapFree { ptr } => CInstr::HeapFree { ptr: op(ptr)? },
                    K::HeapRealloc { dst, ptr, size } => {
                        CInstr::HeapRealloc { dst: reg(dst), ptr: op(ptr)?, size: op(size)? }
                    }
                    K::Load { dst, ptr, size } => CInstr::Load { dst: reg(dst), ptr: op(ptr)?, size: *size },
                    K::Store { ptr, src, size } => CInstr::Store { ptr: op(ptr)?, src: op(src)?, size: *size },
                    K::PtrAdd { dst, ptr, delta } => CInstr::PtrAdd { dst: reg(dst), ptr: op(ptr)?, delta: op(delta)? },
                    K::PtrToInt { dst, ptr } => CInstr::PtrToInt { dst: reg(dst), src: op(ptr)? },
                    K::IntToPtr { dst, int } => CInstr::IntToPtr { dst: reg(dst), src: op(int)? },
                    K::Copy { dst, src } => CInstr::Copy { dst: reg(dst), src: op(src)? },
                    K::BinOp { dst, op: o, a, b } => CInstr::BinOp { dst: reg(dst), op: *o, a: op(a)?, b: op(b)? },
                    K::Call { dst, callee, args } => CInstr::Call {
                        dst: dst.as_deref().map(reg),
                        func: *fidx.get(callee.as_str()).ok_or_else(|| err(format!("unknown function `{callee}`")))?,
                        args: args.iter().map(op).collect::<Result<_, _>>()?,
                    },
                    K::Intrinsic { dst, name, args } => CInstr::Intrinsic {
                        dst: dst.as_deref().map(reg),
                        which: Intrinsic::from_name(name).ok_or_else(|| err(format!("unknown intrinsic `@{name}`")))?,
                        args: args.iter().map(op).collect::<Result<_, _>>()?,
                    },
                    K::Br { target: t } => CInstr::Br { target: target(t)? },
                    K::CondBr { cond, then_target, else_target } => {
                        CInstr::CondBr { cond: op(cond)?, then_pc: target(then_target)?, else_pc: target(else_target)? }
                    }
                    K::Ret { val } => CInstr::Ret { val: val.as_ref().map(op).transpose()? },
                    K::GlobalAddr { dst, global } => CInstr::GlobalAddr {
                        dst: reg(dst),
                        global: *gidx.get(global.as_str()).ok_or_else(|| err(format!("unknown global `{global}`")))?,
                    },
                };
                instrs.push(c);
                sites.push(Site { function: f.name.clone(), line: instr.loc.line, instr_index: instr.loc.instr_index });
            }
            if instrs.is_empty() {
                return Err(err("empty function".into()));
            }
            funcs.push(CFunc {
                name: f.name.clone(),
                n_regs: regs.len(),
                n_params: f.params.len(),
                is_variadic: f.is_variadic,
                instrs,
                sites,
            });
        }
        let main = *fidx.get("main").ok_or("no `main` function")?;
        let ctors = m
            .constructors
            .iter()
            .map(|c| fidx.get(c.as_str()).copied().ok_or_else(|| format!("unknown constructor `{c}`")))
            .collect::<Result<_, _>>()?;
        Ok(Program { funcs, globals, main, ctors, globals_end })
    }

    /// Guest address of global `name` under this layout.
    pub fn global_addr(&self, m: &Module, name: &str) -> Option<u64> {
        let i = m.globals.iter().position(|g| g.name == name)?;
        Some(self.globals[i].addr)
    }
}
