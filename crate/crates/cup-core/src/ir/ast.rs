use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub type Reg = String;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Module {
    pub globals: Vec<GlobalDef>,
    pub functions: Vec<Function>,
    /// Run in order before `main`.
    pub constructors: Vec<String>,
}

impl Module {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalDef> {
        self.globals.iter().find(|g| g.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalDef {
    pub name: String,
    pub elem_size: u64,
    pub length: u64,
    pub is_array: bool,
    /// Declared here, defined elsewhere.
    pub is_extern: bool,
}

impl GlobalDef {
    pub fn byte_size(&self) -> u64 {
        self.elem_size.saturating_mul(self.length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    I64,
    Ptr,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::I64 => "i64",
            ValueKind::Ptr => "ptr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: Reg,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Param>,
    pub is_variadic: bool,
    pub returns: ValueKind,
    /// The first block is the entry block.
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn instrs(&self) -> impl Iterator<Item = (InstrRef, &Instr)> + '_ {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            block.instrs.iter().enumerate().map(move |(i, instr)| (InstrRef { block: b, index: i }, instr))
        })
    }

    pub fn instr(&self, r: InstrRef) -> Option<&Instr> {
        self.blocks.get(r.block)?.instrs.get(r.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
}

/// Position of an instruction inside a function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstrRef {
    pub block: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceLoc {
    pub file: String,
    pub line: u32,
    /// Ordinal of the instruction within its function at parse time.
    pub instr_index: u32,
}

impl fmt::Display for SourceLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} (#{})", self.file, self.line, self.instr_index)
    }
}

/// An instruction plus where it came from. Equality ignores the location so
/// that a printed and re-parsed module compares equal to the original.
#[derive(Debug, Clone)]
pub struct Instr {
    pub kind: InstrKind,
    pub loc: SourceLoc,
}

impl PartialEq for Instr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Eq for Instr {}

impl Instr {
    pub fn new(kind: InstrKind, loc: SourceLoc) -> Self {
        Instr { kind, loc }
    }
}

/// Serialises as a register name or a number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

impl Operand {
    pub fn reg(name: &str) -> Self {
        Operand::Reg(name.into())
    }

    pub fn as_reg(&self) -> Option<&str> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

impl From<u64> for Operand {
    fn from(v: u64) -> Self {
        Operand::Imm(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    UDiv,
    URem,
    SDiv,
    SRem,
    And,
    Or,
    Xor,
    Shl,
    LShr,
    AShr,
    Eq,
    Ne,
    ULt,
    ULe,
    UGt,
    UGe,
    SLt,
    SLe,
    SGt,
    SGe,
}

impl BinOp {
    pub const ALL: [BinOp; 23] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::UDiv,
        BinOp::URem,
        BinOp::SDiv,
        BinOp::SRem,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::LShr,
        BinOp::AShr,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::ULt,
        BinOp::ULe,
        BinOp::UGt,
        BinOp::UGe,
        BinOp::SLt,
        BinOp::SLe,
        BinOp::SGt,
        BinOp::SGe,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::UDiv => "udiv",
            BinOp::URem => "urem",
            BinOp::SDiv => "sdiv",
            BinOp::SRem => "srem",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::LShr => "lshr",
            BinOp::AShr => "ashr",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::ULt => "ult",
            BinOp::ULe => "ule",
            BinOp::UGt => "ugt",
            BinOp::UGe => "uge",
            BinOp::SLt => "slt",
            BinOp::SLe => "sle",
            BinOp::SGt => "sgt",
            BinOp::SGe => "sge",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<BinOp> {
        BinOp::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    /// `None` on division by zero.
    pub fn eval(self, a: u64, b: u64) -> Option<u64> {
        let (sa, sb) = (a as i64, b as i64);
        Some(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::UDiv => a.checked_div(b)?,
            BinOp::URem => a.checked_rem(b)?,
            BinOp::SDiv => {
                if b == 0 {
                    return None;
                }
                sa.wrapping_div(sb) as u64
            }
            BinOp::SRem => {
                if b == 0 {
                    return None;
                }
                sa.wrapping_rem(sb) as u64
            }
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl(b as u32),
            BinOp::LShr => a.wrapping_shr(b as u32),
            BinOp::AShr => sa.wrapping_shr(b as u32) as u64,
            BinOp::Eq => (a == b) as u64,
            BinOp::Ne => (a != b) as u64,
            BinOp::ULt => (a < b) as u64,
            BinOp::ULe => (a <= b) as u64,
            BinOp::UGt => (a > b) as u64,
            BinOp::UGe => (a >= b) as u64,
            BinOp::SLt => (sa < sb) as u64,
            BinOp::SLe => (sa <= sb) as u64,
            BinOp::SGt => (sa > sb) as u64,
            BinOp::SGe => (sa >= sb) as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstrKind {
    StackAlloc { dst: Reg, elem_size: u64, length: u64, address_taken: bool },
    HeapAlloc { dst: Reg, size: Operand },
    HeapFree { ptr: Operand },
    HeapRealloc { dst: Reg, ptr: Operand, size: Operand },
    Load { dst: Reg, ptr: Operand, size: u64 },
    Store { ptr: Operand, src: Operand, size: u64 },
    PtrAdd { dst: Reg, ptr: Operand, delta: Operand },
    PtrToInt { dst: Reg, ptr: Operand },
    IntToPtr { dst: Reg, int: Operand },
    Copy { dst: Reg, src: Operand },
    BinOp { dst: Reg, op: BinOp, a: Operand, b: Operand },
    Call { dst: Option<Reg>, callee: String, args: Vec<Operand> },
    Intrinsic { dst: Option<Reg>, name: String, args: Vec<Operand> },
    Br { target: String },
    CondBr { cond: Operand, then_target: String, else_target: String },
    Ret { val: Option<Operand> },
    GlobalAddr { dst: Reg, global: String },
}

impl InstrKind {
    pub fn dst(&self) -> Option<&str> {
        use InstrKind::*;
        match self {
            StackAlloc { dst, .. }
            | HeapAlloc { dst, .. }
            | HeapRealloc { dst, .. }
            | Load { dst, .. }
            | PtrAdd { dst, .. }
            | PtrToInt { dst, .. }
            | IntToPtr { dst, .. }
            | Copy { dst, .. }
            | BinOp { dst, .. }
            | GlobalAddr { dst, .. } => Some(dst),
            Call { dst, .. } | Intrinsic { dst, .. } => dst.as_deref(),
            HeapFree { .. } | Store { .. } | Br { .. } | CondBr { .. } | Ret { .. } => None,
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        use InstrKind::*;
        match self {
            StackAlloc { .. } | Br { .. } | GlobalAddr { .. } => Vec::new(),
            HeapAlloc { size, .. } => alloc::vec![size],
            HeapFree { ptr } => alloc::vec![ptr],
            HeapRealloc { ptr, size, .. } => alloc::vec![ptr, size],
            Load { ptr, .. } => alloc::vec![ptr],
            Store { ptr, src, .. } => alloc::vec![ptr, src],
            PtrAdd { ptr, delta, .. } => alloc::vec![ptr, delta],
            PtrToInt { ptr, .. } => alloc::vec![ptr],
            IntToPtr { int, .. } => alloc::vec![int],
            Copy { src, .. } => alloc::vec![src],
            BinOp { a, b, .. } => alloc::vec![a, b],
            Call { args, .. } | Intrinsic { args, .. } => args.iter().collect(),
            CondBr { cond, .. } => alloc::vec![cond],
            Ret { val } => val.iter().collect(),
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        use InstrKind::*;
        match self {
            StackAlloc { .. } | Br { .. } | GlobalAddr { .. } => Vec::new(),
            HeapAlloc { size, .. } => alloc::vec![size],
            HeapFree { ptr } => alloc::vec![ptr],
            HeapRealloc { ptr, size, .. } => alloc::vec![ptr, size],
            Load { ptr, .. } => alloc::vec![ptr],
            Store { ptr, src, .. } => alloc::vec![ptr, src],
            PtrAdd { ptr, delta, .. } => alloc::vec![ptr, delta],
            PtrToInt { ptr, .. } => alloc::vec![ptr],
            IntToPtr { int, .. } => alloc::vec![int],
            Copy { src, .. } => alloc::vec![src],
            BinOp { a, b, .. } => alloc::vec![a, b],
            Call { args, .. } | Intrinsic { args, .. } => args.iter_mut().collect(),
            CondBr { cond, .. } => alloc::vec![cond],
            Ret { val } => val.iter_mut().collect(),
        }
    }

    pub fn uses(&self) -> impl Iterator<Item = &str> {
        self.operands().into_iter().filter_map(Operand::as_reg)
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, InstrKind::Br { .. } | InstrKind::CondBr { .. } | InstrKind::Ret { .. })
    }

    pub fn successors(&self) -> Vec<&str> {
        match self {
            InstrKind::Br { target } => alloc::vec![target.as_str()],
            InstrKind::CondBr { then_target, else_target, .. } => {
                alloc::vec![then_target.as_str(), else_target.as_str()]
            }
            _ => Vec::new(),
        }
    }
}
