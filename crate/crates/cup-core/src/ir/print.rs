use alloc::string::String;
use core::fmt::{self, Write};

use super::ast::*;

/// Canonical text form. `parse(&print(m)) == m` for every valid module.
pub fn print(m: &Module) -> String {
    let mut out = String::new();
    write_module(&mut out, m).expect("writing to a String cannot fail");
    out
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_module(f, self)
    }
}

fn write_module(out: &mut impl Write, m: &Module) -> fmt::Result {
    let mut first_item = true;
    let mut gap = |out: &mut dyn Write| -> fmt::Result {
        if !first_item {
            out.write_char('\n')?;
        }
        first_item = false;
        Ok(())
    };
    if !m.globals.is_empty() {
        gap(out)?;
        for g in &m.globals {
            write_global(out, g)?;
        }
    }
    if !m.constructors.is_empty() {
        gap(out)?;
        writeln!(out, "ctors {}", m.constructors.join(", "))?;
    }
    for func in &m.functions {
        gap(out)?;
        write_function(out, func)?;
    }
    Ok(())
}

fn elem_type(size: u64) -> String {
    match size {
        1 => "int8".into(),
        2 => "int16".into(),
        4 => "int32".into(),
        8 => "int64".into(),
        n => alloc::format!("{n}"),
    }
}

fn write_global(out: &mut impl Write, g: &GlobalDef) -> fmt::Result {
    if g.is_extern {
        out.write_str("extern ")?;
    }
    write!(out, "global {} = {}", g.name, elem_type(g.elem_size))?;
    if g.is_array {
        write!(out, " x {}", g.length)?;
    }
    out.write_char('\n')
}

fn write_function(out: &mut impl Write, f: &Function) -> fmt::Result {
    write!(out, "func {}(", f.name)?;
    for (i, p) in f.params.iter().enumerate() {
        if i > 0 {
            out.write_str(", ")?;
        }
        write!(out, "{}: {}", p.name, p.kind.as_str())?;
    }
    if f.is_variadic {
        if !f.params.is_empty() {
            out.write_str(", ")?;
        }
        out.write_str("...")?;
    }
    out.write_char(')')?;
    if f.returns == ValueKind::Ptr {
        out.write_str(" -> ptr")?;
    }
    out.write_str(" {\n")?;
    for (i, block) in f.blocks.iter().enumerate() {
        if i > 0 || block.label != "entry" {
            writeln!(out, "{}:", block.label)?;
        }
        for instr in &block.instrs {
            out.write_str("  ")?;
            write_instr(out, &instr.kind)?;
            out.write_char('\n')?;
        }
    }
    out.write_str("}\n")
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => f.write_str(r),
            Operand::Imm(v) => {
                let s = *v as i64;
                if (-(1i64 << 31)..(1i64 << 31)).contains(&s) {
                    write!(f, "{s}")
                } else {
                    write!(f, "{v:#x}")
                }
            }
        }
    }
}

impl fmt::Display for InstrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_instr(f, self)
    }
}

fn write_args(out: &mut impl Write, args: &[Operand]) -> fmt::Result {
    out.write_char('(')?;
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            out.write_str(", ")?;
        }
        write!(out, "{a}")?;
    }
    out.write_char(')')
}

fn write_instr(out: &mut impl Write, k: &InstrKind) -> fmt::Result {
    use InstrKind::*;
    match k {
        StackAlloc { dst, elem_size, length, address_taken } => {
            write!(out, "{dst} = stack_alloc {elem_size} x {length}")?;
            if *address_taken {
                out.write_str(" addr_taken")?;
            }
            Ok(())
        }
        HeapAlloc { dst, size } => write!(out, "{dst} = malloc {size}"),
        HeapFree { ptr } => write!(out, "free {ptr}"),
        HeapRealloc { dst, ptr, size } => write!(out, "{dst} = realloc {ptr}, {size}"),
        Load { dst, ptr, size } => write!(out, "{dst} = load {size} {ptr}"),
        Store { ptr, src, size } => write!(out, "store {size} {ptr}, {src}"),
        PtrAdd { dst, ptr, delta } => write!(out, "{dst} = ptr_add {ptr}, {delta}"),
        PtrToInt { dst, ptr } => write!(out, "{dst} = ptr_to_int {ptr}"),
        IntToPtr { dst, int } => write!(out, "{dst} = int_to_ptr {int}"),
        Copy { dst, src } => write!(out, "{dst} = copy {src}"),
        BinOp { dst, op, a, b } => write!(out, "{dst} = {} {a}, {b}", op.mnemonic()),
        Call { dst, callee, args } => {
            if let Some(d) = dst {
                write!(out, "{d} = ")?;
            }
            write!(out, "call {callee}")?;
            write_args(out, args)
        }
        Intrinsic { dst, name, args } => {
            if let Some(d) = dst {
                write!(out, "{d} = ")?;
            }
            write!(out, "@{name}")?;
            write_args(out, args)
        }
        Br { target } => write!(out, "br {target}"),
        CondBr { cond, then_target, else_target } => write!(out, "cbr {cond}, {then_target}, {else_target}"),
        Ret { val: Some(v) } => write!(out, "ret {v}"),
        Ret { val: None } => out.write_str("ret"),
        GlobalAddr { dst, global } => write!(out, "{dst} = global_addr {global}"),
    }
}
