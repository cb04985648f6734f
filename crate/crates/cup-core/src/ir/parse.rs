//! Text parser for `.mir` files. Statements end at a newline or `;`; a line
//! whose first non-blank character is `;` is a comment.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::ast::*;
use super::validate::{validate, Violation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    Syntax(Vec<SyntaxError>),
    Invalid(Vec<Violation>),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Syntax(errs) => {
                for (i, e) in errs.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "syntax error at {e}")?;
                }
                Ok(())
            }
            ParseError::Invalid(vs) => {
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "invalid module: {v}")?;
                }
                Ok(())
            }
        }
    }
}

/// Parses and validates.
pub fn parse(text: &str) -> Result<Module, ParseError> {
    parse_named(text, "<input>")
}

pub fn parse_named(text: &str, file: &str) -> Result<Module, ParseError> {
    let module = parse_unvalidated(text, file).map_err(ParseError::Syntax)?;
    let violations = validate(&module);
    if violations.is_empty() {
        Ok(module)
    } else {
        Err(ParseError::Invalid(violations))
    }
}

/// Syntax only; the result may violate module invariants.
pub fn parse_unvalidated(text: &str, file: &str) -> Result<Module, Vec<SyntaxError>> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0, file: file.to_string(), errors: Vec::new(), instr_counter: 0 };
    let module = p.module();
    if p.errors.is_empty() {
        Ok(module)
    } else {
        Err(p.errors)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Intrinsic(String),
    Int(u64),
    Sep,
    Eq,
    Comma,
    Colon,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Arrow,
    Ellipsis,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Intrinsic(s) => write!(f, "`@{s}`"),
            Tok::Int(v) => write!(f, "integer {v}"),
            Tok::Sep => f.write_str("end of statement"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::Arrow => f.write_str("`->`"),
            Tok::Ellipsis => f.write_str("`...`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: u32,
    col: u32,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<Token>, Vec<SyntaxError>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln as u32 + 1;
        if line.trim_start().starts_with(';') {
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i as u32 + 1;
            let push = |out: &mut Vec<Token>, tok| out.push(Token { tok, line: line_no, col });
            match c {
                ' ' | '\t' | '\r' => i += 1,
                ';' => {
                    push(&mut out, Tok::Sep);
                    i += 1;
                }
                '=' => {
                    push(&mut out, Tok::Eq);
                    i += 1;
                }
                ',' => {
                    push(&mut out, Tok::Comma);
                    i += 1;
                }
                ':' => {
                    push(&mut out, Tok::Colon);
                    i += 1;
                }
                '(' => {
                    push(&mut out, Tok::LParen);
                    i += 1;
                }
                ')' => {
                    push(&mut out, Tok::RParen);
                    i += 1;
                }
                '{' => {
                    push(&mut out, Tok::LBrace);
                    i += 1;
                }
                '}' => {
                    push(&mut out, Tok::RBrace);
                    i += 1;
                }
                '.' if chars.get(i + 1) == Some(&'.') && chars.get(i + 2) == Some(&'.') => {
                    push(&mut out, Tok::Ellipsis);
                    i += 3;
                }
                '-' if chars.get(i + 1) == Some(&'>') => {
                    push(&mut out, Tok::Arrow);
                    i += 2;
                }
                '@' => {
                    let start = i + 1;
                    let mut j = start;
                    while j < chars.len() && is_ident_char(chars[j]) {
                        j += 1;
                    }
                    if j == start || !is_ident_start(chars[start]) {
                        errors.push(SyntaxError {
                            line: line_no,
                            col,
                            message: "expected intrinsic name after `@`".into(),
                        });
                    } else {
                        push(&mut out, Tok::Intrinsic(chars[start..j].iter().collect()));
                    }
                    i = j.max(i + 1);
                }
                c if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                    let mut j = i + 1;
                    while j < chars.len() && chars[j].is_ascii_alphanumeric() {
                        j += 1;
                    }
                    let lit: String = chars[i..j].iter().collect();
                    match parse_int(&lit) {
                        Some(v) => push(&mut out, Tok::Int(v)),
                        None => errors.push(SyntaxError {
                            line: line_no,
                            col,
                            message: format!("bad integer literal `{lit}`"),
                        }),
                    }
                    i = j;
                }
                c if is_ident_start(c) => {
                    let mut j = i + 1;
                    while j < chars.len() && is_ident_char(chars[j]) {
                        j += 1;
                    }
                    push(&mut out, Tok::Ident(chars[i..j].iter().collect()));
                    i = j;
                }
                other => {
                    errors.push(SyntaxError { line: line_no, col, message: format!("unexpected character `{other}`") });
                    i += 1;
                }
            }
        }
        out.push(Token { tok: Tok::Sep, line: line_no, col: chars.len() as u32 + 1 });
    }
    let last = text.lines().count() as u32;
    out.push(Token { tok: Tok::Eof, line: last.max(1), col: 1 });
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

fn parse_int(lit: &str) -> Option<u64> {
    let (neg, body) = match lit.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, lit),
    };
    let mag = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<u64>().ok()?
    };
    if neg {
        if mag > 1 << 63 {
            return None;
        }
        Some(mag.wrapping_neg())
    } else {
        Some(mag)
    }
}

/// `int32` style type names or a raw byte count.
fn type_size(name: &str) -> Option<u64> {
    match name {
        "int8" => Some(1),
        "int16" => Some(2),
        "int32" => Some(4),
        "int64" => Some(8),
        _ => None,
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    file: String,
    errors: Vec<SyntaxError>,
    instr_counter: u32,
}

type PResult<T> = Result<T, SyntaxError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.tokens[(self.pos + n).min(self.tokens.len() - 1)].tok
    }

    fn line(&self) -> u32 {
        self.tokens[self.pos].line
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> PResult<T> {
        let t = &self.tokens[self.pos];
        Err(SyntaxError { line: t.line, col: t.col, message: message.into() })
    }

    fn expected<T>(&self, what: &str) -> PResult<T> {
        let found = self.peek().to_string();
        self.err(format!("expected {what}, found {found}"))
    }

    fn expect(&mut self, tok: Tok) -> PResult<()> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            self.expected(&tok.to_string())
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.expected("identifier"),
        }
    }

    fn keyword(&mut self, kw: &str) -> PResult<()> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => self.expected(&format!("`{kw}`")),
        }
    }

    fn int(&mut self) -> PResult<u64> {
        match *self.peek() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.expected("integer"),
        }
    }

    fn skip_seps(&mut self) {
        while *self.peek() == Tok::Sep {
            self.bump();
        }
    }

    fn end_statement(&mut self) -> PResult<()> {
        match self.peek() {
            Tok::Sep => {
                self.bump();
                Ok(())
            }
            Tok::RBrace | Tok::Eof => Ok(()),
            _ => self.expected("end of statement"),
        }
    }

    /// Error recovery: drop tokens up to the next statement boundary.
    fn recover(&mut self) {
        while !matches!(self.peek(), Tok::Sep | Tok::RBrace | Tok::Eof) {
            self.bump();
        }
        if *self.peek() == Tok::Sep {
            self.bump();
        }
    }

    fn module(&mut self) -> Module {
        let mut m = Module::default();
        loop {
            self.skip_seps();
            let res = match self.peek().clone() {
                Tok::Eof => break,
                Tok::Ident(kw) if kw == "global" || kw == "extern" => self.global().map(|g| m.globals.push(g)),
                Tok::Ident(kw) if kw == "ctors" => self.ctors().map(|c| m.constructors.extend(c)),
                Tok::Ident(kw) if kw == "func" => self.function().map(|f| m.functions.push(f)),
                _ => self.expected("`global`, `extern`, `ctors` or `func`"),
            };
            if let Err(e) = res {
                self.errors.push(e);
                self.recover_top_level();
            }
        }
        m
    }

    fn recover_top_level(&mut self) {
        let mut depth = 0i32;
        loop {
            match self.peek() {
                Tok::Eof => return,
                Tok::LBrace => depth += 1,
                Tok::RBrace => {
                    depth -= 1;
                    if depth <= 0 {
                        self.bump();
                        return;
                    }
                }
                Tok::Sep if depth <= 0 => return,
                _ => {}
            }
            self.bump();
        }
    }

    fn global(&mut self) -> PResult<GlobalDef> {
        let is_extern = matches!(self.peek(), Tok::Ident(s) if s == "extern");
        if is_extern {
            self.bump();
        }
        self.keyword("global")?;
        let name = self.ident()?;
        self.expect(Tok::Eq)?;
        let elem_size = self.elem_size()?;
        let (length, is_array) = if matches!(self.peek(), Tok::Ident(s) if s == "x") {
            self.bump();
            (self.int()?, true)
        } else {
            (1, false)
        };
        self.end_statement()?;
        Ok(GlobalDef { name, elem_size, length, is_array, is_extern })
    }

    fn elem_size(&mut self) -> PResult<u64> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            Tok::Ident(s) => match type_size(&s) {
                Some(v) => {
                    self.bump();
                    Ok(v)
                }
                None => self.expected("element type"),
            },
            _ => self.expected("element type"),
        }
    }

    fn ctors(&mut self) -> PResult<Vec<String>> {
        self.keyword("ctors")?;
        let mut names = alloc::vec![self.ident()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            names.push(self.ident()?);
        }
        self.end_statement()?;
        Ok(names)
    }

    fn kind(&mut self) -> PResult<ValueKind> {
        match self.peek() {
            Tok::Ident(s) if s == "i64" => {
                self.bump();
                Ok(ValueKind::I64)
            }
            Tok::Ident(s) if s == "ptr" => {
                self.bump();
                Ok(ValueKind::Ptr)
            }
            _ => self.expected("`i64` or `ptr`"),
        }
    }

    fn function(&mut self) -> PResult<Function> {
        self.keyword("func")?;
        let name = self.ident()?;
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        let mut is_variadic = false;
        if *self.peek() != Tok::RParen {
            loop {
                if *self.peek() == Tok::Ellipsis {
                    self.bump();
                    is_variadic = true;
                    break;
                }
                let pname = self.ident()?;
                self.expect(Tok::Colon)?;
                let kind = self.kind()?;
                params.push(Param { name: pname, kind });
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        let returns = if *self.peek() == Tok::Arrow {
            self.bump();
            self.kind()?
        } else {
            ValueKind::I64
        };
        self.expect(Tok::LBrace)?;
        self.instr_counter = 0;
        let mut blocks: Vec<Block> = Vec::new();
        loop {
            self.skip_seps();
            match self.peek().clone() {
                Tok::RBrace => {
                    self.bump();
                    break;
                }
                Tok::Eof => return self.expected("`}`"),
                Tok::Ident(label) if *self.peek_at(1) == Tok::Colon => {
                    self.bump();
                    self.bump();
                    blocks.push(Block { label, instrs: Vec::new() });
                }
                _ => match self.instr() {
                    Ok(instr) => {
                        if blocks.is_empty() {
                            blocks.push(Block { label: "entry".into(), instrs: Vec::new() });
                        }
                        blocks.last_mut().expect("block pushed above").instrs.push(instr);
                    }
                    Err(e) => {
                        self.errors.push(e);
                        self.recover();
                    }
                },
            }
        }
        Ok(Function { name, params, is_variadic, returns, blocks })
    }

    fn operand(&mut self) -> PResult<Operand> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(Operand::Reg(s))
            }
            Tok::Int(v) => {
                self.bump();
                Ok(Operand::Imm(v))
            }
            _ => self.expected("operand"),
        }
    }

    fn operand_pair(&mut self) -> PResult<(Operand, Operand)> {
        let a = self.operand()?;
        self.expect(Tok::Comma)?;
        let b = self.operand()?;
        Ok((a, b))
    }

    fn args(&mut self) -> PResult<Vec<Operand>> {
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                args.push(self.operand()?);
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        Ok(args)
    }

    fn instr(&mut self) -> PResult<Instr> {
        let line = self.line();
        let kind = self.instr_kind()?;
        self.end_statement()?;
        let loc = SourceLoc { file: self.file.clone(), line, instr_index: self.instr_counter };
        self.instr_counter += 1;
        Ok(Instr { kind, loc })
    }

    fn instr_kind(&mut self) -> PResult<InstrKind> {
        if let (Tok::Ident(dst), Tok::Eq) = (self.peek().clone(), self.peek_at(1).clone()) {
            self.bump();
            self.bump();
            return self.assignment(dst);
        }
        match self.peek().clone() {
            Tok::Intrinsic(name) => {
                self.bump();
                let args = self.args()?;
                Ok(InstrKind::Intrinsic { dst: None, name, args })
            }
            Tok::Ident(op) => {
                self.bump();
                match op.as_str() {
                    "free" => Ok(InstrKind::HeapFree { ptr: self.operand()? }),
                    "store" => {
                        let size = self.int()?;
                        let (ptr, src) = self.operand_pair()?;
                        Ok(InstrKind::Store { ptr, src, size })
                    }
                    "call" => {
                        let callee = self.ident()?;
                        let args = self.args()?;
                        Ok(InstrKind::Call { dst: None, callee, args })
                    }
                    "br" => Ok(InstrKind::Br { target: self.ident()? }),
                    "cbr" => {
                        let cond = self.operand()?;
                        self.expect(Tok::Comma)?;
                        let then_target = self.ident()?;
                        self.expect(Tok::Comma)?;
                        let else_target = self.ident()?;
                        Ok(InstrKind::CondBr { cond, then_target, else_target })
                    }
                    "ret" => {
                        let val = match self.peek() {
                            Tok::Sep | Tok::RBrace | Tok::Eof => None,
                            _ => Some(self.operand()?),
                        };
                        Ok(InstrKind::Ret { val })
                    }
                    _ => {
                        self.pos -= 1;
                        self.expected("instruction")
                    }
                }
            }
            _ => self.expected("instruction"),
        }
    }

    fn assignment(&mut self, dst: String) -> PResult<InstrKind> {
        if let Tok::Intrinsic(name) = self.peek().clone() {
            self.bump();
            let args = self.args()?;
            return Ok(InstrKind::Intrinsic { dst: Some(dst), name, args });
        }
        let op = self.ident()?;
        Ok(match op.as_str() {
            "stack_alloc" => {
                let elem_size = self.elem_size()?;
                self.keyword("x")?;
                let length = self.int()?;
                let address_taken = matches!(self.peek(), Tok::Ident(s) if s == "addr_taken");
                if address_taken {
                    self.bump();
                }
                InstrKind::StackAlloc { dst, elem_size, length, address_taken }
            }
            "malloc" => InstrKind::HeapAlloc { dst, size: self.operand()? },
            "realloc" => {
                let (ptr, size) = self.operand_pair()?;
                InstrKind::HeapRealloc { dst, ptr, size }
            }
            "load" => {
                let size = self.int()?;
                let ptr = self.operand()?;
                InstrKind::Load { dst, ptr, size }
            }
            "ptr_add" => {
                let (ptr, delta) = self.operand_pair()?;
                InstrKind::PtrAdd { dst, ptr, delta }
            }
            "ptr_to_int" => InstrKind::PtrToInt { dst, ptr: self.operand()? },
            "int_to_ptr" => InstrKind::IntToPtr { dst, int: self.operand()? },
            "copy" => InstrKind::Copy { dst, src: self.operand()? },
            "call" => {
                let callee = self.ident()?;
                let args = self.args()?;
                InstrKind::Call { dst: Some(dst), callee, args }
            }
            "global_addr" => InstrKind::GlobalAddr { dst, global: self.ident()? },
            other => match BinOp::from_mnemonic(other) {
                Some(op) => {
                    let (a, b) = self.operand_pair()?;
                    InstrKind::BinOp { dst, op, a, b }
                }
                None => {
                    self.pos -= 1;
                    return self.expected("opcode");
                }
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let m = parse("func main() { a = stack_alloc 4 x 10; ret 0 }").unwrap();
        assert_eq!(m.functions.len(), 1);
        let f = &m.functions[0];
        assert_eq!(f.name, "main");
        assert_eq!(f.blocks.len(), 1);
        assert_eq!(
            f.blocks[0].instrs[0].kind,
            InstrKind::StackAlloc { dst: "a".into(), elem_size: 4, length: 10, address_taken: false }
        );
        assert_eq!(f.blocks[0].instrs[1].kind, InstrKind::Ret { val: Some(Operand::Imm(0)) });
    }

    #[test]
    fn comment_lines_are_skipped() {
        let text = "; header comment\nfunc main() {\n  ; inside\n  ret 0\n}\n";
        let m = parse(text).unwrap();
        assert_eq!(m.functions[0].blocks[0].instrs.len(), 1);
        assert_eq!(m.functions[0].blocks[0].instrs[0].loc.line, 4);
    }

    #[test]
    fn integer_literals() {
        assert_eq!(parse_int("0x10"), Some(16));
        assert_eq!(parse_int("-1"), Some(u64::MAX));
        assert_eq!(parse_int("-9223372036854775808"), Some(1 << 63));
        assert_eq!(parse_int("-9223372036854775809"), None);
        assert_eq!(parse_int("12z"), None);
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_unvalidated("func main() {\n  a = frobnicate 1\n  ret 0\n}\n", "t.mir").unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].line, 2);
        assert!(err[0].message.contains("opcode"), "{}", err[0].message);
    }

    #[test]
    fn multiple_errors_are_collected() {
        let err = parse_unvalidated("func main() {\n  a = load\n  store 4 p\n  ret 0\n}\n", "t.mir").unwrap_err();
        assert_eq!(err.len(), 2);
        assert_eq!((err[0].line, err[1].line), (2, 3));
    }

    #[test]
    fn undefined_register_is_a_validation_error() {
        match parse("func main() { x = load 4 nowhere; ret 0 }") {
            Err(ParseError::Invalid(vs)) => {
                assert!(vs.iter().any(|v| v.to_string().contains("nowhere")), "{vs:?}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn globals_and_ctors() {
        let m = parse(
            "global g = int32 x 16\nglobal s = int64\nextern global e = 4 x 2\nctors init\nfunc init() { ret }\nfunc main() { ret 0 }",
        )
        .unwrap();
        assert_eq!(
            m.globals[0],
            GlobalDef { name: "g".into(), elem_size: 4, length: 16, is_array: true, is_extern: false }
        );
        assert_eq!(
            m.globals[1],
            GlobalDef { name: "s".into(), elem_size: 8, length: 1, is_array: false, is_extern: false }
        );
        assert!(m.globals[2].is_extern);
        assert_eq!(m.constructors, ["init"]);
    }

    #[test]
    fn variadic_and_labels() {
        let m = parse(
            "func sum(n: i64, ...) -> i64 {\n  x = @va_arg(0)\n  br done\ndone:\n  ret n\n}\nfunc main() { r = call sum(1, 2, 3); ret 0 }",
        )
        .unwrap();
        let f = m.function("sum").unwrap();
        assert!(f.is_variadic);
        assert_eq!(f.blocks.iter().map(|b| b.label.as_str()).collect::<Vec<_>>(), ["entry", "done"]);
    }
}
