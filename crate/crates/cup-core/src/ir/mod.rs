//! The miniature IR: a register-based, single-assignment program form with
//! explicit stack, heap and global allocations.

mod ast;
mod intrinsics;
mod parse;
mod print;
mod validate;

pub use ast::*;
pub use intrinsics::Intrinsic;
pub use parse::{parse, parse_named, parse_unvalidated, ParseError, SyntaxError};
pub use print::print;
pub use validate::{validate, Violation, ViolationKind};
