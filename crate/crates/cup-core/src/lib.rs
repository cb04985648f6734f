//! Capability-based memory-safety sanitizer over a miniature IR.
//!
//! The crate is `no_std` (with `alloc`). It contains the IR, the capability
//! metadata runtime, the escape/dereference analysis, the instrumentation
//! pass and an interpreter that models a 64-bit machine which faults on
//! non-canonical addresses.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod capability;
pub mod instrument;
pub mod ir;
pub mod vm;
