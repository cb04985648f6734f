//! Interpreter for the IR over a simulated 64-bit address space.
//!
//! Loads and stores apply the canonical-address rule: an address whose top 16
//! bits are not all zero, or that lands on unmapped memory, raises a hardware
//! fault at the instruction. The metadata table lives in guest memory at
//! [`layout::TABLE_BASE`], so the runtime hooks and the inline arithmetic of
//! expanded instrumentation operate on the same bytes.

mod exec;
pub mod heap;
pub mod layout;
pub mod memory;
mod monitor;
mod program;
mod trace;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use monitor::{Access, AccessKind, Monitor, NoMonitor, Region};
pub use program::Program;
pub use trace::TraceEvent;

use crate::capability::DEFAULT_CAPACITY;
use crate::ir::Module;

/// Where an instruction came from: its function and parse-time location.
/// Instructions inserted by instrumentation inherit the site they guard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub function: String,
    pub line: u32,
    pub instr_index: u32,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}#{}", self.function, self.line, self.instr_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub table_capacity: u32,
    pub seed: u64,
    pub step_limit: u64,
    pub trace: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config { table_capacity: DEFAULT_CAPACITY, seed: 0, step_limit: 50_000_000, trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Exit { code: i64 },
    HardwareFault { site: Site, addr: u64 },
    VmError { message: String, site: Option<Site> },
}

impl Outcome {
    pub fn is_fault(&self) -> bool {
        matches!(self, Outcome::HardwareFault { .. })
    }

    pub fn fault_site(&self) -> Option<&Site> {
        match self {
            Outcome::HardwareFault { site, .. } => Some(site),
            _ => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Exit { code } => write!(f, "exit({code})"),
            Outcome::HardwareFault { site, addr } => write!(f, "hardware fault at {site} (address {addr:#x})"),
            Outcome::VmError { message, site: Some(s) } => write!(f, "vm error at {s}: {message}"),
            Outcome::VmError { message, site: None } => write!(f, "vm error: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionResult {
    pub outcome: Outcome,
    pub output: Vec<u8>,
    /// Empty unless `Config::trace` is set.
    pub trace: Vec<TraceEvent>,
    pub steps: u64,
    pub heap_footprint: u64,
}

/// Compiles and runs `m`. Invalid modules become a `VmError` outcome.
pub fn run(m: &Module, args: &[u64], config: &Config) -> ExecutionResult {
    match Program::compile(m) {
        Ok(p) => run_program(&p, args, config),
        Err(message) => ExecutionResult {
            outcome: Outcome::VmError { message, site: None },
            output: Vec::new(),
            trace: Vec::new(),
            steps: 0,
            heap_footprint: 0,
        },
    }
}

pub fn run_program(p: &Program, args: &[u64], config: &Config) -> ExecutionResult {
    run_monitored(p, args, config, NoMonitor).0
}

/// Runs with `monitor` observing every object lifetime and access; returns
/// the monitor afterwards.
pub fn run_monitored<M: Monitor>(p: &Program, args: &[u64], config: &Config, monitor: M) -> (ExecutionResult, M) {
    exec::Machine::new(p, config, monitor).run(args)
}

#[cfg(test)]
mod tests;
