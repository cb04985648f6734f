use alloc::string::String;

use serde::{Deserialize, Serialize};

use super::Site;
use crate::capability::{CapId, MetadataEntry};

/// Runtime events recorded when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Call {
        function: String,
        next_entry: CapId,
    },
    Return {
        function: String,
        next_entry: CapId,
    },
    AllocMeta {
        site: Site,
        id: CapId,
        base: u64,
        end: u64,
    },
    FreeMeta {
        site: Site,
        id: CapId,
    },
    /// `moved` is set when the block changed address and the ID was released
    /// and taken again.
    ReallocMeta {
        site: Site,
        id: CapId,
        base: u64,
        end: u64,
        moved: bool,
    },
    /// A table-based check, from `cup.check` or from a byte access inside a
    /// libc intrinsic.
    Check {
        site: Site,
        word: u64,
        size: u64,
        entry: MetadataEntry,
        result: u64,
    },
    LocalCheck {
        site: Site,
        addr: u64,
        size: u64,
        base: u64,
        end: u64,
        result: u64,
    },
    Malloc {
        site: Site,
        addr: u64,
        size: u64,
    },
    Free {
        site: Site,
        addr: u64,
    },
    Realloc {
        site: Site,
        old: u64,
        new: u64,
        size: u64,
    },
}

impl TraceEvent {
    pub fn site(&self) -> Option<&Site> {
        match self {
            TraceEvent::Call { .. } | TraceEvent::Return { .. } => None,
            TraceEvent::AllocMeta { site, .. }
            | TraceEvent::FreeMeta { site, .. }
            | TraceEvent::ReallocMeta { site, .. }
            | TraceEvent::Check { site, .. }
            | TraceEvent::LocalCheck { site, .. }
            | TraceEvent::Malloc { site, .. }
            | TraceEvent::Free { site, .. }
            | TraceEvent::Realloc { site, .. } => Some(site),
        }
    }
}
