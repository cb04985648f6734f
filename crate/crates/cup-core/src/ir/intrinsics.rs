use super::ast::ValueKind;

/// Built-in operations invoked with `@name(...)`. The libc model lives here
/// alongside the runtime hooks the instrumentation emits (`cup.*`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Intrinsic {
    Memcpy,
    Memset,
    Strcpy,
    Strlen,
    Print,
    PrintInt,
    Rand,
    VaArg,
    VaCount,
    AllocMeta,
    FreeMeta,
    ReallocMeta,
    Check,
    CheckLocal,
    Unenrich,
}

impl Intrinsic {
    pub const ALL: [Intrinsic; 15] = [
        Intrinsic::Memcpy,
        Intrinsic::Memset,
        Intrinsic::Strcpy,
        Intrinsic::Strlen,
        Intrinsic::Print,
        Intrinsic::PrintInt,
        Intrinsic::Rand,
        Intrinsic::VaArg,
        Intrinsic::VaCount,
        Intrinsic::AllocMeta,
        Intrinsic::FreeMeta,
        Intrinsic::ReallocMeta,
        Intrinsic::Check,
        Intrinsic::CheckLocal,
        Intrinsic::Unenrich,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::Memcpy => "memcpy",
            Intrinsic::Memset => "memset",
            Intrinsic::Strcpy => "strcpy",
            Intrinsic::Strlen => "strlen",
            Intrinsic::Print => "print",
            Intrinsic::PrintInt => "print_int",
            Intrinsic::Rand => "rand",
            Intrinsic::VaArg => "va_arg",
            Intrinsic::VaCount => "va_count",
            Intrinsic::AllocMeta => "cup.alloc_meta",
            Intrinsic::FreeMeta => "cup.free_meta",
            Intrinsic::ReallocMeta => "cup.realloc_meta",
            Intrinsic::Check => "cup.check",
            Intrinsic::CheckLocal => "cup.check_local",
            Intrinsic::Unenrich => "cup.unenrich",
        }
    }

    pub fn from_name(name: &str) -> Option<Intrinsic> {
        Intrinsic::ALL.iter().copied().find(|i| i.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Intrinsic::Rand | Intrinsic::VaCount => 0,
            Intrinsic::Strlen | Intrinsic::PrintInt | Intrinsic::VaArg | Intrinsic::FreeMeta | Intrinsic::Unenrich => 1,
            Intrinsic::Strcpy | Intrinsic::Print | Intrinsic::AllocMeta | Intrinsic::Check => 2,
            Intrinsic::Memcpy | Intrinsic::Memset | Intrinsic::ReallocMeta => 3,
            Intrinsic::CheckLocal => 4,
        }
    }

    pub fn returns(self) -> Option<ValueKind> {
        match self {
            Intrinsic::Memcpy
            | Intrinsic::Memset
            | Intrinsic::Strcpy
            | Intrinsic::VaArg
            | Intrinsic::AllocMeta
            | Intrinsic::ReallocMeta
            | Intrinsic::Check
            | Intrinsic::CheckLocal => Some(ValueKind::Ptr),
            Intrinsic::Strlen | Intrinsic::Rand | Intrinsic::VaCount | Intrinsic::Unenrich => Some(ValueKind::I64),
            Intrinsic::Print | Intrinsic::PrintInt | Intrinsic::FreeMeta => None,
        }
    }

    /// Runtime hooks inserted by the instrumentation pass.
    pub fn is_runtime_hook(self) -> bool {
        self.name().starts_with("cup.")
    }

    /// Hands a buffer to the outside world; its pointer must be unenriched
    /// and checked by the caller.
    pub fn is_syscall(self) -> bool {
        matches!(self, Intrinsic::Print)
    }
}
