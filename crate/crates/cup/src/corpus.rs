//! Paired test cases: a buggy module with one injected violation and its
//! patched twin.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cup_core::vm::Region;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectedViolation {
    SpatialOver,
    SpatialUnder,
    Uaf,
    LongStride,
    ElementSizeEdge,
}

impl InjectedViolation {
    pub const ALL: [InjectedViolation; 5] = [
        InjectedViolation::SpatialOver,
        InjectedViolation::SpatialUnder,
        InjectedViolation::Uaf,
        InjectedViolation::LongStride,
        InjectedViolation::ElementSizeEdge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InjectedViolation::SpatialOver => "spatial_over",
            InjectedViolation::SpatialUnder => "spatial_under",
            InjectedViolation::Uaf => "uaf",
            InjectedViolation::LongStride => "long_stride",
            InjectedViolation::ElementSizeEdge => "element_size_edge",
        }
    }
}

/// The verdict a case is designed to produce on its buggy variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Designation {
    /// The sanitizer must fault at the violation.
    #[default]
    Detect,
    /// A temporal violation masked by capability ID reuse.
    ExpectedMiss,
    /// No violation on the modelled 64-bit target.
    NoViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub violation_kind: InjectedViolation,
    pub region: Region,
    #[serde(default)]
    pub expect: Designation,
    /// The buggy variant is only a bug where pointers are narrower than 8 bytes.
    #[serde(default)]
    pub arch_dependent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub name: String,
    pub buggy: String,
    pub patched: String,
    pub expected: Expectation,
}

impl CorpusCase {
    pub fn load(dir: &Path) -> Result<CorpusCase> {
        let read =
            |f: &str| fs::read_to_string(dir.join(f)).with_context(|| format!("reading {}", dir.join(f).display()));
        let expected: Expectation = serde_json::from_str(&read("expect.json")?)
            .with_context(|| format!("parsing {}/expect.json", dir.display()))?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        Ok(CorpusCase { name, buggy: read("buggy.mir")?, patched: read("patched.mir")?, expected })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(&self.name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("buggy.mir"), &self.buggy)?;
        fs::write(dir.join("patched.mir"), &self.patched)?;
        fs::write(dir.join("expect.json"), serde_json::to_string_pretty(&self.expected)? + "\n")?;
        Ok(())
    }
}

/// Loads every `<name>/` case under `root`, sorted by name.
pub fn load_dir(root: &Path) -> Result<Vec<CorpusCase>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .with_context(|| format!("reading corpus directory {}", root.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("expect.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no cases under {}", root.display());
    }
    dirs.iter().map(|d| CorpusCase::load(d)).collect()
}
