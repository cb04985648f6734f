//! Aggregates case results into verdict counts and a text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cup_core::instrument::LoweringMode;
use serde::{Deserialize, Serialize};

use crate::bench::Microbench;
use crate::harness::{CaseResult, Verdict};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    pub expected_miss: u64,
}

impl Counts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Tp => self.tp += 1,
            Verdict::Tn => self.tn += 1,
            Verdict::Fp => self.fp += 1,
            Verdict::Fn => self.fn_ += 1,
            Verdict::ExpectedMiss => self.expected_miss += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_ + self.expected_miss
    }

    /// False positives over all runs that should not fault.
    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// False negatives over all runs with a violation; expected misses are
    /// counted in the denominator but never as false negatives.
    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_, self.tp + self.fn_ + self.expected_miss)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: LoweringMode,
    pub cases: usize,
    pub counts: Counts,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub by_kind: BTreeMap<String, Counts>,
    pub by_region: BTreeMap<String, Counts>,
    /// Cases whose buggy variant is only a bug on narrower-pointer targets.
    pub arch_dependent: Vec<String>,
    /// Cases whose buggy verdict differs from the one they were designed for.
    pub mismatches: Vec<String>,
    pub errors: BTreeMap<String, Vec<String>>,
    pub unknown_provenance: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub microbenchmark: Option<Microbench>,
    pub results: Vec<CaseResult>,
}

impl Report {
    pub fn new(mode: LoweringMode, results: Vec<CaseResult>) -> Report {
        let mut counts = Counts::default();
        let mut by_kind: BTreeMap<String, Counts> = BTreeMap::new();
        let mut by_region: BTreeMap<String, Counts> = BTreeMap::new();
        let mut errors = BTreeMap::new();
        let mut unknown_provenance = 0;
        for r in &results {
            let region =
                serde_json::to_value(r.region).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            for v in r.verdicts() {
                counts.add(v);
                by_kind.entry(r.violation_kind.as_str().into()).or_default().add(v);
                by_region.entry(region.clone()).or_default().add(v);
            }
            unknown_provenance += r.buggy.iter().chain(r.patched.iter()).map(|v| v.unknown_provenance).sum::<usize>();
            if !r.errors.is_empty() {
                errors.insert(r.name.clone(), r.errors.clone());
            }
        }
        Report {
            mode,
            cases: results.len(),
            fp_rate: counts.fp_rate(),
            fn_rate: counts.fn_rate(),
            counts,
            by_kind,
            by_region,
            arch_dependent: results.iter().filter(|r| r.arch_dependent).map(|r| r.name.clone()).collect(),
            mismatches: results.iter().filter(|r| !r.matches_designation()).map(|r| r.name.clone()).collect(),
            errors,
            unknown_provenance,
            microbenchmark: None,
            results,
        }
    }

    /// Whether the run is clean: no false positives or negatives, every case
    /// behaved as designed and none was malformed.
    pub fn passed(&self) -> bool {
        self.counts.fp == 0 && self.counts.fn_ == 0 && self.mismatches.is_empty() && self.errors.is_empty()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let header = format!("{:<20} {:>5} {:>5} {:>5} {:>5} {:>6}", "", "TP", "TN", "FP", "FN", "miss");
        let row = |s: &mut String, name: &str, c: &Counts| {
            writeln!(s, "{name:<20} {:>5} {:>5} {:>5} {:>5} {:>6}", c.tp, c.tn, c.fp, c.fn_, c.expected_miss).unwrap();
        };
        writeln!(s, "mode: {}   cases: {}", self.mode.as_str(), self.cases).unwrap();
        writeln!(s, "{header}").unwrap();
        for (k, c) in &self.by_kind {
            row(&mut s, k, c);
        }
        writeln!(s, "{}", "-".repeat(header.len())).unwrap();
        for (k, c) in &self.by_region {
            row(&mut s, k, c);
        }
        writeln!(s, "{}", "-".repeat(header.len())).unwrap();
        row(&mut s, "total", &self.counts);
        writeln!(
            s,
            "false positive rate {:.2}%   false negative rate {:.2}%",
            self.fp_rate * 100.0,
            self.fn_rate * 100.0
        )
        .unwrap();
        if !self.arch_dependent.is_empty() {
            writeln!(s, "architecture-dependent (TN on 64-bit): {}", self.arch_dependent.join(", ")).unwrap();
        }
        if self.unknown_provenance > 0 {
            writeln!(s, "accesses with unknown provenance: {}", self.unknown_provenance).unwrap();
        }
        for m in &self.mismatches {
            writeln!(s, "MISMATCH {m}").unwrap();
        }
        for (name, es) in &self.errors {
            for e in es {
                writeln!(s, "ERROR {name}: {e}").unwrap();
            }
        }
        if let Some(b) = &self.microbenchmark {
            writeln!(
                s,
                "microbenchmark: {} checks, branchless {:.2} ns/check, branching {:.2} ns/check, {} disagreements",
                b.checks, b.branchless_ns_per_check, b.branching_ns_per_check, b.disagreements
            )
            .unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_true_negatives_have_zero_fp_rate() {
        let mut c = Counts::default();
        for _ in 0..7 {
            c.add(Verdict::Tn);
        }
        assert_eq!(c.fp_rate(), 0.0);
        assert_eq!(c.fn_rate(), 0.0);
    }

    #[test]
    fn rates_are_ratios() {
        let mut c = Counts::default();
        for v in [
            Verdict::Tp,
            Verdict::Tp,
            Verdict::Fn,
            Verdict::ExpectedMiss,
            Verdict::Tn,
            Verdict::Tn,
            Verdict::Tn,
            Verdict::Fp,
        ] {
            c.add(v);
        }
        assert_eq!(c.total(), 8);
        assert_eq!(c.fp_rate(), 0.25);
        assert_eq!(c.fn_rate(), 0.25);
    }
}
