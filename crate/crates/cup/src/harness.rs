//! Runs corpus cases under instrumentation and classifies each variant
//! against the oracle.

use std::collections::{BTreeSet, HashMap};

use cup_core::capability::{CapId, EnrichedWord, ENRICHED_BIT};
use cup_core::instrument::{self, remove_group, InstrumentedModule, LoweringMode};
use cup_core::ir::{parse_named, Module};
use cup_core::vm::{self, Config, ExecutionResult, Outcome, Region, Site, TraceEvent};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusCase, Designation, InjectedViolation};
use crate::oracle::{oracle_run, OracleTrace, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "TN")]
    Tn,
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "FN")]
    Fn,
    #[serde(rename = "expected_miss")]
    ExpectedMiss,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Tp => "TP",
            Verdict::Tn => "TN",
            Verdict::Fp => "FP",
            Verdict::Fn => "FN",
            Verdict::ExpectedMiss => "expected_miss",
        }
    }
}

/// Why a temporal violation went undetected: the dangling word's ID was
/// released and handed to a new object, and the dangling offset passed the
/// new object's bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseEvidence {
    pub id: CapId,
    pub offset: u32,
    pub freed_at: Site,
    pub reused_at: Site,
    pub new_base: u64,
    pub new_end: u64,
    pub check_site: Site,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantResult {
    pub verdict: Verdict,
    pub outcome: Outcome,
    pub violations: Vec<Violation>,
    pub unknown_provenance: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub evidence: Vec<ReuseEvidence>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl VariantResult {
    pub fn fault_site(&self) -> Option<&Site> {
        self.outcome.fault_site()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub mode: LoweringMode,
    pub violation_kind: InjectedViolation,
    pub region: Region,
    pub designation: Designation,
    pub arch_dependent: bool,
    pub buggy: Option<VariantResult>,
    pub patched: Option<VariantResult>,
    /// Problems with the case itself rather than with the sanitizer.
    pub errors: Vec<String>,
}

impl CaseResult {
    pub fn verdicts(&self) -> impl Iterator<Item = Verdict> + '_ {
        self.buggy.iter().chain(self.patched.iter()).map(|v| v.verdict)
    }

    /// Whether the buggy verdict is the one the case was designed for.
    pub fn matches_designation(&self) -> bool {
        let Some(b) = &self.buggy else { return false };
        matches!(
            (self.designation, b.verdict),
            (Designation::Detect, Verdict::Tp)
                | (Designation::ExpectedMiss, Verdict::ExpectedMiss)
                | (Designation::NoViolation, Verdict::Tn)
        )
    }
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub mode: LoweringMode,
    pub vm: Config,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig { mode: LoweringMode::Expanded, vm: Config::default() }
    }
}

pub fn parse_variant(c: &CorpusCase, buggy: bool) -> Result<Module, String> {
    let (text, file) = if buggy { (&c.buggy, "buggy.mir") } else { (&c.patched, "patched.mir") };
    parse_named(text, &format!("{}/{file}", c.name)).map_err(|e| e.to_string())
}

/// Instruments and runs one variant.
pub fn instrumented_run(
    m: &Module,
    mode: LoweringMode,
    config: &Config,
) -> Result<(InstrumentedModule, ExecutionResult), String> {
    let im = instrument::instrument(m, mode).map_err(|e| e.to_string())?;
    let r = vm::run(&im.module, &[], config);
    Ok((im, r))
}

pub fn run_case(c: &CorpusCase, hc: &HarnessConfig) -> CaseResult {
    let mut result = CaseResult {
        name: c.name.clone(),
        mode: hc.mode,
        violation_kind: c.expected.violation_kind,
        region: c.expected.region,
        designation: c.expected.expect,
        arch_dependent: c.expected.arch_dependent,
        buggy: None,
        patched: None,
        errors: Vec::new(),
    };
    match parse_variant(c, false) {
        Ok(m) => result.patched = run_patched(&m, hc, &mut result.errors),
        Err(e) => result.errors.push(format!("patched: {e}")),
    }
    match parse_variant(c, true) {
        Ok(m) => result.buggy = run_buggy(&m, hc, c, &mut result.errors),
        Err(e) => result.errors.push(format!("buggy: {e}")),
    }
    result
}

fn run_patched(m: &Module, hc: &HarnessConfig, errors: &mut Vec<String>) -> Option<VariantResult> {
    let (plain, oracle) = oracle_run(m, &[], &hc.vm);
    if plain.outcome != (Outcome::Exit { code: 0 }) {
        errors.push(format!("patched variant does not exit cleanly uninstrumented: {}", plain.outcome));
    }
    if !oracle.violations.is_empty() {
        errors.push(format!("patched variant has {} oracle violations", oracle.violations.len()));
    }
    let (_, r) = instrumented_run(m, hc.mode, &hc.vm).map_err(|e| errors.push(format!("patched: {e}"))).ok()?;
    let (verdict, note) = match &r.outcome {
        Outcome::HardwareFault { .. } => (Verdict::Fp, Some("instrumented patched variant faulted".to_string())),
        Outcome::Exit { code: 0 } => (Verdict::Tn, None),
        other => {
            errors.push(format!("instrumented patched variant ended with {other}"));
            (Verdict::Tn, Some(format!("ended with {other}")))
        }
    };
    Some(VariantResult {
        verdict,
        outcome: r.outcome,
        violations: oracle.violations,
        unknown_provenance: oracle.unknown_provenance.len(),
        evidence: Vec::new(),
        note,
    })
}

fn run_buggy(m: &Module, hc: &HarnessConfig, c: &CorpusCase, errors: &mut Vec<String>) -> Option<VariantResult> {
    let (_, oracle) = oracle_run(m, &[], &hc.vm);
    let (_, r) = instrumented_run(m, hc.mode, &hc.vm).map_err(|e| errors.push(format!("buggy: {e}"))).ok()?;
    if oracle.violations.is_empty() && c.expected.expect != Designation::NoViolation {
        errors.push("buggy variant has no oracle-confirmed violation".into());
    }
    if let Some(v) = oracle.violations.first() {
        if !kind_consistent(c.expected.violation_kind, v) {
            errors.push(format!(
                "first violation is {:?}, case declares {}",
                v.kind,
                c.expected.violation_kind.as_str()
            ));
        }
    }
    let needs_evidence = oracle.violations.iter().any(|v| v.kind.is_temporal());
    let trace = if needs_evidence {
        let traced = Config { trace: true, ..hc.vm.clone() };
        instrumented_run(m, LoweringMode::Intrinsic, &traced).map(|(_, r)| r.trace).unwrap_or_default()
    } else {
        Vec::new()
    };
    let (verdict, evidence, note) = classify_buggy(&r.outcome, &oracle, &trace);
    Some(VariantResult {
        verdict,
        outcome: r.outcome,
        violations: oracle.violations,
        unknown_provenance: oracle.unknown_provenance.len(),
        evidence,
        note,
    })
}

fn kind_consistent(declared: InjectedViolation, v: &Violation) -> bool {
    use crate::oracle::ViolationKind as K;
    match declared {
        InjectedViolation::Uaf => v.kind == K::Uaf,
        InjectedViolation::SpatialOver => v.kind == K::SpatialOver,
        InjectedViolation::SpatialUnder => v.kind == K::SpatialUnder,
        InjectedViolation::LongStride | InjectedViolation::ElementSizeEdge => {
            matches!(v.kind, K::SpatialOver | K::SpatialUnder)
        }
    }
}

/// Compares the sanitizer's first fault against the oracle's violations in
/// execution order. Temporal violations that passed a check because their
/// ID had been reused are skipped with evidence; the first violation that
/// cannot be explained must be where the sanitizer faulted.
pub fn classify_buggy(
    outcome: &Outcome,
    oracle: &OracleTrace,
    trace: &[TraceEvent],
) -> (Verdict, Vec<ReuseEvidence>, Option<String>) {
    let fault = outcome.fault_site();
    let mut evidence = Vec::new();
    for v in &oracle.violations {
        if fault == Some(&v.site) {
            return (Verdict::Tp, evidence, None);
        }
        match v.kind.is_temporal().then(|| reuse_evidence(trace, &v.site)).flatten() {
            Some(e) => evidence.push(e),
            None => {
                let note = match fault {
                    Some(s) => format!("missed {:?} at {}; faulted later at {s}", v.kind, v.site),
                    None => format!("missed {:?} at {}; run ended with {outcome}", v.kind, v.site),
                };
                return (Verdict::Fn, evidence, Some(note));
            }
        }
    }
    match (fault, oracle.violations.is_empty()) {
        (Some(s), _) => (Verdict::Fp, evidence, Some(format!("fault at {s} matches no oracle violation"))),
        (None, true) => (Verdict::Tn, evidence, None),
        (None, false) => (Verdict::ExpectedMiss, evidence, None),
    }
}

/// Finds a passing table check at `site` whose ID had been freed and then
/// handed out again before the check.
pub fn reuse_evidence(trace: &[TraceEvent], site: &Site) -> Option<ReuseEvidence> {
    let mut freed: HashMap<CapId, Site> = HashMap::new();
    let mut reused: HashMap<CapId, (Site, Site, u64, u64)> = HashMap::new();
    for e in trace {
        match e {
            TraceEvent::FreeMeta { site, id } => {
                freed.insert(*id, site.clone());
                reused.remove(id);
            }
            TraceEvent::AllocMeta { site, id, base, end } => {
                if let Some(f) = freed.remove(id) {
                    reused.insert(*id, (f, site.clone(), *base, *end));
                }
            }
            TraceEvent::ReallocMeta { site, id, base, end, moved: true } => {
                reused.insert(*id, (site.clone(), site.clone(), *base, *end));
            }
            TraceEvent::Check { site: s, word, result, .. } if s == site && result & ENRICHED_BIT == 0 => {
                let w = EnrichedWord(*word);
                if !w.is_enriched() {
                    continue;
                }
                let d = w.decode();
                if let Some((freed_at, reused_at, new_base, new_end)) = reused.get(&d.id) {
                    return Some(ReuseEvidence {
                        id: d.id,
                        offset: d.offset,
                        freed_at: freed_at.clone(),
                        reused_at: reused_at.clone(),
                        new_base: *new_base,
                        new_end: *new_end,
                        check_site: s.clone(),
                    });
                }
            }
            _ => {}
        }
    }
    None
}

/// Runs every case in parallel; results keep the input order.
pub fn run_corpus(cases: &[CorpusCase], hc: &HarnessConfig) -> Vec<CaseResult> {
    cases.par_iter().map(|c| run_case(c, hc)).collect()
}

/// Whether both lowerings of `m` behave identically: same outcome,
/// including the fault site, and the same output.
pub fn modes_agree(m: &Module, config: &Config) -> Result<(), String> {
    let i = instrumented_run(m, LoweringMode::Intrinsic, config)?.1;
    let e = instrumented_run(m, LoweringMode::Expanded, config)?.1;
    if i.outcome != e.outcome {
        return Err(format!("intrinsic: {}; expanded: {}", i.outcome, e.outcome));
    }
    if i.output != e.output {
        return Err("outputs differ".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationReport {
    /// Check groups whose guarded access saw an enriched address.
    pub mutants: usize,
    pub faulted: usize,
    pub survivors: Vec<String>,
}

/// Deletes each fail-closed check group of the expanded lowering of `m`,
/// one at a time, and confirms that the run then faults at the guarded
/// access. Only groups whose site was checked with an enriched word in the
/// unmutated run are mutated; other checks guard raw addresses that are
/// meant to pass through unchanged.
pub fn mutation_suite(m: &Module, config: &Config) -> Result<MutationReport, String> {
    let traced = Config { trace: true, ..config.clone() };
    let (_, r) = instrumented_run(m, LoweringMode::Intrinsic, &traced)?;
    let enriched: BTreeSet<&Site> = r
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Check { site, word, .. } if EnrichedWord(*word).is_enriched() => Some(site),
            _ => None,
        })
        .collect();
    let im = instrument::instrument(m, LoweringMode::Expanded).map_err(|e| e.to_string())?;
    let mut report = MutationReport::default();
    for g in im.provenance.groups.iter().filter(|g| g.is_fail_closed_check()) {
        if !enriched.contains(&g.site()) {
            continue;
        }
        report.mutants += 1;
        let mutant = remove_group(&im, g.id).ok_or("group vanished")?;
        let out = vm::run(&mutant, &[], config).outcome;
        if out.fault_site() == Some(&g.site()) {
            report.faulted += 1;
        } else {
            report.survivors.push(format!("group {} at {}: {out}", g.id, g.site()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Expectation;

    fn case(buggy: &str, patched: &str, kind: InjectedViolation, region: Region, expect: Designation) -> CorpusCase {
        CorpusCase {
            name: "t".into(),
            buggy: buggy.into(),
            patched: patched.into(),
            expected: Expectation { violation_kind: kind, region, expect, arch_dependent: false, note: None },
        }
    }

    const LISTING_BUGGY: &str = "func fill(data: i64) {\n  b = stack_alloc 1 x 10\n  n = add data, 1\n  @memset(b, 65, n)\n  ret 0\n}\nfunc main() {\n  x = call fill(10)\n  ret 0\n}\n";
    const LISTING_PATCHED: &str = "func fill(data: i64) {\n  b = stack_alloc 1 x 10\n  @memset(b, 65, data)\n  ret 0\n}\nfunc main() {\n  x = call fill(10)\n  ret 0\n}\n";

    #[test]
    fn memset_overflow_is_a_true_positive_in_both_modes() {
        for mode in [LoweringMode::Intrinsic, LoweringMode::Expanded] {
            let c = case(
                LISTING_BUGGY,
                LISTING_PATCHED,
                InjectedViolation::SpatialOver,
                Region::Stack,
                Designation::Detect,
            );
            let r = run_case(&c, &HarnessConfig { mode, ..HarnessConfig::default() });
            assert!(r.errors.is_empty(), "{:?}", r.errors);
            assert_eq!(r.buggy.as_ref().unwrap().verdict, Verdict::Tp);
            assert_eq!(r.patched.as_ref().unwrap().verdict, Verdict::Tn);
            assert!(r.matches_designation());
        }
    }

    #[test]
    fn reuse_after_free_is_an_expected_miss_with_evidence() {
        let buggy =
            "func main() {\n  a = malloc 16\n  free a\n  b = malloc 16\n  store 8 b, 1\n  x = load 8 a\n  ret 0\n}\n";
        let patched =
            "func main() {\n  a = malloc 16\n  x = load 8 a\n  free a\n  b = malloc 16\n  store 8 b, 1\n  ret 0\n}\n";
        let c = case(buggy, patched, InjectedViolation::Uaf, Region::Heap, Designation::ExpectedMiss);
        let r = run_case(&c, &HarnessConfig::default());
        let b = r.buggy.unwrap();
        assert_eq!(b.verdict, Verdict::ExpectedMiss);
        assert_eq!(b.evidence.len(), 1);
        assert_eq!(b.evidence[0].id, 1);
        assert_eq!(b.evidence[0].check_site.instr_index, 4);
    }

    #[test]
    fn classify_unexplained_miss_as_false_negative() {
        let oracle = OracleTrace {
            violations: vec![Violation {
                site: Site { function: "main".into(), line: 3, instr_index: 1 },
                kind: crate::oracle::ViolationKind::SpatialOver,
                operation: crate::oracle::Operation::Write,
                uid: 1,
                region: Region::Heap,
                addr: 0,
                size: 1,
                offset: 16,
            }],
            ..OracleTrace::default()
        };
        let (v, _, note) = classify_buggy(&Outcome::Exit { code: 0 }, &oracle, &[]);
        assert_eq!(v, Verdict::Fn);
        assert!(note.unwrap().contains("missed"));
        let fault = Outcome::HardwareFault { site: Site { function: "main".into(), line: 9, instr_index: 7 }, addr: 0 };
        assert_eq!(classify_buggy(&fault, &OracleTrace::default(), &[]).0, Verdict::Fp);
        assert_eq!(classify_buggy(&Outcome::Exit { code: 0 }, &OracleTrace::default(), &[]).0, Verdict::Tn);
    }

    #[test]
    fn mutants_of_a_heap_program_all_fault() {
        let m = cup_core::ir::parse(LISTING_PATCHED).unwrap();
        let r = mutation_suite(&m, &Config::default()).unwrap();
        assert_eq!(r.mutants, 0, "memset checks each byte itself");
        let m = cup_core::ir::parse("func main() {\n  r = malloc 16\n  store 8 r, 1\n  x = load 8 r\n  s = realloc r, 32\n  free s\n  ret 0\n}\n").unwrap();
        let r = mutation_suite(&m, &Config::default()).unwrap();
        assert_eq!(r.mutants, 4);
        assert_eq!(r.faulted, 4, "{:?}", r.survivors);
    }
}
