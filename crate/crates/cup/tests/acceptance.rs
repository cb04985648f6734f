//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line per
//! criterion with its elapsed time, and exits nonzero if any failed.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cup::corpus::{load_dir, CorpusCase, Designation, InjectedViolation};
use cup::generate::{generate_program, GenParams};
use cup::harness::{modes_agree, mutation_suite, parse_variant, run_case, run_corpus, HarnessConfig, Verdict};
use cup_core::analysis::{analyze, AllocSite, Classification};
use cup_core::capability::{check_bounds, encode, EnrichedWord, MetadataTable, ID_LIMIT};
use cup_core::instrument::{instrument, LoweringMode};
use cup_core::ir::parse;
use cup_core::vm::{self, Config, TraceEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

/// Name, check and time limit.
type Criterion = (&'static str, fn() -> Outcome, Duration);

const MODES: [LoweringMode; 2] = [LoweringMode::Intrinsic, LoweringMode::Expanded];

fn corpus() -> Vec<CorpusCase> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus");
    load_dir(&root).expect("bundled corpus loads")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn naive_in_bounds(base: u64, end: u64, addr: u64, size: u64) -> bool {
    base <= addr && addr + size <= end
}

fn codec_and_free_list() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let id = rng.gen_range(0..ID_LIMIT);
        let offset: u32 = rng.gen();
        let d = encode(id, offset).map_err(|e| e.to_string())?.decode();
        ensure(d.enriched && d.id as u64 == id && d.offset == offset, || {
            format!("round trip of ({id}, {offset}) gave {d:?}")
        })?;
    }
    let mut t = MetadataTable::with_capacity(16);
    let ids: Vec<_> = (0..3)
        .map(|i| t.alloc(0x1000 * (i + 1), 0x1000 * (i + 1) + 16).map(|(id, _)| id))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(ids == [1, 2, 3], || format!("initial IDs {ids:?}"))?;
    t.free(2).map_err(|e| e.to_string())?;
    t.free(1).map_err(|e| e.to_string())?;
    let a = t.alloc(0x9000, 0x9010).map_err(|e| e.to_string())?.0;
    let b = t.alloc(0xa000, 0xa010).map_err(|e| e.to_string())?.0;
    ensure((a, b) == (1, 2), || format!("reallocation order {a}, {b}"))?;
    ensure(t.next_entry_value() == 4, || format!("next_entry {}", t.next_entry_value()))?;
    Ok("100000 round trips; free list yields 1, 2 then next_entry 4".into())
}

fn branchless_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1_000_000 {
        let base = rng.gen_range(0..1u64 << 48);
        let end = base + rng.gen_range(1..1u64 << 32);
        let addr = rng.gen_range(base.saturating_sub(1 << 33)..end + (1 << 33));
        let size = [1, 2, 4, 8][rng.gen_range(0..4)];
        let fast = check_bounds(base, end, addr, size) == 0;
        ensure(fast == naive_in_bounds(base, end, addr, size), || {
            format!("disagree on ({base:#x}, {end:#x}, {addr:#x}, {size})")
        })?;
    }
    let mut exhaustive = 0u64;
    for base in 0..64u64 {
        for end in base + 1..=64 {
            for addr in 0..64u64 {
                for size in [1, 2, 4, 8] {
                    let (b, e, a) = (0x4000 + base, 0x4000 + end, 0x4000 + addr);
                    let fast = check_bounds(b, e, a, size) == 0;
                    ensure(fast == naive_in_bounds(b, e, a, size), || {
                        format!("disagree on window ({base}, {end}, {addr}, {size})")
                    })?;
                    exhaustive += 1;
                }
            }
        }
    }
    Ok(format!("1000000 random and {exhaustive} exhaustive tuples, 0 disagreements"))
}

fn corpus_gate() -> Outcome {
    let cases = corpus();
    ensure(cases.len() >= 40, || format!("only {} corpus pairs", cases.len()))?;
    let mut misses = 0;
    for mode in MODES {
        let results = run_corpus(&cases, &HarnessConfig { mode, ..HarnessConfig::default() });
        for r in &results {
            ensure(r.errors.is_empty(), || format!("{} ({}): {:?}", r.name, mode.as_str(), r.errors))?;
            ensure(r.matches_designation(), || {
                format!("{} ({}): buggy verdict does not match its designation", r.name, mode.as_str())
            })?;
            let patched = r.patched.as_ref().ok_or_else(|| format!("{}: no patched result", r.name))?;
            ensure(patched.verdict == Verdict::Tn, || {
                format!("{} ({}): patched {:?}", r.name, mode.as_str(), patched.verdict)
            })?;
            let buggy = r.buggy.as_ref().ok_or_else(|| format!("{}: no buggy result", r.name))?;
            if buggy.verdict == Verdict::ExpectedMiss {
                ensure(r.designation == Designation::ExpectedMiss && !buggy.evidence.is_empty(), || {
                    format!("{}: undesignated or unevidenced miss", r.name)
                })?;
                misses += 1;
            }
        }
    }
    Ok(format!("{} pairs x 2 modes: 0 FP, 0 FN, {misses} evidenced expected misses", cases.len()))
}

/// Parameter profiles cycled over the seed set so the fuzz run covers
/// small, default and crowded programs.
fn profile(seed: u64) -> GenParams {
    match seed % 4 {
        0 => GenParams::default(),
        1 => GenParams { n_objects: 1, max_len: 2, n_accesses: 2, bug_rate: 1.0 },
        2 => GenParams { n_objects: 16, max_len: 64, n_accesses: 48, bug_rate: 1.0 },
        _ => GenParams { n_objects: 8, max_len: 256, n_accesses: 24, bug_rate: 0.8 },
    }
}

fn fuzz_gate() -> Outcome {
    let cases: Vec<_> = (0..1000).map(|s| generate_program(s, &profile(s))).collect();
    let results = run_corpus(&cases, &HarnessConfig::default());
    let (mut tp, mut miss) = (0, 0);
    for r in &results {
        ensure(r.errors.is_empty(), || format!("{}: {:?}", r.name, r.errors))?;
        let verdicts: Vec<_> = r.verdicts().collect();
        ensure(!verdicts.contains(&Verdict::Fp), || format!("{}: false positive", r.name))?;
        ensure(!verdicts.contains(&Verdict::Fn), || format!("{}: false negative", r.name))?;
        ensure(r.patched.as_ref().is_some_and(|p| p.verdict == Verdict::Tn), || format!("{}: patched not TN", r.name))?;
        match r.buggy.as_ref().map(|b| b.verdict) {
            Some(Verdict::Tp) => tp += 1,
            Some(Verdict::ExpectedMiss) => miss += 1,
            _ => {}
        }
    }
    Ok(format!("1000 cases: {tp} TP, {miss} expected misses, 0 FP, 0 FN"))
}

fn mutation_gate() -> Outcome {
    let cases = corpus();
    let config = Config::default();
    let mut programs = 0;
    let (mut mutants, mut faulted) = (0, 0);
    for c in &cases {
        if programs == 20 {
            break;
        }
        let m = parse_variant(c, false)?;
        let report = mutation_suite(&m, &config)?;
        if report.mutants == 0 {
            continue;
        }
        ensure(report.survivors.is_empty(), || format!("{}: {:?}", c.name, report.survivors))?;
        programs += 1;
        mutants += report.mutants;
        faulted += report.faulted;
    }
    ensure(programs == 20, || format!("only {programs} corpus programs have checks to mutate"))?;
    Ok(format!("20 programs, {faulted}/{mutants} mutants fault at the guarded access"))
}

fn mode_equivalence() -> Outcome {
    let config = Config::default();
    let mut modules = Vec::new();
    for c in corpus() {
        modules.push((format!("{}/buggy", c.name), parse_variant(&c, true)?));
        modules.push((format!("{}/patched", c.name), parse_variant(&c, false)?));
    }
    for s in 0..200u64 {
        let c = generate_program(10_000 + s, &profile(s));
        modules.push((format!("{}/buggy", c.name), parse_variant(&c, true)?));
        modules.push((format!("{}/patched", c.name), parse_variant(&c, false)?));
    }
    let n = modules.len();
    modules.par_iter().try_for_each(|(name, m)| modes_agree(m, &config).map_err(|e| format!("{name}: {e}")))?;
    Ok(format!("{n} modules agree on outcome, fault site and output"))
}

const LOCAL_ONLY: &str = "\
func work(n: i64) -> i64 {
  a = stack_alloc 8 x 16
  b = stack_alloc 4 x 32
  i = urem n, 16
  p = ptr_add a, 8
  store 8 p, n
  q = ptr_add b, 124
  store 4 q, 3
  x = load 8 p
  y = load 4 q
  z = add x, y
  ret z
}
func main() {
  h = malloc 16
  r = call work(5)
  s = call work(6)
  store 8 h, r
  free h
  ret 0
}
";

fn id_pressure() -> Outcome {
    let m = parse(LOCAL_ONLY).map_err(|e| e.to_string())?;
    let plan = analyze(&m);
    let locals = plan
        .allocations
        .iter()
        .filter(|a| matches!(&a.site, AllocSite::Instr { function, .. } if function == "work"))
        .collect::<Vec<_>>();
    ensure(locals.len() == 2 && locals.iter().all(|a| a.classification == Classification::LocalChecked), || {
        format!("work's arrays: {locals:?}")
    })?;
    let mut calls = 0;
    for mode in MODES {
        let im = instrument(&m, mode).map_err(|e| e.to_string())?;
        let r = vm::run(&im.module, &[], &Config { trace: true, ..Config::default() });
        ensure(r.outcome == vm::Outcome::Exit { code: 0 }, || format!("{}: {}", mode.as_str(), r.outcome))?;
        let mut open = Vec::new();
        for e in &r.trace {
            match e {
                TraceEvent::Call { function, next_entry } if function == "work" => open.push(*next_entry),
                TraceEvent::Return { function, next_entry } if function == "work" => {
                    let before = open.pop().ok_or("return without call")?;
                    ensure(before == *next_entry, || format!("next_entry {before} -> {next_entry}"))?;
                    calls += 1;
                }
                TraceEvent::AllocMeta { site, .. } if site.function == "work" => {
                    return Err(format!("metadata allocated at {site}"))
                }
                _ => {}
            }
        }
    }
    ensure(calls == 4, || format!("{calls} traced calls"))?;
    Ok("next_entry unchanged across 4 traced calls of a local-only function".into())
}

fn uaf_determinism() -> Outcome {
    let traced = Config { trace: true, ..Config::default() };
    let mut n = 0;
    for c in corpus() {
        if c.expected.violation_kind != InjectedViolation::Uaf || c.expected.expect != Designation::Detect {
            continue;
        }
        let m = parse_variant(&c, true)?;
        for mode in MODES {
            let im = instrument(&m, mode).map_err(|e| e.to_string())?;
            let first = vm::run(&im.module, &[], &traced);
            let second = vm::run(&im.module, &[], &traced);
            ensure(first == second, || format!("{} ({}): runs differ", c.name, mode.as_str()))?;
            let site = first
                .outcome
                .fault_site()
                .ok_or_else(|| format!("{} ({}): {}", c.name, mode.as_str(), first.outcome))?;
            if mode == LoweringMode::Intrinsic {
                let freed = first.trace.iter().rev().find_map(|e| match e {
                    TraceEvent::Check { site: s, word, entry, result, .. }
                        if s == site && EnrichedWord(*word).is_enriched() =>
                    {
                        Some((*entry, *result))
                    }
                    _ => None,
                });
                let (entry, result) = freed.ok_or_else(|| format!("{}: no check at {site}", c.name))?;
                ensure(entry.end == 0 && EnrichedWord(result).is_enriched(), || {
                    format!("{}: failing check saw {entry:?}", c.name)
                })?;
            }
        }
        let r = run_case(&c, &HarnessConfig::default());
        ensure(r.buggy.is_some_and(|b| b.verdict == Verdict::Tp), || format!("{}: not a true positive", c.name))?;
        n += 1;
    }
    ensure(n > 0, || "no UAF-before-reuse cases".into())?;
    Ok(format!("{n} cases fault identically on rerun against a freed entry (end == 0)"))
}

fn microbenchmark() -> Outcome {
    let b = cup::bench::run(10_000_000);
    ensure(b.disagreements == 0, || format!("{} disagreements", b.disagreements))?;
    Ok(format!(
        "10^7 checks: branchless {:.2} ns/check, branching {:.2} ns/check (informational)",
        b.branchless_ns_per_check, b.branching_ns_per_check
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("codec and free list", codec_and_free_list, Duration::from_secs(5)),
        ("branchless check equivalence", branchless_equivalence, Duration::from_secs(30)),
        ("corpus gate", corpus_gate, Duration::from_secs(120)),
        ("differential fuzz gate", fuzz_gate, Duration::from_secs(600)),
        ("fail-closed mutation", mutation_gate, Duration::from_secs(300)),
        ("mode equivalence", mode_equivalence, Duration::from_secs(600)),
        ("ID pressure of local arrays", id_pressure, Duration::from_secs(60)),
        ("UAF-before-reuse determinism", uaf_determinism, Duration::from_secs(120)),
        ("check microbenchmark", microbenchmark, Duration::from_secs(120)),
    ];
    let mut failed = BTreeSet::new();
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= *limit => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took longer than {limit:?}")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed.insert(i + 1);
        }
        println!("criterion {} {status} [{name}] {:.2}s: {detail}", i + 1, elapsed.as_secs_f64());
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
