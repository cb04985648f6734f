use alloc::vec::Vec;

use super::layout::*;
use super::*;
use crate::capability::{check_against, encode, EnrichedWord};
use crate::ir::parse;

fn exec(text: &str) -> ExecutionResult {
    let m = parse(text).unwrap_or_else(|e| panic!("{e}"));
    run(&m, &[], &Config { trace: true, ..Config::default() })
}

fn fault_index(r: &ExecutionResult) -> (u32, u64) {
    match &r.outcome {
        Outcome::HardwareFault { site, addr } => (site.instr_index, *addr),
        other => panic!("expected a fault, got {other}"),
    }
}

#[test]
fn well_formed_program_exits_zero() {
    let r = exec(
        "func main() {\n  a = stack_alloc 4 x 10\n  p = ptr_add a, 36\n  store 4 p, 7\n  x = load 4 p\n  c = eq x, 7\n  cbr c, ok, bad\nok:\n  ret 0\nbad:\n  ret 1\n}\n",
    );
    assert_eq!(r.outcome, Outcome::Exit { code: 0 });
}

#[test]
fn checked_out_of_bounds_offset_faults_at_the_load() {
    let r = exec(
        "func main() {\n  a = stack_alloc 4 x 10\n  p = @cup.alloc_meta(a, 40)\n  q = ptr_add p, 99\n  c = @cup.check(q, 1)\n  x = load 1 c\n  ret 0\n}\n",
    );
    let (index, addr) = fault_index(&r);
    assert_eq!(index, 4);
    assert_eq!(addr, (STACK_TOP - 48 + 99) | (1 << 63));
}

#[test]
fn unchecked_enriched_word_faults() {
    let r = exec("func main() {\n  a = stack_alloc 4 x 10\n  p = @cup.alloc_meta(a, 40)\n  x = load 4 p\n  ret 0\n}\n");
    assert_eq!(fault_index(&r), (2, encode(1, 0).unwrap().raw()));
}

#[test]
fn raw_non_canonical_and_unmapped_addresses_fault() {
    let r = exec("func main() {\n  p = int_to_ptr 0xffff000000001000\n  store 8 p, 1\n  ret 0\n}\n");
    assert_eq!(fault_index(&r), (1, 0xffff_0000_0000_1000));
    let r = exec("func main() {\n  p = int_to_ptr 0x1000\n  x = load 8 p\n  ret 0\n}\n");
    assert_eq!(fault_index(&r), (1, 0x1000));
}

#[test]
fn strlen_reads_to_the_terminator() {
    let r = exec(
        "func main() {\n  b = stack_alloc 1 x 4\n  p = @cup.alloc_meta(b, 4)\n  @memset(p, 97, 3)\n  e = ptr_add p, 3\n  c = @cup.check(e, 1)\n  store 1 c, 0\n  n = @strlen(p)\n  ret n\n}\n",
    );
    assert_eq!(r.outcome, Outcome::Exit { code: 3 });
}

#[test]
fn memset_past_the_end_faults_on_byte_ten() {
    let r = exec(
        "func main() {\n  b = stack_alloc 1 x 10\n  p = @cup.alloc_meta(b, 10)\n  @memset(p, 65, 11)\n  ret 0\n}\n",
    );
    let (index, addr) = fault_index(&r);
    assert_eq!(index, 2);
    let base = STACK_TOP - 16;
    assert_eq!(addr, (base + 10) | (1 << 63));
    let checks = r.trace.iter().filter(|e| matches!(e, TraceEvent::Check { .. })).count();
    assert_eq!(checks, 11);
}

#[test]
fn strlen_overread_of_unterminated_buffer_faults() {
    let r = exec(
        "func main() {\n  b = stack_alloc 1 x 4\n  p = @cup.alloc_meta(b, 4)\n  @memset(p, 120, 4)\n  n = @strlen(p)\n  ret n\n}\n",
    );
    assert_eq!(fault_index(&r).1, (STACK_TOP - 16 + 4) | (1 << 63));
}

#[test]
fn malloc_metadata_uses_requested_length() {
    let r = exec("func main() {\n  r = malloc 10\n  p = @cup.alloc_meta(r, 10)\n  ret 0\n}\n");
    let base = HEAP_BASE + HEAP_HEADER;
    assert!(r.trace.contains(&TraceEvent::AllocMeta {
        site: Site { function: "main".into(), line: 3, instr_index: 1 },
        id: 1,
        base,
        end: base + 10
    }));
    assert_eq!(r.heap_footprint, 32);
}

#[test]
fn dangling_stack_pointer_faults_before_reuse() {
    let text = "func f() -> ptr {\n  a = stack_alloc 4 x 4\n  p = @cup.alloc_meta(a, 16)\n  @cup.free_meta(p)\n  ret p\n}\nfunc main() {\n  p = call f()\n  c = @cup.check(p, 4)\n  x = load 4 c\n  ret 0\n}\n";
    let r = exec(text);
    assert_eq!(fault_index(&r).0, 2);
}

#[test]
fn nested_calls_restore_live_count() {
    let text = "func g() {\n  a = stack_alloc 8 x 2\n  p = @cup.alloc_meta(a, 16)\n  @cup.free_meta(p)\n  ret 0\n}\nfunc f() {\n  a = stack_alloc 8 x 2\n  p = @cup.alloc_meta(a, 16)\n  x = call g()\n  @cup.free_meta(p)\n  ret 0\n}\nfunc main() {\n  x = call f()\n  y = call f()\n  ret 0\n}\n";
    let r = exec(text);
    assert_eq!(r.outcome, Outcome::Exit { code: 0 });
    let nexts: Vec<_> = r
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Call { function, next_entry } | TraceEvent::Return { function, next_entry } => {
                Some((function.as_str(), *next_entry))
            }
            _ => None,
        })
        .collect();
    assert_eq!(nexts.first(), Some(&("main", 1)));
    assert_eq!(nexts.last(), Some(&("main", 1)));
    let ids: Vec<_> = r
        .trace
        .iter()
        .filter_map(|e| if let TraceEvent::AllocMeta { id, .. } = e { Some(*id) } else { None })
        .collect();
    assert_eq!(ids, [1, 2, 1, 2]);
}

#[test]
fn table_exhaustion_faults_at_the_entry_address() {
    let m = parse("func main() {\n  a = stack_alloc 4 x 2\n  p = @cup.alloc_meta(a, 8)\n  q = @cup.alloc_meta(a, 8)\n  ret 0\n}\n").unwrap();
    let r = run(&m, &[], &Config { table_capacity: 2, ..Config::default() });
    assert_eq!(fault_index(&r), (2, entry_addr(2)));
}

#[test]
fn intrinsic_checks_match_the_reference_check() {
    let text = "func main() {\n  r = malloc 24\n  p = @cup.alloc_meta(r, 24)\n  i = stack_alloc 8 x 1\n  store 8 i, 0\n  br loop\nloop:\n  k = load 8 i\n  q = ptr_add p, k\n  c = @cup.check(q, 8)\n  d = ult k, 24\n  cbr d, body, done\nbody:\n  store 8 c, k\n  k2 = add k, 4\n  store 8 i, k2\n  br loop\ndone:\n  ret 0\n}\n";
    let r = exec(text);
    assert!(r.outcome.is_fault());
    let mut n = 0;
    for e in &r.trace {
        if let TraceEvent::Check { word, size, entry, result, .. } = e {
            assert_eq!(*result, check_against(*entry, EnrichedWord(*word), *size));
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let m =
        parse("func main() {\n  a = @rand()\n  b = @rand()\n  @print_int(a)\n  x = and b, 1\n  ret x\n}\n").unwrap();
    let cfg = |seed| Config { seed, ..Config::default() };
    assert_eq!(run(&m, &[], &cfg(7)), run(&m, &[], &cfg(7)));
    assert_ne!(run(&m, &[], &cfg(7)).output, run(&m, &[], &cfg(8)).output);
}

#[test]
fn realloc_meta_keeps_the_id_when_moving() {
    let text = "func main() {\n  r = malloc 8\n  p = @cup.alloc_meta(r, 8)\n  s = malloc 8\n  t = @cup.alloc_meta(s, 8)\n  c = @cup.check(p, 1)\n  n = realloc c, 64\n  q = @cup.realloc_meta(p, n, 64)\n  d = @cup.check(q, 64)\n  e = eq p, q\n  ret e\n}\n";
    let r = exec(text);
    assert_eq!(r.outcome, Outcome::Exit { code: 1 });
    assert!(r.trace.iter().any(|e| matches!(e, TraceEvent::ReallocMeta { id: 1, moved: true, .. })));
}

#[test]
fn varargs_and_constructors() {
    let text = "global g = int64\nctors init\nfunc init() {\n  p = global_addr g\n  store 8 p, 5\n  ret 0\n}\nfunc sum(n: i64, ...) {\n  a = @va_arg(0)\n  b = @va_arg(1)\n  c = @va_count()\n  s = add a, b\n  t = add s, c\n  ret t\n}\nfunc main() {\n  p = global_addr g\n  x = load 8 p\n  r = call sum(0, x, 10)\n  ret r\n}\n";
    assert_eq!(exec(text).outcome, Outcome::Exit { code: 17 });
}

#[test]
fn print_writes_bytes_and_faults_on_enriched_pointer() {
    let r = exec("func main() {\n  b = stack_alloc 1 x 2\n  store 1 b, 104\n  c = ptr_add b, 1\n  store 1 c, 105\n  @print(b, 2)\n  ret 0\n}\n");
    assert_eq!(r.output, b"hi");
    let r = exec("func main() {\n  b = stack_alloc 1 x 2\n  p = @cup.alloc_meta(b, 2)\n  @print(p, 2)\n  ret 0\n}\n");
    assert_eq!(fault_index(&r).0, 2);
}
