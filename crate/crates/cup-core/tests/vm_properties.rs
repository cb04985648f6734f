use cup_core::ir::parse;
use cup_core::vm::layout::HEAP_BASE;
use cup_core::vm::{run, Config, Outcome, TraceEvent};
use proptest::prelude::*;

fn traced() -> Config {
    Config { trace: true, ..Config::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn non_canonical_stores_fault_without_writing(high in 1u64..0x1_0000, size in prop::sample::select(vec![1u64, 2, 4, 8])) {
        let target = 0x1000_0000_0010u64 | (high << 48);
        let text = format!(
            "func main() {{\n  r = malloc 32\n  p = ptr_to_int r\n  q = add p, {t}\n  s = int_to_ptr q\n  store 8 r, 7\n  store {size} s, 99\n  x = load 8 r\n  ret x\n}}\n",
            t = target - HEAP_BASE - 16,
        );
        let r = run(&parse(&text).unwrap(), &[], &Config::default());
        match r.outcome {
            Outcome::HardwareFault { site, addr } => {
                prop_assert_eq!(site.instr_index, 5);
                prop_assert_eq!(addr, target);
            }
            other => prop_assert!(false, "{}", other),
        }
    }

    #[test]
    fn metadata_length_is_the_requested_length(n in 0u64..4096) {
        let text = format!("func main() {{\n  r = malloc {n}\n  p = @cup.alloc_meta(r, {n})\n  ret 0\n}}\n");
        let r = run(&parse(&text).unwrap(), &[], &traced());
        let (base, end) = r
            .trace
            .iter()
            .find_map(|e| match e {
                TraceEvent::AllocMeta { base, end, .. } => Some((*base, *end)),
                _ => None,
            })
            .unwrap();
        prop_assert_eq!(end - base, n.max(1));
    }

    #[test]
    fn identical_inputs_give_identical_results(seed: u64, arg in 0u64..64) {
        let text = "func main(n: i64) {\n  r = malloc 16\n  k = @rand()\n  i = and k, 31\n  j = add i, n\n  p = ptr_add r, j\n  store 1 p, 1\n  ret 0\n}\n";
        let m = parse(text).unwrap();
        let cfg = Config { seed, trace: true, ..Config::default() };
        prop_assert_eq!(run(&m, &[arg], &cfg), run(&m, &[arg], &cfg));
    }
}
