use std::collections::BTreeSet;

use cup_core::capability::{
    check_bounds, check_bounds_branching, encode, ptr_add, CapError, EnrichedWord, MetadataTable, ID_LIMIT,
};
use cup_core::ir::{parse, print, validate, BinOp, InstrKind, ViolationKind};
use proptest::prelude::*;

/// Reference free list: a LIFO stack of released IDs above a fresh counter.
#[derive(Default)]
struct FreeListModel {
    released: Vec<u32>,
    fresh: u32,
    live: BTreeSet<u32>,
}

impl FreeListModel {
    fn new() -> Self {
        FreeListModel { fresh: 1, ..Default::default() }
    }

    fn alloc(&mut self) -> u32 {
        let id = self.released.pop().unwrap_or_else(|| {
            self.fresh += 1;
            self.fresh - 1
        });
        self.live.insert(id);
        id
    }

    fn free(&mut self, id: u32) {
        assert!(self.live.remove(&id));
        self.released.push(id);
    }

    fn next(&self) -> u32 {
        self.released.last().copied().unwrap_or(self.fresh)
    }
}

#[derive(Debug, Clone)]
enum TableOp {
    Alloc(u64, u64),
    /// Frees the n-th live ID (modulo the live count).
    Free(usize),
}

fn table_op() -> impl Strategy<Value = TableOp> {
    prop_oneof![
        (0u64..1 << 40, 1u64..4096).prop_map(|(b, n)| TableOp::Alloc(b, n)),
        any::<usize>().prop_map(TableOp::Free),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn decode_inverts_encode(id in 0u64..ID_LIMIT, offset: u32) {
        let d = encode(id, offset).unwrap().decode();
        prop_assert!(d.enriched);
        prop_assert_eq!((d.id as u64, d.offset), (id, offset));
    }

    #[test]
    fn raw_words_decode_to_id_zero(w in 0u64..(1 << 63)) {
        let d = EnrichedWord(w).decode();
        prop_assert!(!d.enriched);
        prop_assert_eq!(d.id, 0);
        prop_assert_eq!(EnrichedWord(w).address_offset(), w);
    }

    #[test]
    fn ids_beyond_31_bits_are_rejected(id in ID_LIMIT.., offset: u32) {
        prop_assert_eq!(encode(id, offset), Err(CapError::IdOutOfRange(id)));
    }

    #[test]
    fn ptr_add_never_touches_the_id(id in 1u64..ID_LIMIT, offset: u32, delta: u64) {
        let w = encode(id, offset).unwrap().raw();
        let r = EnrichedWord(ptr_add(w, delta)).decode();
        prop_assert_eq!(r.id as u64, id);
        prop_assert_eq!(r.offset, offset.wrapping_add(delta as u32));
    }

    #[test]
    fn branchless_check_matches_branching(base: u64, len in 0u64..1 << 20, addr_delta in -64i64..(1 << 20) + 64, size in prop::sample::select(vec![1u64, 2, 4, 8])) {
        let base = base & ((1 << 48) - 1);
        let end = base + len;
        let addr = base.wrapping_add(addr_delta as u64);
        prop_assert_eq!(check_bounds(base, end, addr, size), check_bounds_branching(base, end, addr, size));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn free_list_matches_lifo_model(ops in prop::collection::vec(table_op(), 1..200)) {
        let mut table = MetadataTable::with_capacity(1 << 16);
        let mut model = FreeListModel::new();
        for op in ops {
            match op {
                TableOp::Alloc(base, n) => {
                    let (id, word) = table.alloc(base, base + n).unwrap();
                    prop_assert_eq!(id, model.alloc());
                    prop_assert_eq!(word.decode().id, id);
                    prop_assert_eq!(table.entry(id).end, base + n);
                }
                TableOp::Free(k) if !model.live.is_empty() => {
                    let id = *model.live.iter().nth(k % model.live.len()).unwrap();
                    table.free(id).unwrap();
                    model.free(id);
                    prop_assert_eq!(table.entry(id).end, 0);
                    prop_assert_eq!(table.free(id), Err(CapError::InvalidFree(id)));
                }
                TableOp::Free(_) => {}
            }
            prop_assert_eq!(table.next_entry_value(), model.next());
            prop_assert_eq!(table.live_ids(), model.live.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn freed_entries_fail_every_check(offset: u32, size in 1u64..16) {
        let mut table = MetadataTable::with_capacity(64);
        let (id, word) = table.alloc(0x1000, 0x2000).unwrap();
        table.free(id).unwrap();
        let w = EnrichedWord(ptr_add(word.raw(), offset as u64));
        prop_assert_ne!(table.check(w, size) >> 63, 0);
    }
}

#[derive(Debug, Clone)]
enum Step {
    Arith(BinOp, u64),
    Slot(u64),
    Array(u64, u64),
    Branch,
}

fn step() -> impl Strategy<Value = Step> {
    let ops = prop::sample::select(BinOp::ALL.to_vec());
    prop_oneof![
        (ops, any::<u64>()).prop_map(|(op, v)| Step::Arith(op, v)),
        any::<u64>().prop_map(Step::Slot),
        (prop::sample::select(vec![1u64, 2, 4, 8]), 2u64..64).prop_map(|(e, n)| Step::Array(e, n)),
        Just(Step::Branch),
    ]
}

/// Builds a valid module from `steps`: stack allocations in the entry block,
/// then a chain of blocks with arithmetic, slot traffic and array stores.
fn module_text(steps: &[Step]) -> String {
    let mut entry = String::new();
    let mut body = String::from("  v0 = add 1, 2\n");
    let mut blocks = 0;
    for (i, s) in steps.iter().enumerate() {
        match s {
            Step::Arith(op, v) => body += &format!("  v{} = {} v{}, {}\n", i + 1, op.mnemonic(), i, v),
            Step::Slot(v) => {
                entry += &format!("  s{i} = stack_alloc 8 x 1\n");
                body += &format!("  store 8 s{i}, {v}\n  store 8 s{i}, v{i}\n  v{} = load 8 s{i}\n", i + 1);
            }
            Step::Array(e, n) => {
                entry += &format!("  a{i} = stack_alloc {e} x {n}\n");
                body += &format!(
                    "  p{i} = ptr_add a{i}, {}\n  store {e} p{i}, v{i}\n  v{} = load {e} p{i}\n",
                    (n - 1) * e,
                    i + 1
                );
            }
            Step::Branch => {
                blocks += 1;
                body += &format!("  br b{blocks}\nb{blocks}:\n  v{} = copy v{i}\n", i + 1);
            }
        }
    }
    format!("; generated\nfunc main() {{\n{entry}  br start\nstart:\n{body}  ret v{}\n}}\n", steps.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn print_then_parse_round_trips(steps in prop::collection::vec(step(), 0..40)) {
        let m = parse(&module_text(&steps)).unwrap();
        let text = print(&m);
        let again = parse(&text).unwrap();
        prop_assert_eq!(&again, &m);
        prop_assert_eq!(print(&again), text);
    }

    #[test]
    fn dropping_a_definition_is_caught(steps in prop::collection::vec(step(), 1..40), pick: usize) {
        let mut m = parse(&module_text(&steps)).unwrap();
        let f = &mut m.functions[0];
        let defs: Vec<_> = f
            .instrs()
            .filter(|(_, i)| matches!(i.kind, InstrKind::BinOp { .. } | InstrKind::Copy { .. } | InstrKind::Load { .. }))
            .map(|(r, _)| r)
            .collect();
        let at = defs[pick % defs.len()];
        f.blocks[at.block].instrs.remove(at.index);
        let kinds: Vec<_> = validate(&m).into_iter().map(|v| v.kind).collect();
        prop_assert!(kinds.iter().any(|k| matches!(k, ViolationKind::UndefinedRegister(_))), "{:?}", kinds);
    }
}

#[test]
fn minimal_module_golden() {
    let text = "func main() {\n  ret 0\n}\n";
    assert_eq!(print(&parse(text).unwrap()), text);
}
