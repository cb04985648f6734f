//! Microbenchmark of the branchless bounds check against a branching one.

use std::hint::black_box;
use std::time::Instant;

use cup_core::capability::{check_bounds, check_bounds_branching};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Microbench {
    pub checks: u64,
    pub branchless_ns_per_check: f64,
    pub branching_ns_per_check: f64,
    /// Tuples on which the two checks disagreed.
    pub disagreements: u64,
}

/// A pool of (base, end, addr, size) tuples, roughly half out of bounds so
/// the branching variant cannot be predicted.
fn pool(seed: u64) -> Vec<[u64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4096)
        .map(|_| {
            let base = rng.gen_range(0x1000u64..1 << 40);
            let len = rng.gen_range(1u64..4096);
            let addr = base.wrapping_add(rng.gen_range(0..2 * len)).wrapping_sub(len / 2);
            [base, base + len, addr, [1, 2, 4, 8][rng.gen_range(0..4)]]
        })
        .collect()
}

fn time(checks: u64, tuples: &[[u64; 4]], f: fn(u64, u64, u64, u64) -> u64) -> (f64, u64) {
    let start = Instant::now();
    let mut acc = 0u64;
    for i in 0..checks {
        let [b, e, a, s] = black_box(tuples[(i as usize) & (tuples.len() - 1)]);
        acc = acc.wrapping_add(f(b, e, a, s));
    }
    let ns = start.elapsed().as_nanos() as f64 / checks.max(1) as f64;
    (ns, black_box(acc))
}

pub fn run(checks: u64) -> Microbench {
    let tuples = pool(0);
    let disagreements = tuples
        .iter()
        .filter(|[b, e, a, s]| check_bounds(*b, *e, *a, *s) != check_bounds_branching(*b, *e, *a, *s))
        .count();
    let (branchless, x) = time(checks, &tuples, check_bounds);
    let (branching, y) = time(checks, &tuples, check_bounds_branching);
    Microbench {
        checks,
        branchless_ns_per_check: branchless,
        branching_ns_per_check: branching,
        disagreements: disagreements as u64 + u64::from(x != y),
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn variants_agree_on_the_pool() {
        let r = super::run(10_000);
        assert_eq!(r.disagreements, 0);
        assert!(r.branchless_ns_per_check > 0.0);
    }
}
