mod common;

use common::*;

#[test]
fn beam_equals_exhaustive_enumeration() {
    for seed in 0..3 {
        let gap = beam_vs_exhaustive(seed).unwrap();
        println!("seed {seed}: largest score gap {gap:.3e}");
        assert!(gap < 1e-9, "seed {seed}: {gap}");
    }
}

#[test]
fn cached_decoding_matches_recomputation() {
    let (t, d) = cache_equivalence(100, 3);
    println!("temporal {t:.3e}, depth {d:.3e}");
    assert!(t < 1e-5 && d < 1e-5, "temporal {t}, depth {d}");
}

#[test]
fn metrics_match_brute_force() {
    assert_eq!(metric_oracle(1000, 4), 0);
}

#[test]
fn planted_chain_is_recovered() {
    let (tv, rows) = planted_transition_tv(10_000);
    println!("total variation {tv:.4} over {rows} rows");
    assert!(rows >= 1, "no row with 10k transitions");
    assert!(tv < 0.02, "{tv}");
}
