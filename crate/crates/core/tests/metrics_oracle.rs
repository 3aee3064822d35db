#[path = "../../validation/src/lib.rs"]
mod common;

#[test]
fn matches_reference_conlleval_output() {
    common::conlleval_equivalence().unwrap();
}

#[test]
fn rose_properties_hold() {
    common::rose_properties(200, 61).unwrap();
}

#[test]
fn binary_condition_never_fires_at_or_below_half() {
    common::binary_dead_zone(10_000, 51).unwrap();
}
