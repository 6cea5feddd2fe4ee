mod support;

use support::ORACLE_CHECKS;

fn run(name: &str) {
    let (_, check) = ORACLE_CHECKS.iter().find(|(n, _)| *n == name).unwrap();
    for seed in 0..100 {
        if let Err(e) = check(seed) {
            panic!("{e}");
        }
    }
}

#[test]
fn voxelize_matches_oracle() {
    run("voxelize");
}

#[test]
fn partition_matches_oracle() {
    run("partition_fg_bg");
}

#[test]
fn densify_matches_oracle() {
    run("densify");
}

#[test]
fn sparsify_matches_oracle() {
    run("sparsify");
}

#[test]
fn merge_matches_oracle() {
    run("merge");
}

#[test]
fn label_matches_oracle() {
    run("label_foreground");
}

#[test]
fn topk_matches_oracle() {
    run("topk_filter");
}
