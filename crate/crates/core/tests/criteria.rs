//! The cheaper verification criteria, run at a few seeds.

use samoe_core::verify::{self, Status};

fn check(id: u32, seeds: &[u64]) {
    for &seed in seeds {
        let c = verify::run(id, seed).unwrap();
        assert_eq!(c.status, Status::Pass, "{}", c.line());
    }
}

#[test]
fn merging_is_exact() {
    check(1, &[7, 8]);
}

#[test]
fn dispersion_identity_holds() {
    check(2, &[7]);
}

#[test]
fn point_mass_is_recovered_by_euler() {
    check(4, &[7, 8]);
}

#[test]
fn planner_gradients_match_finite_differences() {
    check(5, &[7]);
}

#[test]
fn mask_truth_table_and_block_invariants() {
    check(6, &[7, 8]);
}

#[test]
fn zero_offset_deformable_conv_is_plain_conv() {
    check(7, &[7, 8]);
}

#[test]
fn expert_flops_ordering() {
    check(8, &[0]);
}

#[test]
fn one_hot_planner_reproduces_the_dense_planner() {
    check(11, &[7]);
}

#[test]
fn challenge_tag_thresholds() {
    check(13, &[0]);
}
