mod common;

#[test]
fn depthless_network_matches_slicewise_reference() {
    let worst = common::max_2d_discrepancy(11, 4, [64, 32]);
    assert!(worst < 1e-10, "max abs difference {worst:e}");
}
