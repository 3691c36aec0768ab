//! Library results against direct, loop-by-loop reference computations.

use textstyle_testkit::oracles;

#[test]
fn conv_matches_brute_force_bitwise() {
    oracles::conv2d(20, 60).unwrap();
}

#[test]
fn gram_matches_double_loop_and_is_psd() {
    oracles::gram(21, 50).unwrap();
}

#[test]
fn layer_and_weighted_style_loss_match_summation() {
    oracles::style_loss(22, 50).unwrap();
}

#[test]
fn content_and_tv_match_summation() {
    oracles::content_and_tv(23, 50).unwrap();
}

#[test]
fn batch_loss_matches_double_loop() {
    oracles::batch_loss(24, 50).unwrap();
}

#[test]
fn ranking_matches_selection_sort() {
    oracles::ranking(25, 50).unwrap();
}

#[test]
fn metrics_match_counting_definitions() {
    oracles::metrics(26, 50).unwrap();
}

#[test]
fn vocabulary_matches_counting() {
    oracles::vocabulary(27, 200).unwrap();
}

#[test]
fn extractor_blocks_match_references() {
    oracles::extractor(28, 5).unwrap();
}

#[test]
fn hand_computed_formulas() {
    for (name, outcome) in oracles::formulas() {
        outcome.unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
