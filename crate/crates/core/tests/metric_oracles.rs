mod common;

use common::oracles;
use eclab_core::mtmetrics;

#[test]
fn metrics_match_brute_force_oracles() {
    for seed in [0, 1] {
        for (name, err) in oracles::suite(seed) {
            assert!(err <= 1e-9, "{name}: worst relative error {err} (seed {seed})");
        }
    }
}

#[test]
fn oracles_agree_with_hand_examples() {
    let t = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
    assert!((oracles::jaro("MARTHA", "MARHTA") - 0.944_444_444_444_444_4).abs() < 1e-12);
    assert_eq!(oracles::levenshtein(b"kitten", b"sitting"), 3);
    assert!((oracles::rouge_l(&t("a cat sat"), &[t("a cat")]) - 0.8).abs() < 1e-12);
    let s = t("a yellow giraffe in a field");
    let refs = vec![s.clone()];
    assert!((oracles::bleu(&s, &refs) - 100.0).abs() < 1e-9);
    assert_eq!(oracles::spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    // identical labelings with two clusters: AMI 1
    assert!((oracles::ami(&[0, 0, 1, 1], &[5, 5, 7, 7]) - 1.0).abs() < 1e-12);
    assert!((mtmetrics::bleu(&s, &refs) - oracles::bleu(&s, &refs)).abs() < 1e-9);
}
