mod common;

#[test]
fn samples_stay_in_conditional_support() {
    common::check_bn_support(10_000).assert();
}

#[test]
fn top_nmi_pairs_survive_generated_poisoning() {
    common::check_nmi_preserved().assert();
}
