mod common;

use common::{aggregation_mismatch, random_dataset, reference_aggregate, W};
use flowpoison::featurize::{aggregate_windows, Aggregator};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_reference_bit_for_bit(seed in any::<u64>(), max_len in 0usize..120) {
        let ds = random_dataset(seed, max_len);
        prop_assert_eq!(aggregation_mismatch(&ds), None);
    }

    #[test]
    fn group_recompute_reproduces_every_point(seed in any::<u64>()) {
        let ds = random_dataset(seed, 60);
        let agg = Aggregator::new(ds.internal_subnets.clone(), W);
        for p in aggregate_windows(&ds, W).unwrap() {
            let group: Vec<_> = p.group.iter().map(|&i| ds.records[i].clone()).collect();
            let again = agg.recompute_point(&group, p.key);
            prop_assert_eq!(&again.values, &p.values);
            prop_assert_eq!(again.label, p.label);
        }
    }

    #[test]
    fn provenance_partitions_keyed_records(seed in any::<u64>()) {
        let ds = random_dataset(seed, 80);
        let pts = aggregate_windows(&ds, W).unwrap();
        let mut seen: Vec<usize> = pts.iter().flat_map(|p| p.provenance.iter().copied()).collect();
        seen.sort_unstable();
        let keyed: Vec<usize> = (0..ds.len()).filter(|&i| ds.key_endpoint(&ds.records[i]).is_some()).collect();
        prop_assert_eq!(seen, keyed);
    }
}

#[test]
fn thousand_datasets_match() {
    common::check_aggregation(1000).assert();
}

#[test]
fn boundary_timestamps_split_windows() {
    let mut ds = random_dataset(3, 0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    let mut a = common::random_record(&mut rng, 0..1);
    a.orig_ip = "10.0.0.1".parse().unwrap();
    a.resp_p = 80;
    a.proto = flowpoison::flowlog::Proto::Tcp;
    let mut b = a.clone();
    a.ts = 29.999999;
    b.ts = 30.0;
    ds.records = vec![a, b];
    let pts = reference_aggregate(&ds.records, W);
    assert_eq!(pts.len(), 2);
    assert_eq!(aggregation_mismatch(&ds), None);
}
