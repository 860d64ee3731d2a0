use ctxlens::probe::{PrefixGrid, ProbeResult};
use ctxlens::reporting::{aggregate_share, Histogram};
use proptest::prelude::*;

fn result(ell: usize) -> ProbeResult {
    ProbeResult {
        resolved_length: Some(ell),
        trace: vec![],
        grid: PrefixGrid::short_docs(),
        threshold: 0.2,
        sequence_length: 1000,
    }
}

proptest! {
    #[test]
    fn share_monotone_in_cutoff(lengths in prop::collection::vec(1usize..1000, 1..60), c1 in 0usize..1000, c2 in 0usize..1000) {
        let rs: Vec<ProbeResult> = lengths.iter().map(|&l| result(l)).collect();
        let (lo, hi) = (c1.min(c2), c1.max(c2));
        prop_assert!(aggregate_share(&rs, lo).unwrap() <= aggregate_share(&rs, hi).unwrap());
    }

    #[test]
    fn histogram_totals_and_round_trip(values in prop::collection::vec(0usize..500, 0..80)) {
        let h = Histogram::from_values(&values);
        prop_assert_eq!(h.total as usize, values.len());
        prop_assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        let back: Histogram = serde_json::from_str(&serde_json::to_string(&h).unwrap()).unwrap();
        prop_assert_eq!(back, h);
    }
}
