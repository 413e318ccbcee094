use proptest::prelude::*;

use tokfuse::pairing::{brute_force_pairing, pair_tokens, token_cost};
use tokfuse::vocab::TokenSequence;

fn texts() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[abc]{1,4}", 1..=6)
}

fn seq(t: &[String]) -> TokenSequence {
    TokenSequence::from_texts(t)
}

fn collapse_runs(t: &[String]) -> Vec<&String> {
    let mut out: Vec<&String> = t.iter().collect();
    out.dedup();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn dp_matches_brute_force(s in texts(), t in texts()) {
        let dp = pair_tokens(&seq(&s), &seq(&t)).unwrap();
        let bf = brute_force_pairing(&seq(&s), &seq(&t)).unwrap();
        prop_assert_eq!(dp.total_cost.to_bits(), bf.total_cost.to_bits());
        prop_assert_eq!(dp.groups, bf.groups);
    }

    #[test]
    fn groups_partition_both_sides(s in texts(), t in texts()) {
        let r = pair_tokens(&seq(&s), &seq(&t)).unwrap();
        prop_assert!(r.covers(s.len(), t.len()));
        let src: Vec<usize> = r.groups.iter().flat_map(|g| g.src.clone()).collect();
        let tgt: Vec<usize> = r.groups.iter().flat_map(|g| g.tgt.clone()).collect();
        prop_assert_eq!(src, (0..s.len()).collect::<Vec<_>>());
        prop_assert_eq!(tgt, (0..t.len()).collect::<Vec<_>>());
        for g in &r.groups {
            prop_assert_eq!(g.one_to_one, g.src.len() == 1 && g.tgt.len() == 1);
        }
    }

    #[test]
    fn identical_lists_cost_nothing(s in texts()) {
        let r = pair_tokens(&seq(&s), &seq(&s)).unwrap();
        prop_assert_eq!(r.total_cost, 0.0);
        prop_assert_eq!(r.one_to_one_count(), s.len());
    }

    // A zero-cost path may repeat a cell's row or column, so repeated
    // neighbours collapse: ["a", "a"] against ["a"] also costs nothing.
    #[test]
    fn zero_cost_iff_runs_agree(s in texts(), t in texts()) {
        let r = pair_tokens(&seq(&s), &seq(&t)).unwrap();
        prop_assert_eq!(r.total_cost == 0.0, collapse_runs(&s) == collapse_runs(&t));
    }

    #[test]
    fn deterministic(s in texts(), t in texts()) {
        prop_assert_eq!(pair_tokens(&seq(&s), &seq(&t)).unwrap(), pair_tokens(&seq(&s), &seq(&t)).unwrap());
    }

    #[test]
    fn token_cost_is_a_bounded_symmetric_score(a in "[a-d]{0,5}", b in "[a-d]{0,5}") {
        let c = token_cost(&a, &b);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c, token_cost(&b, &a));
        prop_assert_eq!(c == 0.0, a == b);
    }
}

#[test]
fn repeated_tokens_collapse_at_zero_cost() {
    let r = pair_tokens(&seq(&["a".into(), "a".into()]), &seq(&["a".into()])).unwrap();
    assert_eq!(r.total_cost, 0.0);
    assert_eq!(r.groups.len(), 1);
    assert!(!r.groups[0].one_to_one);
}
