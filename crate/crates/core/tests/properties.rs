//! Property tests: serialization round-trips, scoring against a
//! brute-force oracle, sampler invariants, and optimizer identities.

use std::collections::BTreeSet;

use proptest::prelude::*;

use rner_core::grpo::{advantages, kl_term, surrogate_term};
use rner_core::sampling::{capped_stratified_sample, DatasetSpec};
use rner_core::scoring::{composite_reward, reward_f1, span_prf, PrfCounts, RewardWeights};
use rner_core::types::{parse_model_output, serialize_target, EntityMention, EntitySchema};

fn mention_strategy() -> impl Strategy<Value = EntityMention> {
    ("[a-zA-Z0-9 ]{0,12}", "[A-Z]{1,6}").prop_map(|(text, label)| EntityMention::new(text, label))
}

fn mentions_strategy() -> impl Strategy<Value = Vec<EntityMention>> {
    prop::collection::vec(mention_strategy(), 0..8)
}

/// Set-semantics oracle for span matching, written independently of the
/// production counter.
fn oracle_prf(pred: &[EntityMention], gold: &[EntityMention]) -> PrfCounts {
    let pred: BTreeSet<&EntityMention> = pred.iter().collect();
    let gold: BTreeSet<&EntityMention> = gold.iter().collect();
    PrfCounts {
        tp: pred.intersection(&gold).count(),
        fp: pred.difference(&gold).count(),
        fn_: gold.difference(&pred).count(),
    }
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(
        cot in "[a-zA-Z0-9 .,;:!?-]{0,60}",
        entities in mentions_strategy(),
    ) {
        let raw = serialize_target(&cot, &entities).unwrap();
        let output = parse_model_output(&raw).unwrap();
        prop_assert_eq!(output.cot, cot);
        prop_assert_eq!(output.entities, entities);
        prop_assert_eq!(output.raw, raw);
    }

    #[test]
    fn serialization_is_deterministic(
        cot in "[a-zA-Z0-9 ]{0,40}",
        entities in mentions_strategy(),
    ) {
        let a = serialize_target(&cot, &entities).unwrap();
        let b = serialize_target(&cot, &entities).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn span_prf_matches_oracle(
        pred in mentions_strategy(),
        gold in mentions_strategy(),
    ) {
        prop_assert_eq!(span_prf(&pred, &gold), oracle_prf(&pred, &gold));
    }

    #[test]
    fn prf_metrics_stay_in_unit_interval(
        tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100,
    ) {
        let counts = PrfCounts { tp, fp, fn_ };
        for value in [counts.precision(), counts.recall(), counts.f1()] {
            prop_assert!((0.0..=1.0).contains(&value));
        }
        if tp == 0 {
            prop_assert_eq!(counts.f1(), 0.0);
        }
    }

    #[test]
    fn micro_pooling_adds_counts(
        parts in prop::collection::vec((0usize..50, 0usize..50, 0usize..50), 1..6),
    ) {
        let mut pooled = PrfCounts::default();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for &(a, b, c) in &parts {
            pooled.add(&PrfCounts { tp: a, fp: b, fn_: c });
            tp += a;
            fp += b;
            fn_ += c;
        }
        prop_assert_eq!(pooled, PrfCounts { tp, fp, fn_ });
    }

    #[test]
    fn rewards_are_bounded(
        pred in mentions_strategy(),
        gold in mentions_strategy(),
    ) {
        let schema = EntitySchema::new(["A", "B"]).unwrap();
        let raw = serialize_target("trace", &pred).unwrap();
        let output = parse_model_output(&raw);
        let f1 = reward_f1(&output, &gold);
        prop_assert!((0.0..=1.0).contains(&f1));
        let weights = RewardWeights::default();
        let composite = composite_reward(&output, &gold, &schema, &weights);
        prop_assert!((0.0..=weights.max_reward()).contains(&composite));
    }

    #[test]
    fn identical_pred_and_gold_score_perfectly(entities in mentions_strategy()) {
        let deduped: Vec<EntityMention> = entities
            .iter()
            .filter(|e| !e.text.is_empty())
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let raw = serialize_target("trace", &deduped).unwrap();
        let f1 = reward_f1(&parse_model_output(&raw), &deduped);
        prop_assert_eq!(f1, 1.0);
    }

    #[test]
    fn sampler_respects_caps_budget_and_index_bounds(
        sizes in prop::collection::vec(1usize..5000, 1..6),
        cap in 1usize..6000,
        budget in 0usize..3000,
        seed in any::<u64>(),
    ) {
        let specs: Vec<DatasetSpec> = sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| DatasetSpec { name: format!("d{i}"), size })
            .collect();
        let result = capped_stratified_sample(&specs, cap, budget, seed).unwrap();
        prop_assert_eq!(result.len(), specs.len());
        let mut total = 0;
        for ((name, stratum), spec) in result.iter().zip(&specs) {
            prop_assert_eq!(name, &spec.name);
            prop_assert!(stratum.count <= spec.size.min(cap));
            prop_assert_eq!(stratum.indices.len(), stratum.count);
            let unique: BTreeSet<usize> = stratum.indices.iter().copied().collect();
            prop_assert_eq!(unique.len(), stratum.count);
            prop_assert!(stratum.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(stratum.indices.iter().all(|&i| i < spec.size));
            total += stratum.count;
        }
        prop_assert!(total <= budget);
        let again = capped_stratified_sample(&specs, cap, budget, seed).unwrap();
        prop_assert_eq!(result, again);
    }

    #[test]
    fn sampler_cap_above_all_sizes_is_inert(
        sizes in prop::collection::vec(1usize..2000, 1..5),
        budget in 1usize..1500,
        seed in any::<u64>(),
    ) {
        let specs: Vec<DatasetSpec> = sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| DatasetSpec { name: format!("d{i}"), size })
            .collect();
        let max = *sizes.iter().max().unwrap();
        let at_max = capped_stratified_sample(&specs, max, budget, seed).unwrap();
        let above = capped_stratified_sample(&specs, max + 977, budget, seed).unwrap();
        prop_assert_eq!(at_max, above);
    }

    #[test]
    fn advantages_are_centered_and_shift_invariant(
        rewards in prop::collection::vec(-50.0f64..50.0, 1..20),
        shift in -25.0f64..25.0,
    ) {
        let adv = advantages(&rewards);
        let sum: f64 = adv.iter().sum();
        prop_assert!(sum.abs() < 1e-9 * (1.0 + rewards.len() as f64));
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        for (a, b) in adv.iter().zip(advantages(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn surrogate_is_flat_deep_in_the_clipped_region(
        old_logp in -5.0f64..0.0,
        excess in 0.3f64..2.0,
        advantage in 0.01f64..10.0,
        bump in 0.01f64..0.5,
    ) {
        let epsilon = 0.2;
        // Positive advantage with the ratio above 1 + epsilon: the
        // objective saturates at (1 + epsilon) * advantage.
        let new_logp = old_logp + (1.0 + epsilon + excess).ln();
        let here = surrogate_term(new_logp, old_logp, advantage, epsilon);
        let further = surrogate_term(new_logp + bump, old_logp, advantage, epsilon);
        prop_assert!((here - (1.0 + epsilon) * advantage).abs() < 1e-12);
        prop_assert!((here - further).abs() < 1e-12);
    }

    #[test]
    fn kl_estimate_is_nonnegative(delta in -10.0f64..10.0) {
        let new_logp = -1.0;
        let value = kl_term(new_logp, new_logp + delta);
        prop_assert!(value >= 0.0);
        if delta.abs() < 1e-12 {
            prop_assert!(value.abs() < 1e-12);
        }
    }
}
