use std::sync::OnceLock;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rcr_core::catalog::{
    attr_mismatch_count, generate_catalog, nearest_items, AttributeSchema, Catalog, CatalogConfig, Item, Split,
};
use rcr_core::constraint::{hard_filter, harvest_pairs, violation_loss, HardConstraintTracker, PairBuffer};
use rcr_core::recommender::{recommend, StepRecord};
use rcr_core::user_sim::{count_violations, is_success, sample_goal, Feedback, FeedbackEvent, Goal, Slot, UserSimulator};

const CARDS: [usize; 3] = [3, 4, 2];

fn small_schema() -> AttributeSchema {
    AttributeSchema::with_cardinalities(&["a", "b", "c"], &CARDS).unwrap()
}

fn attrs() -> impl Strategy<Value = Vec<usize>> {
    (0..CARDS[0], 0..CARDS[1], 0..CARDS[2]).prop_map(|(a, b, c)| vec![a, b, c])
}

/// Catalog with arbitrary true and retrieval attributes.
fn small_catalog() -> impl Strategy<Value = Catalog> {
    vec((attrs(), attrs()), 1..40).prop_map(|rows| {
        let items = rows
            .iter()
            .enumerate()
            .map(|(id, (a, _))| Item {
                id,
                attrs: a.clone(),
                embedding: vec![id as f64],
                split: if id % 3 == 0 { Split::Unseen } else { Split::Seen },
            })
            .collect();
        Catalog::from_items(small_schema(), items)
            .unwrap()
            .with_retrieval_attrs(rows.into_iter().map(|(_, r)| r).collect())
            .unwrap()
    })
}

fn one_hot(attrs: &[usize]) -> Vec<f64> {
    let mut v = Vec::new();
    for (a, &card) in CARDS.iter().enumerate() {
        v.extend((0..card).map(|x| if x == attrs[a] { 1.0 } else { 0.0 }));
    }
    v
}

/// Full scan over Euclidean distances between one-hot encodings.
fn brute_force(catalog: &Catalog, query: &[usize], k: usize, pool: &[usize]) -> Vec<(usize, f64)> {
    let q = one_hot(query);
    let mut all: Vec<(usize, f64)> = pool
        .iter()
        .map(|&id| {
            let e = one_hot(catalog.retrieval_attrs(id));
            (id, q.iter().zip(&e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn shoes() -> &'static (Catalog, UserSimulator) {
    static S: OnceLock<(Catalog, UserSimulator)> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = CatalogConfig {
            n_items: 300,
            seed: 11,
            ..CatalogConfig::default()
        };
        let c = generate_catalog(&AttributeSchema::default(), &cfg).unwrap();
        let sim = UserSimulator::new(c.schema()).unwrap();
        (c, sim)
    })
}

proptest! {
    #[test]
    fn nearest_items_equals_brute_force(catalog in small_catalog(), query in attrs(), pool_mask in vec(any::<bool>(), 40)) {
        let mut pool: Vec<usize> = (0..catalog.len()).filter(|&i| pool_mask[i]).collect();
        if pool.is_empty() {
            pool.push(0);
        }
        for k in 1..=pool.len() {
            let got: Vec<(usize, f64)> = nearest_items(&catalog, &query, k, &pool).unwrap().iter().map(|n| (n.id, n.distance)).collect();
            prop_assert_eq!(got, brute_force(&catalog, &query, k, &pool));
        }
    }

    #[test]
    fn retrieval_order_ignores_pool_order(catalog in small_catalog(), query in attrs(), k in 1usize..10) {
        let pool: Vec<usize> = (0..catalog.len()).collect();
        let k = k.min(pool.len());
        let a = nearest_items(&catalog, &query, k, &pool).unwrap();
        let mut rev = pool.clone();
        rev.reverse();
        prop_assert_eq!(&a, &nearest_items(&catalog, &query, k, &rev).unwrap());
        prop_assert_eq!(&a, &nearest_items(&catalog, &query, k, &pool).unwrap());
    }

    #[test]
    fn mismatch_count_is_a_metric(a in attrs(), b in attrs(), c in attrs()) {
        prop_assert_eq!(attr_mismatch_count(&a, &a), 0);
        prop_assert_eq!(attr_mismatch_count(&a, &b), attr_mismatch_count(&b, &a));
        prop_assert_eq!(attr_mismatch_count(&a, &b) == 0, a == b);
        prop_assert!(attr_mismatch_count(&a, &c) <= attr_mismatch_count(&a, &b) + attr_mismatch_count(&b, &c));
    }

    #[test]
    fn gate_substitutes_within_the_ranking(
        catalog in small_catalog(),
        query in attrs(),
        k in 1usize..5,
        max_rejects in 0usize..6,
        alpha in 0.0f64..1.0,
        probs in vec(0.0f64..1.0, 40),
    ) {
        let pool: Vec<usize> = (0..catalog.len()).collect();
        let k = k.min(pool.len());
        let depth = (k + max_rejects).min(pool.len());
        let ranking: Vec<usize> = nearest_items(&catalog, &query, depth, &pool).unwrap().iter().map(|n| n.id).collect();
        let mut gate = |id: usize| Ok(probs[id]);
        let r = recommend(&query, &catalog, k, &pool, Some(&mut gate), alpha, max_rejects).unwrap();
        prop_assert_eq!(r.items.len(), k);
        prop_assert!(r.rejects <= max_rejects);
        let mut positions: Vec<usize> = r.items.iter().map(|i| ranking.iter().position(|x| x == i).unwrap()).collect();
        let sorted = { let mut p = positions.clone(); p.sort(); p.dedup(); p };
        prop_assert_eq!(&positions, &sorted);
        positions.dedup();
        prop_assert_eq!(positions.len(), k);
        for d in &r.trace {
            prop_assert_eq!(d.rejected, probs[d.item] > alpha);
            if !d.rejected {
                prop_assert!(r.items.contains(&d.item));
            } else if r.items.contains(&d.item) {
                prop_assert!(pool.len() < k + max_rejects, "readmitted {} with candidates to spare", d.item);
            }
        }
        let plain = recommend(&query, &catalog, k, &pool, None, alpha, max_rejects).unwrap();
        let mut open = |_: usize| Ok(0.0);
        prop_assert_eq!(recommend(&query, &catalog, k, &pool, Some(&mut open), alpha, max_rejects).unwrap().items, plain.items);
    }

    #[test]
    fn hard_filter_respects_unrelaxed_constraints(
        catalog in small_catalog(),
        query in attrs(),
        k in 1usize..6,
        stated in vec((0usize..3, 0usize..4), 0..5),
    ) {
        let mut tracker = HardConstraintTracker::new();
        for (attr, v) in stated {
            tracker.update(Slot { attr, value: v % CARDS[attr] });
        }
        let pool: Vec<usize> = (0..catalog.len()).collect();
        let k = k.min(pool.len());
        let r = hard_filter(&tracker, &catalog, &query, k, &pool).unwrap();
        prop_assert_eq!(r.items.len(), k);
        for n in &r.items {
            let a = catalog.retrieval_attrs(n.id);
            prop_assert!(tracker.entries()[r.relaxed..].iter().all(|s| a[s.attr] == s.value));
        }
        if r.relaxed > 0 {
            let strict = pool.iter().filter(|&&id| {
                let a = catalog.retrieval_attrs(id);
                tracker.entries()[r.relaxed - 1..].iter().all(|s| a[s.attr] == s.value)
            }).count();
            prop_assert!(strict < k);
        }
    }

    #[test]
    fn loss_at_one_half_is_two_ln_two(nv in 1usize..50, nc in 1usize..50) {
        let l = violation_loss(&vec![0.5; nv], &vec![0.5; nc]);
        prop_assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}

/// Plays a random session toward `goal`, returning the steps and the simulator's replies.
fn random_session(seed: u64, turns: usize) -> (Goal, Vec<StepRecord>, Vec<bool>) {
    let (catalog, sim) = shoes();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let goal = sample_goal(catalog, Split::Seen, &mut rng).unwrap();
    let mut steps = Vec::new();
    let mut satisfied = Vec::new();
    for t in 0..turns {
        let item = if t % 4 == 3 { goal.item } else { ((seed % 1000) as usize * 31 + t * 17) % catalog.len() };
        let fb = sim.give_feedback(&catalog.item(item).attrs, &goal, &mut rng);
        satisfied.push(matches!(fb, Feedback::Satisfied));
        let feedback = match fb {
            Feedback::Satisfied => None,
            Feedback::Comment(u) => {
                assert_ne!(catalog.item(item).attrs[u.slot.attr], goal.attrs[u.slot.attr]);
                assert_eq!(u.slot.value, goal.attrs[u.slot.attr]);
                Some(u.event())
            }
        };
        steps.push(StepRecord {
            action: catalog.item(item).attrs.clone(),
            items: vec![item],
            rejects: 0,
            relaxed: 0,
            reward: 0.0,
            penalty: 0.0,
            violations: 0,
            feedback,
        });
    }
    (goal, steps, satisfied)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulator_talks_about_real_differences_and_never_contradicts_its_goal(seed in any::<u64>(), turns in 1usize..25) {
        let (catalog, _) = shoes();
        let (goal, steps, satisfied) = random_session(seed, turns);
        let history: Vec<Slot> = steps.iter().filter_map(|s| s.feedback.map(|e: FeedbackEvent| e.slot)).collect();
        prop_assert_eq!(count_violations(&goal.attrs, &history), 0);
        for (s, sat) in steps.iter().zip(satisfied) {
            prop_assert_eq!(sat, is_success(catalog, &s.items, &goal));
        }
    }

    #[test]
    fn harvested_labels_match_a_recount(seed in any::<u64>(), turns in 1usize..25) {
        let (catalog, _) = shoes();
        let (goal, steps, _) = random_session(seed, turns);
        let mut buffer = PairBuffer::new(usize::MAX);
        harvest_pairs(catalog, &steps, &goal, &mut buffer);
        let recount = |s: &rcr_core::constraint::PairSample| {
            let mut latest = std::collections::HashMap::new();
            for e in &s.history {
                latest.insert(e.slot.attr, e.slot.value);
            }
            latest.iter().filter(|(&a, &v)| catalog.item(s.item).attrs[a] != v).count()
        };
        prop_assert!(buffer.violations().iter().all(|s| recount(s) >= 1));
        prop_assert!(buffer.clean().iter().all(|s| recount(s) == 0));
        prop_assert!(buffer.clean().iter().any(|s| s.item == goal.item));
    }
}
