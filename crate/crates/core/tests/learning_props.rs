use std::sync::OnceLock;

use proptest::collection::vec;
use proptest::prelude::*;
use rcr_core::catalog::{generate_catalog, split_seen_unseen, AttributeSchema, Catalog, CatalogConfig, Split};
use rcr_core::eval::{mean_se, MetricsReport, SessionLog};
use rcr_core::recommender::{Recommender, StepRecord};
use rcr_core::rng;
use rcr_core::seqgen::{build_corpus, Generator, GeneratorDims};
use rcr_core::trainer::{
    check_rate_ordering, lambda_update, returns_to_go, run_training, LagrangeState, Mode, Schedule, TrainConfig,
};
use rcr_core::user_sim::UserSimulator;

fn world() -> &'static (Catalog, UserSimulator) {
    static W: OnceLock<(Catalog, UserSimulator)> = OnceLock::new();
    W.get_or_init(|| {
        let cfg = CatalogConfig {
            n_items: 200,
            seed: 9,
            ..CatalogConfig::default()
        };
        let c = generate_catalog(&AttributeSchema::default(), &cfg).unwrap();
        let c = split_seen_unseen(&c, 0.8, 9).unwrap();
        let sim = UserSimulator::new(c.schema()).unwrap();
        (c, sim)
    })
}

fn quick(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        episodes: 12,
        max_steps: 10,
        text_pretrain_steps: 3,
        ..TrainConfig::default()
    }
}

fn session() -> impl Strategy<Value = SessionLog> {
    (1usize..=40, any::<bool>(), vec(0usize..4, 40)).prop_map(|(len, success, nv)| SessionLog {
        goal: 0,
        success,
        steps: (0..len)
            .map(|t| StepRecord {
                action: vec![0; 6],
                items: vec![t],
                rejects: 0,
                relaxed: 0,
                reward: 0.0,
                penalty: 0.0,
                violations: nv[t],
                feedback: None,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn multiplier_stays_in_its_box(
        lmax in 0.0f64..5.0,
        start in 0.0f64..1.0,
        alpha in 0.0f64..1.0,
        rate in 1e-6f64..1.0,
        penalties in vec(0.0f64..1.0, 0..200),
    ) {
        let mut state = LagrangeState { lambda: start * lmax, alpha, lambda_max: lmax };
        for c in penalties {
            let before = state.lambda;
            state.update(c, rate);
            prop_assert!((0.0..=lmax).contains(&state.lambda));
            if c > alpha { prop_assert!(state.lambda >= before); }
            if c < alpha { prop_assert!(state.lambda <= before); }
        }
    }

    #[test]
    fn multiplier_follows_the_closed_form(start in 0.0f64..1.0, alpha in 0.01f64..1.0, rate in 1e-4f64..0.1, n in 0usize..400) {
        let (mut up, mut down) = (start, start);
        for _ in 0..n {
            up = lambda_update(up, 1.0, alpha, 1.0, rate);
            down = lambda_update(down, 0.0, alpha, 1.0, rate);
        }
        let steps = n as f64;
        prop_assert!((up - (start + steps * rate * (1.0 - alpha)).min(1.0)).abs() < 1e-9);
        prop_assert!((down - (start - steps * rate * alpha).max(0.0)).abs() < 1e-9);
    }

    #[test]
    fn ordered_schedules_stay_ordered(
        base in 1e-5f64..1e-2,
        r2 in 0.1f64..0.99,
        r3 in 0.1f64..0.99,
        half_life in 1.0f64..1e5,
        k in 0usize..10_000_000,
    ) {
        let policy = Schedule::InverseTime { rate: base, half_life };
        let disc = Schedule::InverseTime { rate: base * r2, half_life };
        let lambda = Schedule::InverseTime { rate: base * r2 * r3, half_life };
        prop_assert!(check_rate_ordering(&policy, &disc, &lambda, k).is_ok());
        prop_assert!(check_rate_ordering(&disc, &policy, &lambda, k).is_err());
        prop_assert!(check_rate_ordering(&policy, &lambda, &disc, k).is_err());
    }

    #[test]
    fn returns_to_go_sum_the_suffix(rc in vec((-5.0f64..5.0, 0.0f64..1.0), 0..30), lambda in 0.0f64..2.0) {
        let (r, c): (Vec<f64>, Vec<f64>) = rc.into_iter().unzip();
        let got = returns_to_go(&r, &c, lambda);
        for t in 0..r.len() {
            let oracle: f64 = (t..r.len()).map(|u| r[u] - lambda * c[u]).sum();
            prop_assert!((got[t] - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn report_matches_a_recount(logs in vec(session(), 1..30), max_steps in 40usize..60) {
        let r = MetricsReport::from_logs(Mode::Rcr, Split::Unseen, vec![0], &logs, max_steps);
        let n = logs.len() as f64;
        let sr = |k: usize| logs.iter().filter(|l| l.success && l.steps.len() <= k).count() as f64 / n;
        prop_assert_eq!((r.sr10, r.sr20, r.sr30), (sr(10), sr(20), sr(30)));
        prop_assert!(r.sr10 <= r.sr20 && r.sr20 <= r.sr30);
        prop_assert!(r.ni >= 1.0 && r.ni <= max_steps as f64);
        prop_assert!(r.nv >= 0.0);

        let turns: Vec<f64> = logs.iter().map(|l| if l.success { l.steps.len() } else { max_steps } as f64).collect();
        let nvs: Vec<f64> = logs.iter().map(|l| l.steps.iter().map(|s| s.violations).sum::<usize>() as f64).collect();
        for (xs, mean, se) in [(&turns, r.ni, r.ni_se), (&nvs, r.nv, r.nv_se)] {
            let m = xs.iter().sum::<f64>() / n;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            prop_assert!((mean - m).abs() < 1e-9);
            prop_assert!((se - sd / n.sqrt()).abs() < 1e-9);
        }
        prop_assert_eq!(mean_se(&turns), (r.ni, r.ni_se));
    }

    #[test]
    fn policy_heads_are_distributions(seed in any::<u64>(), state in vec(-3.0f64..3.0, 1..64)) {
        let (catalog, sim) = world();
        let model = Recommender::new(catalog, sim, Default::default(), seed).unwrap();
        let s: Vec<f64> = (0..model.dims.d_s).map(|i| state[i % state.len()]).collect();
        let dist = model.action_distribution(&s).unwrap();
        prop_assert_eq!(dist.heads.iter().map(Vec::len).collect::<Vec<_>>(), catalog.schema().cardinalities());
        for h in &dist.heads {
            prop_assert!(h.iter().all(|&p| p >= 0.0));
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut rng = rng::stream(seed, 0);
        for _ in 0..10 {
            let a = dist.sample(&mut rng);
            prop_assert!(dist.log_prob(&a).unwrap().is_finite());
        }
        let mode = dist.mode();
        prop_assert!(dist.heads.iter().zip(&mode).all(|(h, &m)| h.iter().all(|&p| p <= h[m])));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_rows_terminate(seed in any::<u64>(), max_len in 1usize..25) {
        let corpus = build_corpus(1, 200).unwrap();
        let dims = GeneratorDims { token_dim: 4, hidden: 8, latent_dim: seed as usize % 3 };
        let gen = Generator::for_corpus(&corpus, dims, seed).unwrap();
        let mut rng = rng::stream(seed, 1);
        for s in gen.sample(&mut rng, 20, max_len).unwrap() {
            prop_assert!(s.len() <= max_len);
            prop_assert!(!s.contains(&corpus.eos()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    #[test]
    fn training_replays_exactly(seed in 0u64..1000) {
        let (catalog, sim) = world();
        let cfg = quick(Mode::Rcr, seed);
        let a = run_training(&cfg, catalog, sim).unwrap();
        let b = run_training(&cfg, catalog, sim).unwrap();
        prop_assert_eq!(&a.log, &b.log);
        prop_assert_eq!(a.model.params.entries().collect::<Vec<_>>(), b.model.params.entries().collect::<Vec<_>>());
        prop_assert!(a.log.rows.iter().all(|r| (0.0..=cfg.lambda_max).contains(&r.lambda)));
    }

    #[test]
    fn zero_ceiling_reduces_to_plain_rl(seed in 0u64..1000) {
        let (catalog, sim) = world();
        let rl = run_training(&quick(Mode::Rl, seed), catalog, sim).unwrap();
        let mut cfg = quick(Mode::Rcr, seed);
        cfg.lambda_max = 0.0;
        cfg.gate = false;
        let rcr = run_training(&cfg, catalog, sim).unwrap();
        prop_assert_eq!(rl.model.params.entries().collect::<Vec<_>>(), rcr.model.params.entries().collect::<Vec<_>>());
        for (x, y) in rl.log.rows.iter().zip(&rcr.log.rows) {
            prop_assert_eq!((x.steps, x.success, x.mean_reward.to_bits()), (y.steps, y.success, y.mean_reward.to_bits()));
            prop_assert_eq!(y.lambda, 0.0);
        }
    }
}
