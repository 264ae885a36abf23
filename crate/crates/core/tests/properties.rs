mod common;

use common::{catalog_from, dotp, every_query, evoi_oracle, f_oracle, instance, l2, max_norm};
use crssim::agent::{eu_star, evoi_exact, f_score, select_query, AgentConfig};
use crssim::behavior::{choice_probs, BehaviorConfig};
use crssim::belief::{metropolis_accept, ModelContext};
use crssim::corpus::{CavSet, GroundTruthUser, UserId, UserPrior};
use crssim::dialogue::{render_templates, Dialogue, Speaker, Stage, TrajectoryRef};
use crssim::eval::{eval_turn, mean_ci, BucketFill, OracleLm, PairOrder, PairwiseTask, TextProfile};
use crssim::lm::DecodingParams;
use crssim::trajectory::{simulate, SimConfig, Trajectory};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn single_sample_f_is_constant(inst in instance(6, 3, 1)) {
        let (catalog, cavs, b) = (inst.catalog(), inst.cavs(), BehaviorConfig::default());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
        let expected = max_norm(&catalog) * l2(&inst.samples[0]);
        for q in every_query(&catalog, &cavs) {
            let f = f_score(&q, &inst.samples[..1], ctx).unwrap();
            prop_assert!(close(f, expected, 1e-12), "{f} vs {expected}");
        }
    }

    #[test]
    fn f_is_bounded_by_mean_norm(inst in instance(6, 3, 8)) {
        let (catalog, cavs, b) = (inst.catalog(), inst.cavs(), BehaviorConfig::default());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
        let bound = max_norm(&catalog) * inst.samples.iter().map(|s| l2(s)).sum::<f64>() / inst.samples.len() as f64;
        for q in every_query(&catalog, &cavs) {
            let f = f_score(&q, &inst.samples, ctx).unwrap();
            prop_assert!(f >= -1e-12 && f <= bound + 1e-9, "{f} vs {bound}");
        }
    }

    #[test]
    fn f_matches_direct_formula(inst in instance(6, 3, 8)) {
        let (catalog, cavs, b) = (inst.catalog(), inst.cavs(), BehaviorConfig::default());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
        for q in every_query(&catalog, &cavs) {
            let f = f_score(&q, &inst.samples, ctx).unwrap();
            let o = f_oracle(&q, &inst.samples, &catalog, &cavs, &b);
            prop_assert!(close(f, o, 1e-9), "{f} vs {o}");
        }
    }

    #[test]
    fn evoi_is_nonnegative_and_exact(inst in instance(6, 3, 8)) {
        let (catalog, cavs, b) = (inst.catalog(), inst.cavs(), BehaviorConfig::default());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
        let atoms = inst.atoms();
        for q in every_query(&catalog, &cavs) {
            let v = evoi_exact(&q, &atoms, ctx).unwrap();
            prop_assert!(v >= -1e-9, "{v}");
            let o = evoi_oracle(&q, &atoms, &catalog, &cavs, &b);
            prop_assert!(close(v, o, 1e-9), "{v} vs {o}");
        }
    }

    #[test]
    fn point_belief_has_no_information_value(inst in instance(6, 3, 1)) {
        let (catalog, cavs, b) = (inst.catalog(), inst.cavs(), BehaviorConfig::default());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
        let atoms = vec![(1.0, inst.samples[0].clone())];
        for q in every_query(&catalog, &cavs) {
            prop_assert!(evoi_exact(&q, &atoms, ctx).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn eu_star_is_best_mean_utility(inst in instance(8, 1, 8)) {
        let catalog = inst.catalog();
        let (v, id) = eu_star(&inst.samples, &catalog).unwrap();
        let mean_utility = |e: &[f64]| inst.samples.iter().map(|s| dotp(s, e)).sum::<f64>() / inst.samples.len() as f64;
        let best = catalog.items().iter().map(|i| mean_utility(&i.embedding)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(close(v, best, 1e-12));
        prop_assert!(close(mean_utility(catalog.embedding(id).unwrap()), best, 1e-12));
    }

    #[test]
    fn exhaustive_selection_is_the_maximum(inst in instance(8, 3, 8)) {
        let (catalog, cavs, b) = (inst.catalog(), inst.cavs(), BehaviorConfig::default());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
        let best = every_query(&catalog, &cavs)
            .iter()
            .map(|q| f_score(q, &inst.samples, ctx).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let (_, v) = select_query(&inst.samples, ctx, &AgentConfig::default(), &[], 0).unwrap();
        prop_assert!(close(v, best, 1e-12), "{v} vs {best}");
    }

    #[test]
    fn uphill_moves_are_always_accepted(lr in 0.0f64..50.0, u in 0.0f64..1.0) {
        prop_assert!(metropolis_accept(lr, u));
    }

    #[test]
    fn downhill_moves_follow_the_ratio(lr in -20.0f64..-1e-6, u in 0.0f64..1.0) {
        prop_assert_eq!(metropolis_accept(lr, u), u < lr.exp());
    }

    #[test]
    fn choice_probabilities_are_a_distribution(
        u in prop::collection::vec(-5.0f64..5.0, 1..6),
        null in prop::option::of(-5.0f64..5.0),
        t in 0.05f64..5.0,
    ) {
        let p = choice_probs(&u, null, t);
        prop_assert_eq!(p.len(), u.len() + null.is_some() as usize);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ci_shrinks_with_root_n(values in prop::collection::vec(0.0f64..1.0, 2..40)) {
        let (m1, c1) = mean_ci(&values);
        let four: Vec<f64> = values.iter().cycle().take(values.len() * 4).cloned().collect();
        let (m4, c4) = mean_ci(&four);
        prop_assert!((m1 - m4).abs() < 1e-12);
        prop_assert!((c4 - c1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_judge_ignores_presentation_order(
        embs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 2..6),
        user in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let catalog = catalog_from(&embs);
        let scores: Vec<f64> = embs.iter().map(|e| dotp(e, &user)).collect();
        let (hi, lo) = (0..embs.len()).fold((0, 0), |(h, l), k| {
            (if scores[k] > scores[h] { k } else { h }, if scores[k] < scores[l] { k } else { l })
        });
        prop_assume!(scores[hi] > scores[lo]);
        let items = catalog.items();
        let task = PairwiseTask {
            user_id: UserId(1),
            item_hi: items[hi].id,
            item_lo: items[lo].id,
            score_hi: scores[hi],
            score_lo: scores[lo],
        };
        let profile = TextProfile {
            user_id: UserId(1), liked: vec![], disliked: vec![], uncertain: vec![],
            filled: BucketFill::default(), text: "Profile.".into(),
        };
        let dialogue = Dialogue {
            trajectory_ref: TrajectoryRef { user_id: UserId(1), seed: 0 },
            stage: Stage::Refined,
            turns: vec![],
        };
        let lm = OracleLm::perfect(&task, &catalog).unwrap();
        for order in [PairOrder::HiFirst, PairOrder::LoFirst, PairOrder::Random] {
            let r = eval_turn(&lm, &profile, &dialogue, 0, &task, &catalog, order, 1, &DecodingParams::default(), 4).unwrap();
            prop_assert!(r.chose_hi && !r.flagged);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_trajectories_round_trip_and_render(
        embs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 3..8),
        truth in prop::collection::vec(-1.0f64..1.0, 2),
        seed in any::<u64>(),
    ) {
        prop_assume!(embs.iter().all(|e| l2(e) > 1e-3));
        let catalog = catalog_from(&embs);
        let cavs = common::cavs_from(&[vec![1.0, 0.3], vec![-0.2, 1.0]], 0.5);
        let user = GroundTruthUser::new(UserId(4), truth).unwrap();
        let prior = UserPrior::new(UserId(4), vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut config = SimConfig::default();
        config.sampler.m = 20;
        config.sampler.burn_in = 50;
        let t = simulate(&user, &prior, &catalog, &cavs, &config, seed).unwrap();
        t.validate().unwrap();
        prop_assert!(t.turns.len() <= config.agent.max_turns);
        prop_assert_eq!(&Trajectory::from_json(&t.to_json()).unwrap(), &t);
        let d = render_templates(&t, &catalog, &cavs).unwrap();
        let agent_lines = d.turns.iter().filter(|x| x.speaker == Speaker::Agent).count();
        prop_assert_eq!(agent_lines, t.turns.len());
        prop_assert_eq!(d.turns.first().map(|x| x.speaker), Some(Speaker::Agent));
        prop_assert!(d.turns.windows(2).all(|w| w[0].speaker != w[1].speaker));
    }
}

#[test]
fn empty_attribute_set_still_scores_item_queries() {
    let catalog = catalog_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]]);
    let cavs = CavSet::empty();
    let b = BehaviorConfig::default();
    let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &b };
    let samples = vec![vec![1.0, 0.2], vec![-0.3, 0.9]];
    let (q, _) = select_query(&samples, ctx, &AgentConfig::default(), &[], 0).unwrap();
    assert!(matches!(q, crssim::behavior::Query::Item(_)));
}
