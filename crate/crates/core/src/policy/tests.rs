use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const ALL_P_VARIANTS: [MixVariant; 5] =
    [MixVariant::PGreedy, MixVariant::PQuantile, MixVariant::POfMax, MixVariant::PThresh, MixVariant::GfnThenQ];

fn ctx() -> MixContext {
    MixContext { depth: 0, horizon: 4 }
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn p_greedy_endpoints() {
    let pf = [0.1, 0.2, 0.3, 0.4];
    let q = [0.5, 2.0, 1.0, 0.0];
    let valid = [true; 4];
    assert_eq!(mu_distribution(MixVariant::PGreedy, 0.0, ctx(), &pf, &q, &valid).unwrap(), pf.to_vec());
    assert_close(&mu_distribution(MixVariant::PGreedy, 1.0, ctx(), &pf, &q, &valid).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    assert_close(
        &mu_distribution(MixVariant::PGreedy, 0.5, ctx(), &pf, &q, &valid).unwrap(),
        &[0.05, 0.6, 0.15, 0.2],
    );
}

#[test]
fn p_quantile_examples() {
    let pf = [0.25; 4];
    let valid = [true; 4];
    let q = [3.0, 1.0, 2.0, 4.0];
    assert_eq!(mu_distribution(MixVariant::PQuantile, 0.0, ctx(), &pf, &q, &valid).unwrap(), pf.to_vec());
    assert_close(&mu_distribution(MixVariant::PQuantile, 0.5, ctx(), &pf, &q, &valid).unwrap(), &[0.5, 0.0, 0.0, 0.5]);
    // p = 1 would mask everything; the argmax survives.
    assert_close(&mu_distribution(MixVariant::PQuantile, 1.0, ctx(), &pf, &q, &valid).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    // Ties at the boundary are kept.
    let tied = [1.0, 2.0, 2.0, 3.0];
    let b = behavior(MixVariant::PQuantile, 0.5, ctx(), &MaskGuard::default(), &pf, &tied, &valid).unwrap();
    assert_eq!(b.kept, vec![false, true, true, true]);
    assert_eq!(b.pruned(&valid), vec![0]);
}

#[test]
fn p_of_max_two_doors_root() {
    let pf = [0.5, 0.5];
    let q = [1.0, 100.0];
    let valid = [true, true];
    assert_close(&mu_distribution(MixVariant::POfMax, 0.5, ctx(), &pf, &q, &valid).unwrap(), &[0.0, 1.0]);
    assert_close(&mu_distribution(MixVariant::POfMax, 0.0, ctx(), &pf, &q, &valid).unwrap(), &[0.5, 0.5]);
    assert_close(&mu_distribution(MixVariant::POfMax, 0.01, ctx(), &pf, &q, &valid).unwrap(), &[0.5, 0.5]);
}

#[test]
fn p_of_max_inactive_below_threshold() {
    let pf = [0.5, 0.5];
    let q = [0.0, 1e-5];
    let valid = [true, true];
    assert_close(&mu_distribution(MixVariant::POfMax, 0.9, ctx(), &pf, &q, &valid).unwrap(), &[0.5, 0.5]);
}

#[test]
fn q_is_clipped_before_mixing() {
    let pf = [0.5, 0.5];
    let valid = [true, true];
    // Both clip to 0, so the argmax falls on the lowest index.
    let q = [-3.0, -1.0];
    assert_close(&mu_distribution(MixVariant::GreedyQ, 0.0, ctx(), &pf, &q, &valid).unwrap(), &[1.0, 0.0]);
    assert_close(
        &mu_distribution(MixVariant::SoftQ { temperature: 1.0 }, 0.0, ctx(), &pf, &q, &valid).unwrap(),
        &[0.5, 0.5],
    );
}

#[test]
fn thresh_soft_and_gfn_then_q() {
    let pf = [0.2, 0.3, 0.5, 0.0];
    let q = [0.1, 0.6, 0.9, 7.0];
    let valid = [true, true, true, false];
    assert_close(&mu_distribution(MixVariant::PThresh, 0.5, ctx(), &pf, &q, &valid).unwrap(), &[0.0, 0.375, 0.625, 0.0]);
    assert_close(&mu_distribution(MixVariant::PThresh, 0.95, ctx(), &pf, &q, &valid).unwrap(), &[0.0, 0.0, 1.0, 0.0]);

    let t = 0.5;
    let w: Vec<f64> = q[..3].iter().map(|x| (x / t).exp()).collect();
    let z: f64 = w.iter().sum();
    let soft = [w[0] / z, w[1] / z, w[2] / z, 0.0];
    assert_close(&mu_distribution(MixVariant::SoftQ { temperature: t }, 0.0, ctx(), &pf, &q, &valid).unwrap(), &soft);
    let mixed: Vec<f64> = (0..4).map(|i| 0.5 * pf[i] + 0.5 * soft[i]).collect();
    assert_close(
        &mu_distribution(MixVariant::SoftQMixed { temperature: t }, 0.0, ctx(), &pf, &q, &valid).unwrap(),
        &mixed,
    );

    // N = 4, p = 0.5: P_F for depths 0 and 1, greedy from depth 2.
    for depth in 0..4 {
        let c = MixContext { depth, horizon: 4 };
        let mu = mu_distribution(MixVariant::GfnThenQ, 0.5, c, &pf, &q, &valid).unwrap();
        if depth < 2 {
            assert_eq!(mu, pf.to_vec());
        } else {
            assert_close(&mu, &[0.0, 0.0, 1.0, 0.0]);
        }
    }
}

#[test]
fn invalid_inputs_rejected() {
    let valid = [true, false];
    assert!(matches!(
        mu_distribution(MixVariant::PurePf, 0.0, ctx(), &[0.0, 0.0], &[0.0, 0.0], &[false, false]),
        Err(Error::EmptyActionSet)
    ));
    assert!(mu_distribution(MixVariant::PurePf, 0.0, ctx(), &[0.5, 0.5], &[0.0, 0.0], &valid).is_err());
    assert!(mu_distribution(MixVariant::PurePf, 0.0, ctx(), &[0.9, 0.0], &[0.0, 0.0], &valid).is_err());
    assert!(mu_distribution(MixVariant::PGreedy, 0.0, ctx(), &[1.0, 0.0], &[f64::NAN, 0.0], &valid).is_err());
    assert!(mu_distribution(MixVariant::PGreedy, 1.5, ctx(), &[1.0, 0.0], &[0.0, 0.0], &valid).is_err());
    assert!(mu_distribution(MixVariant::SoftQ { temperature: 0.0 }, 0.0, ctx(), &[1.0, 0.0], &[0.0, 0.0], &valid).is_err());
    // NaN Q on an invalid action is fine.
    assert!(mu_distribution(MixVariant::PGreedy, 0.3, ctx(), &[1.0, 0.0], &[0.0, f64::NAN], &valid).is_ok());
}

#[test]
fn variant_names_round_trip() {
    for v in [
        MixVariant::PurePf,
        MixVariant::PGreedy,
        MixVariant::PQuantile,
        MixVariant::POfMax,
        MixVariant::PThresh,
        MixVariant::SoftQ { temperature: 1.0 },
        MixVariant::SoftQMixed { temperature: 1.0 },
        MixVariant::GfnThenQ,
        MixVariant::GreedyQ,
    ] {
        assert_eq!(MixVariant::from_name(v.name()).unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<MixVariant>(&json).unwrap(), v);
    }
    assert!(MixVariant::from_name("mcts").is_err());
    assert_eq!(MixVariant::SoftQ { temperature: 1.0 }.at_grid_value(0.3), (MixVariant::SoftQ { temperature: 0.3 }, 0.0));
    assert_eq!(MixVariant::PGreedy.at_grid_value(0.3), (MixVariant::PGreedy, 0.3));
}

#[test]
fn schedule_examples() {
    let c = PSchedule::cosine(0.8);
    assert_eq!(schedule_value(&c, 0), 0.0);
    assert_eq!(schedule_value(&c, 1500), 0.8);
    assert!((schedule_value(&c, 750) - 0.4).abs() < 1e-12);
    assert_eq!(schedule_value(&c, 1_000_000), 0.8);
    let s = PSchedule::Stepwise { final_p: 0.6, step_count: 500 };
    assert_eq!(schedule_value(&s, 499), 0.0);
    assert_eq!(schedule_value(&s, 500), 0.6);
    assert_eq!(schedule_value(&PSchedule::Constant { final_p: 0.3 }, 7), 0.3);

    let parsed: PSchedule = serde_json::from_str(r#"{"kind":"cosine_anneal","final_p":0.5}"#).unwrap();
    assert_eq!(parsed, PSchedule::cosine(0.5));
    assert!(serde_json::from_str::<PSchedule>(r#"{"kind":"constant","final_p":0.5,"x":1}"#).is_err());
    assert!(PSchedule::Constant { final_p: 1.2 }.validate().is_err());
    assert_eq!(PSchedule::default_for(MixVariant::POfMax, 0.5), PSchedule::cosine(0.5));
    assert_eq!(PSchedule::default_for(MixVariant::PGreedy, 0.5), PSchedule::Constant { final_p: 0.5 });
}

/// Upper `1 - alpha` chi-square quantile via the Wilson-Hilferty cube.
fn chi_square_critical(df: f64, z: f64) -> f64 {
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}

#[test]
fn epsilon_one_is_uniform_over_valid() {
    let valid = [true, false, true, true, false, true, true];
    let dist = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut counts = [0usize; 7];
    for _ in 0..draws {
        counts[sample_action(&dist, &valid, &mut rng, 1.0).unwrap().0] += 1;
    }
    assert_eq!(counts[1] + counts[4], 0);
    let expected = draws as f64 / 5.0;
    let stat: f64 = valid
        .iter()
        .zip(counts)
        .filter(|(&v, _)| v)
        .map(|(_, c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert!(stat < chi_square_critical(4.0, 3.09), "chi2 = {stat}");
}

#[test]
fn epsilon_zero_follows_dist() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let valid = [true, true, true];
    for _ in 0..1000 {
        assert_eq!(sample_action(&[0.0, 1.0, 0.0], &valid, &mut rng, 0.0).unwrap(), ActionId(1));
    }
    let draws = 100_000;
    let hits = (0..draws)
        .filter(|_| sample_action(&[0.25, 0.75], &[true, true], &mut rng, 0.0).unwrap() == ActionId(1))
        .count();
    let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
    assert!((hits as f64 - 0.75 * draws as f64).abs() < 3.0 * sigma);
}

#[test]
fn sampling_is_reproducible() {
    let dist = [0.1, 0.2, 0.3, 0.4];
    let valid = [true; 4];
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..200).map(|_| sample_action(&dist, &valid, &mut rng, 0.1).unwrap().0).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.01f64..1.0, n),
            proptest::collection::vec(-1.0f64..5.0, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(w, q, mut valid)| {
                if !valid.iter().any(|&v| v) {
                    valid[0] = true;
                }
                let z: f64 = w.iter().zip(&valid).filter(|(_, &v)| v).map(|(x, _)| x).sum();
                let pf = w.iter().zip(&valid).map(|(x, &v)| if v { x / z } else { 0.0 }).collect();
                (pf, q, valid)
            })
    })
}

fn q_argmax(q: &[f64], valid: &[bool]) -> usize {
    let clipped: Vec<f64> = q.iter().map(|x| x.max(0.0)).collect();
    (0..q.len()).filter(|&i| valid[i]).fold(usize::MAX, |b, i| if b == usize::MAX || clipped[i] > clipped[b] { i } else { b })
}

proptest! {
    #[test]
    fn mu_is_a_distribution((pf, q, valid) in case(), p in 0.0f64..=1.0, t in 0.05f64..5.0, depth in 0usize..6) {
        let c = MixContext { depth, horizon: 5 };
        let mut variants = ALL_P_VARIANTS.to_vec();
        variants.extend([MixVariant::PurePf, MixVariant::GreedyQ, MixVariant::SoftQ { temperature: t }, MixVariant::SoftQMixed { temperature: t }]);
        for v in variants {
            let mu = mu_distribution(v, p, c, &pf, &q, &valid).unwrap();
            prop_assert!(mu.iter().all(|&x| x >= 0.0));
            prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..mu.len() {
                if !valid[i] {
                    prop_assert_eq!(mu[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn argmax_always_survives((pf, q, valid) in case(), p in 0.0f64..=1.0) {
        let best = q_argmax(&q, &valid);
        for v in [MixVariant::PQuantile, MixVariant::POfMax, MixVariant::PThresh, MixVariant::PGreedy] {
            let b = behavior(v, p, ctx(), &MaskGuard::default(), &pf, &q, &valid).unwrap();
            prop_assert!(b.kept[best]);
            prop_assert!(b.probs[best] > 0.0);
        }
    }

    #[test]
    fn p_greedy_preserves_support((pf, q, valid) in case(), p in 0.0f64..0.999) {
        let mu = mu_distribution(MixVariant::PGreedy, p, ctx(), &pf, &q, &valid).unwrap();
        for i in 0..pf.len() {
            if pf[i] > 0.0 {
                prop_assert!(mu[i] > 0.0);
            }
        }
    }

    #[test]
    fn quantile_pruning_is_monotone((pf, q, valid) in case(), p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let count = |p| behavior(MixVariant::PQuantile, p, ctx(), &MaskGuard::default(), &pf, &q, &valid).unwrap().pruned(&valid).len();
        prop_assert!(count(lo) <= count(hi));
    }

    #[test]
    fn of_max_at_zero_masks_nothing((pf, q, valid) in case()) {
        let b = behavior(MixVariant::POfMax, 0.0, ctx(), &MaskGuard::default(), &pf, &q, &valid).unwrap();
        prop_assert!(b.pruned(&valid).is_empty());
    }

    #[test]
    fn mixing_variants_are_pure_pf_at_p_zero((pf, q, valid) in case(), depth in 0usize..4) {
        for v in [MixVariant::PGreedy, MixVariant::PQuantile, MixVariant::POfMax, MixVariant::PThresh] {
            let mu = mu_distribution(v, 0.0, ctx(), &pf, &q, &valid).unwrap();
            for i in 0..pf.len() {
                prop_assert!((mu[i] - pf[i]).abs() < 1e-12);
            }
        }
        // GFN-then-Q hands over to Q after round(N p) steps, so it is P_F at p = 1.
        let c = MixContext { depth, horizon: 4 };
        let mu = mu_distribution(MixVariant::GfnThenQ, 1.0, c, &pf, &q, &valid).unwrap();
        for i in 0..pf.len() {
            prop_assert!((mu[i] - pf[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules_are_monotone_and_bounded(final_p in 0.0f64..=1.0, s in 1u64..3000, a in 0u64..5000, b in 0u64..5000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for sched in [
            PSchedule::Constant { final_p },
            PSchedule::CosineAnneal { final_p, total_steps: s },
            PSchedule::Stepwise { final_p, step_count: s },
        ] {
            let (x, y) = (schedule_value(&sched, lo), schedule_value(&sched, hi));
            prop_assert!(x <= y + 1e-15);
            prop_assert!((0.0..=final_p + 1e-15).contains(&x));
            prop_assert_eq!(schedule_value(&sched, u64::MAX), final_p);
        }
    }
}
