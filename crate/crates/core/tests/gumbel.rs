mod common;

use common::bern;
use mtgate::autodiff::Graph;
use mtgate::gumbel::*;
use mtgate::Tensor;
use proptest::prelude::*;

#[test]
fn gumbel_transform_examples() {
    assert!((gumbel_from_uniform(0.5) - 0.366_512_920_581_664_3).abs() < 1e-12);
    assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-15);
    assert!(gumbel_from_uniform(0.0).is_finite());
    assert!(gumbel_from_uniform(1.0).is_finite());
}

#[test]
fn gumbel_mean_is_euler_mascheroni() {
    let mut rng = SeededRng::new(11);
    let g: Tensor = sample_gumbel(&mut rng, 1_000_000).unwrap();
    let mean = g.data().iter().sum::<f64>() / g.numel() as f64;
    assert!((mean - 0.577_215_664_9).abs() < 0.005, "mean {mean}");
}

#[test]
fn hard_sample_examples() {
    assert!(hard_sample(&bern(0.9), [0.0, 0.0]));
    assert!(!hard_sample(&bern(0.1), [0.0, 0.0]));
    // exact tie goes to execute
    assert!(hard_sample(&bern(0.5), [0.0, 0.0]));
}

#[test]
fn hard_sample_frequency_matches_alpha() {
    let mut rng = SeededRng::new(3);
    let n = 100_000;
    let hits = (0..n).filter(|_| hard_sample(&bern(0.7), [rng.gumbel(), rng.gumbel()])).count();
    let f = hits as f64 / n as f64;
    assert!((f - 0.7).abs() < 0.01, "{f}");
}

#[test]
fn relaxed_sample_examples() {
    let r = relaxed_sample(&bern(0.5), [0.0, 0.0], 3.0).unwrap();
    assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.5).abs() < 1e-15);
    let r = relaxed_sample(&bern(0.9), [0.0, 0.0], 1.0).unwrap();
    assert!((r[0] - 0.1).abs() < 1e-12 && (r[1] - 0.9).abs() < 1e-12);
    // odds (0.9/0.1)^10: the skip component is 1 / (1 + 9^10)
    let r = relaxed_sample(&bern(0.9), [0.0, 0.0], 0.1).unwrap();
    let exact = 1.0 / (1.0 + 9f64.powi(10));
    assert!((r[0] - exact).abs() < 1e-20, "{} vs {exact}", r[0]);
    assert!((r[0] - 2.868e-10).abs() < 1e-13);
    let r = relaxed_sample(&bern(0.9), [0.0, 0.0], 1e6).unwrap();
    assert!((r[0] - 0.5).abs() < 1e-6 && (r[1] - 0.5).abs() < 1e-6);
    assert!(relaxed_sample(&bern(0.9), [0.0, 0.0], 0.0).is_err());
    assert!(relaxed_sample(&bern(0.9), [0.0, 0.0], -1.0).is_err());
}

#[test]
fn straight_through_mean_matches_alpha() {
    let mut rng = SeededRng::new(5);
    let n = 100_000;
    let logits = Tensor::new(vec![n, 2], (0..n).flat_map(|_| [0.7f64.ln(), 0.3f64.ln()]).collect()).unwrap();
    let noise: Tensor = rng.gumbel_tensor(vec![n, 2]).unwrap();
    let g = Graph::new();
    let (st, bits) = straight_through_sample(g.param(logits), &noise, 1.0).unwrap();
    let v = st.value();
    for (row, &b) in v.data().chunks(2).zip(&bits) {
        assert!(row == [0.0, 1.0] || row == [1.0, 0.0]);
        assert_eq!(row[1] == 1.0, b);
    }
    let mean = v.data().chunks(2).map(|r| r[1]).sum::<f64>() / n as f64;
    assert!((mean - 0.3).abs() < 0.01, "{mean}");
}

#[test]
fn temperature_examples() {
    let mut s = TemperatureSchedule::new(5.0, 0.965, DecayTrigger::OnMetricMet, 0.5);
    assert!((s.step(true) - 4.825).abs() < 1e-12);
    assert!((s.step(false) - 4.825).abs() < 1e-12);
    for _ in 0..100 {
        s.step(true);
    }
    assert_eq!(s.tau(), 0.5);
}

#[test]
fn relaxed_converges_to_hard_where_the_margin_allows() {
    // At τ the minority component is 1 / (1 + exp(gap / τ)); it is below
    // 1e-6 at τ = 0.01 exactly when the score gap exceeds ln(1e6 − 1)/100.
    let tau = 0.01;
    let bound = ((1e6f64 - 1.0).ln()) * tau;
    let mut rng = SeededRng::new(2);
    for _ in 0..10_000 {
        let alpha = 0.01 + 0.98 * rng.uniform();
        let g = [rng.gumbel(), rng.gumbel()];
        let p = bern(alpha);
        let lp = p.log_pi();
        let gap = (lp[1] + g[1] - lp[0] - g[0]).abs();
        let r = relaxed_sample(&p, g, tau).unwrap();
        let hard = hard_sample(&p, g);
        let dev = (r[1] - if hard { 1.0 } else { 0.0 }).abs();
        let predicted = 1.0 / (1.0 + (gap / tau).exp());
        assert!((dev - predicted).abs() < 1e-12);
        if gap > bound + 1e-9 {
            assert!(dev < 1e-6, "gap {gap} dev {dev}");
        }
    }
}

proptest! {
    #[test]
    fn relaxed_samples_lie_on_the_simplex(alpha in 1e-6f64..1.0 - 1e-6, g0 in -5.0f64..10.0, g1 in -5.0f64..10.0, tau in 1e-3f64..100.0) {
        let r = relaxed_sample(&bern(alpha), [g0, g1], tau).unwrap();
        prop_assert!(r[0] >= 0.0 && r[1] >= 0.0);
        prop_assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pi_is_a_distribution(skip in -20.0f64..20.0, exec in -20.0f64..20.0) {
        let p = BernoulliLogits::new(skip, exec);
        let pi = p.pi();
        prop_assert!(pi[0] > 0.0 && pi[1] > 0.0);
        prop_assert!((pi[0] + pi[1] - 1.0).abs() < 1e-12);
        prop_assert!((p.alpha() - pi[1]).abs() < 1e-12);
    }

    #[test]
    fn alpha_roundtrips_through_logits(alpha in 1e-6f64..1.0 - 1e-6) {
        prop_assert!((bern(alpha).alpha() - alpha).abs() < 1e-12);
    }

    #[test]
    fn hard_sample_is_argmax(alpha in 1e-6f64..1.0 - 1e-6, g0 in -5.0f64..10.0, g1 in -5.0f64..10.0) {
        let lp = bern(alpha).log_pi();
        prop_assert_eq!(hard_sample(&bern(alpha), [g0, g1]), lp[1] + g1 >= lp[0] + g0);
    }

    #[test]
    fn temperature_never_increases_nor_crosses_the_floor(
        initial in 0.1f64..10.0,
        rate in 0.5f64..=1.0,
        floor in 0.01f64..1.0,
        fires in proptest::collection::vec(any::<bool>(), 0..200),
    ) {
        let mut s = TemperatureSchedule::new(initial, rate, DecayTrigger::EveryEpoch, floor);
        let mut prev = s.tau();
        for f in fires {
            let t = s.step(f);
            prop_assert!(t <= prev && t >= floor);
            prev = t;
        }
    }

    #[test]
    fn straight_through_forward_is_exactly_one_hot(l0 in -10.0f64..10.0, l1 in -10.0f64..10.0, g0 in -3.0f64..8.0, g1 in -3.0f64..8.0, tau in 0.05f64..10.0) {
        let g = Graph::new();
        let logits = g.param(Tensor::new(vec![1, 2], vec![l0, l1]).unwrap());
        let noise = Tensor::new(vec![1, 2], vec![g0, g1]).unwrap();
        let (st, bits) = straight_through_sample(logits, &noise, tau).unwrap();
        let v = st.value();
        prop_assert_eq!(v.data(), if bits[0] { &[0.0, 1.0][..] } else { &[1.0, 0.0][..] });
    }
}

#[test]
fn seeded_streams_are_reproducible_and_distinct() {
    let a: Vec<f64> = (0..5).map({
        let mut r = SeededRng::derive(9, &[1, 2]);
        move |_| r.uniform()
    })
    .collect();
    let b: Vec<f64> = (0..5).map({
        let mut r = SeededRng::derive(9, &[1, 2]);
        move |_| r.uniform()
    })
    .collect();
    let c: Vec<f64> = (0..5).map({
        let mut r = SeededRng::derive(9, &[1, 3]);
        move |_| r.uniform()
    })
    .collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
