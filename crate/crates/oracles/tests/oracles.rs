use approx::assert_abs_diff_eq;
use lflex_core::aug::AugSeq;
use lflex_core::kuma::{hazard, masked_integral, state_probs, KumaParams};
use lflex_core::rates::RateModel;
use lflex_oracles::kfe::{single_position, single_position_with};
use lflex_oracles::quad::adaptive_simpson;
use lflex_oracles::{enumerate_tiny, mc, Teacher, TinyData};
use proptest::prelude::*;

const TIMES: [f64; 5] = [0.05, 0.3, 0.5, 0.8, 0.97];

fn kfe_err<H: Fn(f64, f64, f64) -> f64>(h: H, p: &KumaParams) -> f64 {
    let ys = single_position_with(h, p, &TIMES, 400).unwrap();
    TIMES
        .iter()
        .zip(&ys)
        .map(|(&t, y)| {
            let s = state_probs(t, p).unwrap();
            (y[0] - s.drop)
                .abs()
                .max((y[1] - s.mask).abs())
                .max((y[2] - s.unmasked).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn forward_equation_matches_closed_form() {
    for p in [
        KumaParams::linear(),
        KumaParams::new(2.0, 3.0, 0.7).unwrap(),
        KumaParams::new(0.6, 1.5, 1.5).unwrap(),
    ] {
        let err = kfe_err(|t, a, b| hazard(t, a, b).unwrap(), &p);
        assert!(err < 1e-5, "{p:?}: {err}");
    }
}

#[test]
fn corrupted_hazard_is_detected() {
    let p = KumaParams::new(1.5, 2.0, 1.2).unwrap();
    let err = kfe_err(|t, a, b| 1.01 * hazard(t, a, b).unwrap(), &p);
    assert!(err > 1e-4, "a 1% hazard error went unnoticed: {err}");
}

#[test]
fn single_position_states_sum_to_one() {
    let ys = single_position(&KumaParams::new(1.3, 0.8, 2.2).unwrap(), &TIMES, 200).unwrap();
    for y in ys {
        assert_abs_diff_eq!(y.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }
}

#[test]
fn quadrature_matches_masked_integral() {
    for (a, bi, bu) in [(1.0, 2.0, 1.0), (2.5, 0.7, 3.0), (0.8, 1.4, 1.4)] {
        let p = KumaParams::new(a, bi, bu).unwrap();
        let t = 0.7;
        let f = |s: f64| {
            let d = state_probs(s, &p).unwrap();
            let un = 1.0 - (1.0 - s.powf(a)).powf(bu);
            if d.drop >= 1.0 {
                0.0
            } else {
                bi * a * s.powf(a - 1.0) * (1.0 - s.powf(a)).powf(bi - 1.0) / (1.0 - un)
            }
        };
        let q = adaptive_simpson(f, 0.0, t, 1e-12, 50);
        assert_abs_diff_eq!(q, masked_integral(t, &p).unwrap(), epsilon = 1e-8);
    }
}

#[test]
fn teacher_agrees_with_enumerated_projection() {
    let space = enumerate_tiny(3, 2);
    let z1 = AugSeq::new(vec![1, 3, 0]);
    let params = vec![
        KumaParams::new(1.0, 1.5, 2.0).unwrap(),
        KumaParams::new(1.0, 0.8, 1.0).unwrap(),
        KumaParams::new(1.0, 2.5, 0.6).unwrap(),
    ];
    let data = TinyData {
        items: vec![(z1.clone(), 1.0, params.clone())],
    };
    let teacher = Teacher::new(z1, params, space.vocab).unwrap();
    for t in [0.2, 0.55, 0.9] {
        let proj = space.projected_outputs(&data, t).unwrap();
        let mut seen = 0;
        for (x, out) in space.partial.iter().zip(&proj) {
            let Some(want) = out else { continue };
            let got = teacher.rates(&[], x, t).unwrap();
            seen += 1;
            for (a, b) in got.lam_ins.iter().zip(&want.lam_ins) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
            for (a, b) in got.lam_un.iter().zip(&want.lam_un) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
        assert!(seen > 5);
    }
}

#[test]
fn tiny_marginals_are_distributions() {
    let space = enumerate_tiny(2, 2);
    assert_eq!(space.partial.len(), 13);
    let data = TinyData {
        items: vec![
            (AugSeq::new(vec![0, 1]), 0.3, vec![KumaParams::linear(); 2]),
            (
                AugSeq::new(vec![1, 3]),
                0.7,
                vec![KumaParams::new(2.0, 1.0, 3.0).unwrap(); 2],
            ),
        ],
    };
    for t in [0.01, 0.5, 0.99] {
        let p = space.marginal(&data, t).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn monte_carlo_summaries() {
    let (m, se) = mc::mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
    assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
    assert_abs_diff_eq!(se, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(mc::binomial_stderr(0.5, 100), 0.05, epsilon = 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_equation_random_schedules(a in 0.5f64..3.0, bi in 0.5f64..3.0, bu in 0.5f64..3.0) {
        let p = KumaParams::new(a, bi, bu).unwrap();
        let err = kfe_err(|t, a, b| hazard(t, a, b).unwrap(), &p);
        prop_assert!(err < 1e-5, "{err}");
    }
}
