use lflex_core::aug::{contract, expand, gap_positions, rmdrop, AugSeq, Vocab};
use lflex_core::cond_path::{event_times_from_uniforms, log_likelihood, state_at};
use lflex_core::kuma::{self, KumaParams};
use lflex_core::loss::{example_loss, rate_divergence};
use lflex_core::metrics::token_accuracy;
use lflex_core::rates::GeneratorOutput;
use lflex_core::star::{answer_is_valid, generate_instance, serialize, StarConfig, StarVocab};
use lflex_core::target_rates::target_bundle;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const V: u32 = 4; // tokens 0..3, MASK = 3
const MASK: u32 = 3;
const DROP: u32 = 4;

fn vocab() -> Vocab {
    Vocab::new(V, MASK).unwrap()
}

fn rate() -> impl Strategy<Value = f64> {
    0.2f64..5.0
}

fn params() -> impl Strategy<Value = KumaParams> {
    (rate(), rate(), rate()).prop_map(|(a, bi, bu)| KumaParams::new(a, bi, bu).unwrap())
}

fn aug_seq(max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..=DROP, 0..=max_len)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = vec![];
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cdf_inverse_round_trip(u in 0.0f64..=0.999, a in rate(), b in 0.5f64..5.0) {
        let t = kuma::inv_cdf(u, a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert!((kuma::cdf(t, a, b).unwrap() - u).abs() <= 1e-12);
    }

    #[test]
    fn cdf_is_monotone(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0, a in rate(), b in rate()) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(kuma::cdf(lo, a, b).unwrap() <= kuma::cdf(hi, a, b).unwrap());
    }

    #[test]
    fn truncated_draw_stays_above(s in 0.0f64..=1.0, u in 0.0f64..=1.0, a in rate(), b in rate()) {
        let t = kuma::trunc_sample(s, a, b, u).unwrap();
        prop_assert!(t >= s && t <= 1.0);
    }

    #[test]
    fn state_probs_are_a_distribution(t in 0.0f64..=1.0, p in params()) {
        let s = kuma::state_probs(t, &p).unwrap();
        prop_assert!(s.drop >= 0.0 && s.mask >= 0.0 && s.unmasked >= 0.0);
        prop_assert!((s.drop + s.mask + s.unmasked - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn masked_integral_continuous_across_branch(t in 0.01f64..0.99, a in rate(), b in rate()) {
        let lo = kuma::masked_integral(t, &KumaParams::new(a, b + 0.999e-6, b).unwrap()).unwrap();
        let hi = kuma::masked_integral(t, &KumaParams::new(a, b + 1.001e-6, b).unwrap()).unwrap();
        prop_assert!((lo - hi).abs() <= 1e-7 * (1.0 + lo.abs()));
    }

    #[test]
    fn linear_schedule_reduction(t in 0.0f64..0.999) {
        let s = kuma::state_probs(t, &KumaParams::linear()).unwrap();
        let l = (1.0 - t).ln();
        prop_assert!((s.drop - (1.0 - t)).abs() <= 1e-12);
        prop_assert!((s.mask + (1.0 - t) * l).abs() <= 1e-12);
        prop_assert!((s.unmasked - (t + (1.0 - t) * l)).abs() <= 1e-12);
    }

    #[test]
    fn order_probs_sum_to_one(b in prop::collection::vec(rate(), 1..=4)) {
        let tot: f64 = permutations(b.len()).iter().map(|p| kuma::order_prob(p, &b).unwrap()).sum();
        prop_assert!((tot - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn contract_expand_round_trip(z in aug_seq(10)) {
        let v = vocab();
        let z = AugSeq::new(z);
        let p = contract(&z, &v);
        prop_assert_eq!(&p.tokens, &rmdrop(&z, &v));
        prop_assert_eq!(expand(&p, &v).unwrap(), z);
    }

    #[test]
    fn gaps_partition_the_drops(z in aug_seq(10)) {
        let v = vocab();
        let z = AugSeq::new(z);
        let p = contract(&z, &v);
        let mut covered = p.positions.clone();
        for i in 0..=p.positions.len() {
            for j in gap_positions(&p.positions, z.len(), i).unwrap() {
                prop_assert_eq!(z.tokens[j - 1], DROP);
                covered.push(j);
            }
        }
        covered.sort_unstable();
        prop_assert_eq!(covered, (1..=z.len()).collect::<Vec<_>>());
    }

    #[test]
    fn paths_are_monotone_and_reachable(
        clean in prop::collection::vec(0u32..MASK, 1..6),
        pad in 0usize..3,
        us in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 8),
        ps in prop::collection::vec(params(), 8),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let v = vocab();
        let z1 = AugSeq::padded(&clean, clean.len() + pad, &v).unwrap();
        let n = z1.len();
        let ev = event_times_from_uniforms(&z1, &ps[..n], &us[..n], &v).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = state_at(lo, &ev, &z1, &v).unwrap();
        let b = state_at(hi, &ev, &z1, &v).unwrap();
        let rank = |x: u32| if x == DROP { 0 } else if x == MASK { 1 } else { 2 };
        for j in 0..n {
            prop_assert!(rank(a.tokens[j]) <= rank(b.tokens[j]));
        }
        let ll = log_likelihood(&a, &z1, lo.clamp(1e-4, 1.0), &ps[..n], &v);
        if lo >= 1e-4 {
            prop_assert!(ll.unwrap() <= 1e-12);
        }
    }

    #[test]
    fn perfect_generator_has_zero_loss(
        clean in prop::collection::vec(0u32..MASK, 1..6),
        states in prop::collection::vec(0u8..3, 6),
        ps in prop::collection::vec(params(), 6),
        t in 0.01f64..0.99,
    ) {
        let v = vocab();
        let n = clean.len();
        let z1 = AugSeq::new(clean.clone());
        let zt = AugSeq::new((0..n).map(|j| match states[j] { 0 => DROP, 1 => MASK, _ => clean[j] }).collect());
        let bundle = target_bundle(&contract(&zt, &v), &z1, t, &ps[..n], &v).unwrap();
        let m = bundle.unmask.len();
        let mut k_probs = vec![vec![0.0; V as usize]; m];
        for i in 0..m {
            match bundle.targets[i] {
                Some(y) => k_probs[i][y as usize] = 1.0,
                None => k_probs[i][0] = 1.0,
            }
        }
        let gen = GeneratorOutput {
            lam_ins: bundle.insert.clone(),
            lam_un: bundle.unmask.clone(),
            k_probs,
        };
        let l = example_loss(&bundle, &gen).unwrap();
        prop_assert!(l.total().abs() <= 1e-12);
        prop_assert!(bundle.insert.iter().sum::<f64>() >= 0.0);
    }

    #[test]
    fn divergence_nonnegative(t in 0.0f64..10.0, m in 1e-6f64..10.0) {
        prop_assert!(rate_divergence(t, m).unwrap() >= 0.0);
    }

    #[test]
    fn token_accuracy_in_unit_interval(a in prop::collection::vec(0u32..5, 0..12), b in prop::collection::vec(0u32..5, 0..12)) {
        let acc = token_accuracy(&a, &b);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn star_instances_are_solvable(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = StarConfig::hard();
        let inst = generate_instance(&cfg, &mut rng).unwrap();
        let (_, answer) = serialize(&inst, &StarVocab { pool: cfg.node_pool }).unwrap();
        prop_assert!(answer_is_valid(&inst, &answer));
        prop_assert_eq!(answer.len(), 2 * inst.path_len());
    }
}
