use lflex_autodiff::{concat_cols, concat_rows, grad_check, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Reduce any output to a scalar with fixed pseudo-random weights so every
/// output element contributes a different amount.
fn project<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let (r, c) = v.shape();
    let w: Vec<f64> = (0..r * c).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let w = v.graph().constant(Tensor::new(r, c, w));
    Ok(v.mul(w)?.sum())
}

fn check<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let rep = grad_check(f, inputs, 1e-5).unwrap();
    assert!(rep.max_rel_err < TOL, "{name}: {rep:?}");
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, 3, 4, -2.0, 2.0);
    for (r, c) in [(3, 4), (1, 4), (3, 1), (1, 1)] {
        let b = rand_t(&mut rng, r, c, 0.5, 2.0);
        check("add", |_, x| project(x[0].add(x[1])?), &[a.clone(), b.clone()]);
        check("sub", |_, x| project(x[0].sub(x[1])?), &[a.clone(), b.clone()]);
        check("mul", |_, x| project(x[0].mul(x[1])?), &[a.clone(), b.clone()]);
        check("div", |_, x| project(x[0].div(x[1])?), &[a.clone(), b.clone()]);
    }
}

#[test]
fn matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_t(&mut rng, 3, 5, -1.0, 1.0);
    let b = rand_t(&mut rng, 5, 2, -1.0, 1.0);
    let bt = rand_t(&mut rng, 4, 5, -1.0, 1.0);
    check("matmul", |_, x| project(x[0].matmul(x[1])?), &[a.clone(), b]);
    check("matmul_t", |_, x| project(x[0].matmul_t(x[1])?), &[a.clone(), bt]);
    check("transpose", |_, x| project(x[0].transpose()), &[a]);
}

#[test]
fn pointwise_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let any = rand_t(&mut rng, 2, 5, -3.0, 3.0);
    let pos = rand_t(&mut rng, 2, 5, 0.3, 3.0);
    check("exp", |_, x| project(x[0].exp()), std::slice::from_ref(&any));
    check("log", |_, x| project(x[0].log()), std::slice::from_ref(&pos));
    check("log1p", |_, x| project(x[0].log1p()), std::slice::from_ref(&pos));
    check("pow", |_, x| project(x[0].powf(1.7)), std::slice::from_ref(&pos));
    check("softplus", |_, x| project(x[0].softplus()), std::slice::from_ref(&any));
    check("sigmoid", |_, x| project(x[0].sigmoid()), std::slice::from_ref(&any));
    check("silu", |_, x| project(x[0].silu()), std::slice::from_ref(&any));
    check("gelu", |_, x| project(x[0].gelu()), std::slice::from_ref(&any));
    check("scale", |_, x| project(x[0].scale(-2.5)), std::slice::from_ref(&any));
    check("offset", |_, x| project(x[0].offset(4.0)), &[any]);
}

#[test]
fn row_normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_t(&mut rng, 3, 6, -2.0, 2.0);
    check("softmax", |_, x| project(x[0].softmax_rows()), std::slice::from_ref(&a));
    check(
        "log_softmax",
        |_, x| project(x[0].log_softmax_rows()),
        std::slice::from_ref(&a),
    );
    check(
        "layer_norm",
        |_, x| project(x[0].layer_norm_rows(1e-5)),
        std::slice::from_ref(&a),
    );
    check("rope", |_, x| project(x[0].rope(3, &[0.0, 1.0, 7.0], 10_000.0)?), &[a]);
}

#[test]
fn reductions_and_indexing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_t(&mut rng, 4, 3, -2.0, 2.0);
    let b = rand_t(&mut rng, 4, 2, -2.0, 2.0);
    let c = rand_t(&mut rng, 2, 3, -2.0, 2.0);
    check("sum", |_, x| x[0].sum().mul(x[0].sum()), std::slice::from_ref(&a));
    check("mean", |_, x| Ok(x[0].mean().exp()), std::slice::from_ref(&a));
    check("sum_rows", |_, x| project(x[0].sum_rows()), std::slice::from_ref(&a));
    check("sum_cols", |_, x| project(x[0].sum_cols()), std::slice::from_ref(&a));
    check(
        "slice_cols",
        |_, x| project(x[0].slice_cols(1, 2)?),
        std::slice::from_ref(&a),
    );
    check(
        "slice_rows",
        |_, x| project(x[0].slice_rows(1, 2)?),
        std::slice::from_ref(&a),
    );
    check(
        "concat_cols",
        |_, x| project(concat_cols(&[x[0], x[1], x[0]])?),
        &[a.clone(), b],
    );
    check(
        "concat_rows",
        |_, x| project(concat_rows(&[x[0], x[1]])?),
        &[a.clone(), c],
    );
    check(
        "gather_rows",
        |_, x| project(x[0].gather_rows(&[3, 0, 3])?),
        std::slice::from_ref(&a),
    );
    check(
        "gather",
        |_, x| project(x[0].gather(&[11, 2, 2, 5])?),
        std::slice::from_ref(&a),
    );
    check(
        "scatter",
        |_, x| project(x[0].gather(&[0, 1, 2])?.scatter(&[5, 0, 5], 2, 4)?),
        &[a],
    );
}

#[test]
fn fused_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = rand_t(&mut rng, 1, 5, 0.1, 3.0);
    let m = rand_t(&mut rng, 1, 5, 0.1, 3.0);
    check("bregman", |_, x| project(x[0].bregman(x[1])?), &[t, m.clone()]);
    let zero_t = Tensor::row(vec![0.0, 1.0, 0.0, 2.0, 0.5]);
    check(
        "bregman zero target",
        |g, x| project(g.constant(zero_t.clone()).bregman(x[0])?),
        &[m],
    );
    let a = rand_t(&mut rng, 1, 3, -1.0, 1.0);
    check(
        "custom_scalar",
        |g, x| {
            let v = x[0].value().data;
            let val = v[0] * v[1] + v[2].sin();
            let s = g.custom_scalar(&[x[0]], val, vec![vec![v[1], v[0], v[2].cos()]])?;
            s.mul(s)
        },
        &[a],
    );
}

#[test]
fn stop_gradient_has_zero_gradient() {
    let g = Graph::new();
    let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
    let y = x.stop_gradient().exp().sum();
    let grads = g.backward(y).unwrap();
    assert!(grads.wrt(x).is_none());
}

#[test]
fn attention_block_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs = rand_t(&mut rng, 4, 4, -1.0, 1.0);
    let wq = rand_t(&mut rng, 4, 4, -0.5, 0.5);
    let wk = rand_t(&mut rng, 4, 4, -0.5, 0.5);
    check(
        "attention",
        |_, x| {
            let h = x[0].layer_norm_rows(1e-5);
            let q = h.matmul(x[1])?.rope(2, &[0.0, 1.0, 2.0, 3.0], 100.0)?;
            let k = h.matmul(x[2])?.rope(2, &[0.0, 1.0, 2.0, 3.0], 100.0)?;
            let p = q.matmul_t(k)?.scale(0.5).softmax_rows();
            project(p.matmul(h)?.gelu())
        },
        &[xs, wq, wk],
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let g = Graph::new();
        let s = g.leaf(Tensor::new(3, 4, v)).softmax_rows().value();
        for r in 0..3 {
            let tot: f64 = s.data[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((tot - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(v in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-3));
        let g = Graph::new();
        let y = g.leaf(Tensor::new(1, 8, v)).layer_norm_rows(1e-12).value();
        let mean = y.data.iter().sum::<f64>() / 8.0;
        let var = y.data.iter().map(|x| x * x).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_preserves_pair_norms(v in prop::collection::vec(-3.0f64..3.0, 8), p in 0.0f64..50.0) {
        let g = Graph::new();
        let y = g.leaf(Tensor::new(1, 8, v.clone())).rope(2, &[p], 10_000.0).unwrap().value();
        for k in 0..4 {
            let a = v[2 * k].hypot(v[2 * k + 1]);
            let b = y.data[2 * k].hypot(y.data[2 * k + 1]);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_products_pass_gradcheck(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, m, k, -1.0, 1.0);
        let b = rand_t(&mut rng, k, n, -1.0, 1.0);
        let rep = grad_check(|_, x| project(x[0].matmul(x[1])?.softplus()), &[a, b], 1e-5).unwrap();
        prop_assert!(rep.max_rel_err < TOL);
    }
}
