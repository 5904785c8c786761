//! Oracle suites: each check compares an implementation against an
//! independent reference and reports its measured error next to the
//! tolerance it must meet.

use lflex_autodiff::{concat_cols, grad_check, GradStore, Graph, Tensor, Var};
use lflex_core::aug::{contract, rmdrop, AugSeq, Vocab};
use lflex_core::cond_path::log_likelihood_grad;
use lflex_core::kuma::{self, hazard, hazard_shape, inv_cdf, masked_integral, order_prob, state_probs, KumaParams};
use lflex_core::loss::{example_loss, RegConfig};
use lflex_core::rates::GeneratorOutput;
use lflex_core::rng::stream;
use lflex_core::sampler::{sample, SamplerConfig};
use lflex_core::target_rates::target_bundle;
use lflex_core::{par, TokenId};
use lflex_model::config::{Backbone, Method, ModelSection};
use lflex_model::net::Model;
use lflex_model::objective::{example_objective_with_coef, ObjectiveConfig};
use lflex_oracles::kfe::single_position_with;
use lflex_oracles::quad::adaptive_simpson;
use lflex_oracles::tiny::terminal_kl_bound;
use lflex_oracles::{enumerate_tiny, mc, Teacher, TinyData, TinySpace};
use rand::Rng;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantities and the thresholds they were held to.
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const SUITES: &[&str] = &[
    "kfe",
    "quad",
    "reduction",
    "order",
    "grads",
    "reinforce",
    "projected",
    "kl",
    "sampler",
];

/// Run one suite by name, or every suite for `"all"`.
pub fn run_suite(name: &str) -> Option<Vec<Check>> {
    let timed = |name: &str, f: &dyn Fn() -> (bool, String)| {
        let start = Instant::now();
        let (passed, detail) = f();
        Check {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    };
    let one = |s: &str| -> Vec<Check> {
        match s {
            "kfe" => vec![timed("kfe closed form", &|| {
                kfe_check(&|t, a, b| hazard(t, a, b).unwrap_or(f64::NAN))
            })],
            "quad" => vec![timed("masked integral quadrature", &quad_check)],
            "reduction" => vec![timed("linear schedule reduction", &reduction_check)],
            "order" => vec![timed("insertion order probability", &order_check)],
            "grads" => vec![
                timed("autodiff op gradients", &op_grad_check),
                timed("full objective gradient", &objective_grad_check),
                timed("log-likelihood gradient", &loglik_grad_check),
            ],
            "reinforce" => vec![timed("leave-one-out estimator", &reinforce_check)],
            "projected" => vec![timed("projected forward equation", &projected_check)],
            "kl" => vec![timed("terminal KL bound", &kl_check)],
            "sampler" => vec![timed("teacher-forced sampler", &sampler_check)],
            _ => unreachable!(),
        }
    };
    match name {
        "all" => Some(SUITES.iter().flat_map(|s| one(s)).collect()),
        s if SUITES.contains(&s) => Some(one(s)),
        _ => None,
    }
}

fn random_params(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<KumaParams> {
    let mut rng = stream(seed, 0);
    (0..n)
        .map(|_| {
            KumaParams::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)).expect("positive")
        })
        .collect()
}

fn grid50() -> Vec<f64> {
    (1..=50).map(|k| k as f64 / 51.0).collect()
}

pub const KFE_TOL: f64 = 1e-5;

/// Forward-equation integration with hazard `h` against the closed-form
/// state probabilities.
pub fn kfe_check(h: &(dyn Fn(f64, f64, f64) -> f64 + Sync)) -> (bool, String) {
    let times = grid50();
    let params = random_params(11, 25, 0.5, 4.0);
    let errs = par::map_indexed(params.len(), |i| {
        let p = &params[i];
        let ys = single_position_with(h, p, &times, 400).expect("valid params");
        let mut worst: f64 = 0.0;
        for (t, y) in times.iter().zip(ys) {
            let s = state_probs(*t, p).expect("valid time");
            for (a, b) in y.iter().zip([s.drop, s.mask, s.unmasked]) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    });
    let worst = errs.into_iter().fold(0.0, f64::max);
    (
        worst <= KFE_TOL,
        format!("max abs err {worst:.2e} <= {KFE_TOL:.0e} over 25 schedules x 50 times"),
    )
}

pub const QUAD_TOL: f64 = 1e-8;

fn quad_check() -> (bool, String) {
    let times = grid50();
    let mut worst: f64 = 0.0;
    for base in random_params(12, 25, 0.5, 4.0) {
        for gap in [0.0, 1e-7, 1e-3] {
            let p = KumaParams::new(base.a, base.b_ins, base.b_ins - gap).expect("positive");
            for &t in &times {
                // With u = s^a the integrand is b_ins (1-u)^(b_ins - b_un - 1).
                let e = p.b_ins - p.b_un - 1.0;
                let q = adaptive_simpson(|u| p.b_ins * (1.0 - u).powf(e), 0.0, t.powf(p.a), 1e-13, 50);
                let c = masked_integral(t, &p).expect("valid");
                worst = worst.max((q - c).abs() / c.abs().max(1.0));
            }
        }
    }
    (
        worst <= QUAD_TOL,
        format!("max err {worst:.2e} <= {QUAD_TOL:.0e} incl. |b_ins-b_un| in {{0,1e-7,1e-3}}"),
    )
}

fn reduction_check() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for k in 0..=999 {
        let t = k as f64 / 1000.0;
        let s = state_probs(t, &KumaParams::linear()).expect("valid");
        let l = (1.0 - t).ln();
        worst = worst
            .max((s.drop - (1.0 - t)).abs())
            .max((s.mask + (1.0 - t) * l).abs())
            .max((s.unmasked - (t + (1.0 - t) * l)).abs());
    }
    // Generator set to the targets: every Bregman term is exactly zero.
    let vocab = Vocab::new(4, 3).expect("valid");
    let mut rng = stream(13, 0);
    let mut max_loss: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=6);
        let clean: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..3)).collect();
        let z1 = AugSeq::padded(&clean, len + 2, &vocab).expect("fits");
        let params = random_params(rng.gen(), z1.len(), 0.5, 4.0);
        let zt = AugSeq::new(
            z1.tokens
                .iter()
                .map(|&c| {
                    if c == vocab.drop_id() {
                        c
                    } else {
                        [vocab.drop_id(), vocab.mask, c][rng.gen_range(0..3)]
                    }
                })
                .collect(),
        );
        let t = rng.gen_range(0.01..0.99);
        let b = target_bundle(&contract(&zt, &vocab), &z1, t, &params, &vocab).expect("consistent");
        let k_probs = b
            .targets
            .iter()
            .map(|y| {
                let mut row = vec![0.0; 4];
                row[y.unwrap_or(0) as usize] = 1.0;
                row
            })
            .collect();
        let gen = GeneratorOutput {
            lam_ins: b.insert.clone(),
            lam_un: b.unmask.clone(),
            k_probs,
        };
        max_loss = max_loss.max(example_loss(&b, &gen).expect("shapes").total().abs());
    }
    (
        worst <= 1e-12 && max_loss == 0.0,
        format!("closed-form err {worst:.2e} <= 1e-12; loss at target {max_loss:e} == 0"),
    )
}

pub const ORDER_SAMPLES: usize = 1_000_000;

fn order_check() -> (bool, String) {
    let mut rng = stream(14, 0);
    let a = rng.gen_range(0.5..3.0);
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..4.0)).collect();
    let perms: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut counts = [0usize; 6];
    for _ in 0..ORDER_SAMPLES {
        let t: Vec<f64> = b.iter().map(|&bi| inv_cdf(rng.gen(), a, bi).expect("valid")).collect();
        let mut o = [0, 1, 2];
        o.sort_by(|&i, &j| t[i].total_cmp(&t[j]));
        counts[perms.iter().position(|p| *p == o).expect("permutation")] += 1;
    }
    let mut worst_z: f64 = 0.0;
    let mut total = 0.0;
    for (p, &c) in perms.iter().zip(&counts) {
        let exact = order_prob(p, &b).expect("valid");
        total += exact;
        let se = mc::binomial_stderr(exact, ORDER_SAMPLES);
        worst_z = worst_z.max((c as f64 / ORDER_SAMPLES as f64 - exact).abs() / se);
    }
    let sum_err = (total - 1.0).abs();
    (
        worst_z <= 3.0 && sum_err <= 1e-10,
        format!("max |freq-P|/se {worst_z:.2} <= 3 with 1e6 draws; |sum P - 1| {sum_err:.1e} <= 1e-10"),
    )
}

pub const GRAD_TOL: f64 = 1e-4;

fn rand_t(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

fn project<'g>(v: Var<'g>) -> lflex_autodiff::Result<Var<'g>> {
    let (r, c) = v.shape();
    let w: Vec<f64> = (0..r * c).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let w = v.graph().constant(Tensor::new(r, c, w));
    Ok(v.mul(w)?.sum())
}

type OpFn = for<'g> fn(&[Var<'g>]) -> lflex_autodiff::Result<Var<'g>>;

fn op_grad_check() -> (bool, String) {
    let mut rng = stream(15, 0);
    let any = rand_t(&mut rng, 3, 4, -2.0, 2.0);
    let pos = rand_t(&mut rng, 3, 4, 0.3, 3.0);
    let row = rand_t(&mut rng, 1, 4, 0.5, 2.0);
    let col = rand_t(&mut rng, 3, 1, 0.5, 2.0);
    let sq = rand_t(&mut rng, 4, 4, -1.0, 1.0);
    let tall = rand_t(&mut rng, 4, 2, -1.0, 1.0);
    let cases: Vec<(&str, OpFn, Vec<Tensor>)> = vec![
        ("add", |x| project(x[0].add(x[1])?), vec![any.clone(), row.clone()]),
        ("sub", |x| project(x[0].sub(x[1])?), vec![any.clone(), col.clone()]),
        ("mul", |x| project(x[0].mul(x[1])?), vec![any.clone(), pos.clone()]),
        ("div", |x| project(x[0].div(x[1])?), vec![any.clone(), row.clone()]),
        ("matmul", |x| project(x[0].matmul(x[1])?), vec![any.clone(), sq.clone()]),
        (
            "matmul_t",
            |x| project(x[0].matmul_t(x[1])?),
            vec![any.clone(), pos.clone()],
        ),
        ("transpose", |x| project(x[0].transpose()), vec![any.clone()]),
        ("exp", |x| project(x[0].exp()), vec![any.clone()]),
        ("log", |x| project(x[0].log()), vec![pos.clone()]),
        ("log1p", |x| project(x[0].log1p()), vec![pos.clone()]),
        ("powf", |x| project(x[0].powf(1.7)), vec![pos.clone()]),
        ("softplus", |x| project(x[0].softplus()), vec![any.clone()]),
        ("sigmoid", |x| project(x[0].sigmoid()), vec![any.clone()]),
        ("silu", |x| project(x[0].silu()), vec![any.clone()]),
        ("gelu", |x| project(x[0].gelu()), vec![any.clone()]),
        ("softmax_rows", |x| project(x[0].softmax_rows()), vec![any.clone()]),
        (
            "log_softmax_rows",
            |x| project(x[0].log_softmax_rows()),
            vec![any.clone()],
        ),
        (
            "layer_norm_rows",
            |x| project(x[0].layer_norm_rows(1e-5)),
            vec![any.clone()],
        ),
        (
            "rope",
            |x| project(x[0].rope(2, &[0.0, 1.0, 5.0], 100.0)?),
            vec![any.clone()],
        ),
        ("sum_mean", |x| x[0].sum().mul(x[0].mean()), vec![any.clone()]),
        (
            "sum_rows_cols",
            |x| project(x[0].sum_rows())?.add(project(x[0].sum_cols())?),
            vec![any.clone()],
        ),
        (
            "slices",
            |x| project(x[0].slice_cols(1, 2)?)?.add(project(x[0].slice_rows(1, 2)?)?),
            vec![any.clone()],
        ),
        (
            "concat",
            |x| project(concat_cols(&[x[0], x[1]])?),
            vec![sq.clone(), tall.clone()],
        ),
        (
            "gather_scatter",
            |x| {
                project(
                    x[0].gather_rows(&[2, 0, 2])?
                        .gather(&[1, 5, 5])?
                        .scatter(&[3, 0, 3], 2, 2)?,
                )
            },
            vec![any.clone()],
        ),
        (
            "bregman",
            |x| project(x[0].bregman(x[1])?),
            vec![pos.clone(), pos.clone().transpose_copy()],
        ),
    ];
    let mut worst = (0.0, "");
    for (name, f, inputs) in &cases {
        let rep = grad_check(|_g, v| f(v), inputs, 1e-5).expect("shapes");
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name);
        }
    }
    // Stop-gradient is identity forward and zero backward, which finite
    // differences cannot see; check the two halves directly.
    let g = Graph::new();
    let x = g.leaf(any.clone());
    let y = x.stop_gradient();
    let sg_ok = y.value() == any
        && g.backward(y.mul(x).expect("same shape").sum())
            .expect("backward")
            .wrt(x)
            == Some(&any.data[..]);
    (
        worst.0 < GRAD_TOL && sg_ok,
        format!(
            "{} ops, max rel err {:.1e} ({}) < {GRAD_TOL:.0e}; stop-gradient blocks backward: {sg_ok}",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

trait TransposeCopy {
    fn transpose_copy(self) -> Tensor;
}

impl TransposeCopy for Tensor {
    /// Same elements in a different order, so paired inputs differ.
    fn transpose_copy(self) -> Tensor {
        let mut d = self.data.clone();
        d.reverse();
        Tensor::new(self.rows, self.cols, d)
    }
}

fn tiny_model_section(backbone: Backbone, freeze: bool) -> ModelSection {
    ModelSection {
        method: Method::Lflexmdm,
        layers: 1,
        width: 8,
        heads: 2,
        mlp_mult: 2,
        aux_layers: 1,
        aux_width: 8,
        aux_heads: 2,
        backbone,
        freeze_b_un: freeze,
        a: 1.3,
        rope_base: 10_000.0,
    }
}

/// Finite differences of the whole objective, including the schedule
/// network's path through the log-likelihood, with the loss-difference
/// coefficient pinned so the value is smooth.
fn objective_grad_check() -> (bool, String) {
    let vocab = Vocab::new(6, 5).expect("valid");
    let ocfg = ObjectiveConfig {
        lambda_reg: 0.5,
        reg: RegConfig::default(),
    };
    let (prompt, answer) = ([1u32, 4, 2], [3u32, 0, 2, 2, 1]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, (backbone, freeze)) in [(Backbone::Separate, false), (Backbone::Shared, true)]
        .into_iter()
        .enumerate()
    {
        let mut model = Model::new(
            &tiny_model_section(backbone, freeze),
            vocab,
            6,
            &mut stream(16, k as u64),
        )
        .expect("valid");
        let eval = |m: &Model, grads: Option<&mut GradStore>| {
            let g = Graph::new();
            let mut rng = stream(17, k as u64);
            let (v, _) = example_objective_with_coef(&g, m, &ocfg, &prompt, &answer, 0.45, &mut rng, Some(1.3))
                .expect("objective");
            if let Some(gs) = grads {
                g.backward(v).expect("backward").accumulate(gs, 1.0);
            }
            v.item()
        };
        let mut an = GradStore::zeros_like(&model.store);
        eval(&model, Some(&mut an));
        let h = 1e-6;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let n = model.store.get(id).len();
            for j in [0, n / 3, n - 1] {
                let orig = model.store.get(id).data[j];
                model.store.get_mut(id).data[j] = orig + h;
                let up = eval(&model, None);
                model.store.get_mut(id).data[j] = orig - h;
                let dn = eval(&model, None);
                model.store.get_mut(id).data[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = an.get(id)[j];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    (
        worst < GRAD_TOL,
        format!("{checked} parameter entries, max rel err {worst:.1e} < {GRAD_TOL:.0e}"),
    )
}

fn loglik_grad_check() -> (bool, String) {
    let vocab = Vocab::new(4, 3).expect("valid");
    let mut rng = stream(18, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let clean: Vec<TokenId> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let z1 = AugSeq::new(clean.clone());
        let zt = AugSeq::new(
            clean
                .iter()
                .map(|&c| [vocab.drop_id(), vocab.mask, c][rng.gen_range(0..3)])
                .collect(),
        );
        let a = rng.gen_range(0.5..3.0);
        let t = rng.gen_range(0.05..0.95);
        let bi: Vec<f64> = (0..5).map(|_| rng.gen_range(0.3..4.0)).collect();
        let bu: Vec<f64> = (0..5).map(|_| rng.gen_range(0.3..4.0)).collect();
        let logp = |bi: &[f64], bu: &[f64]| {
            let ps: Vec<KumaParams> = bi
                .iter()
                .zip(bu)
                .map(|(&x, &y)| KumaParams::new(a, x, y).expect("pos"))
                .collect();
            log_likelihood_grad(&zt, &z1, t, &ps, &vocab).expect("consistent")
        };
        // The tape node wraps the analytic gradient; compare what flows back
        // through it to central differences of the plain log-likelihood.
        let rep = grad_check(
            |g, x| {
                let (vi, vu) = (x[0].value().data, x[1].value().data);
                let ll = logp(&vi, &vu);
                let s = g.custom_scalar(&[x[0], x[1]], ll.logp, vec![ll.d_b_ins, ll.d_b_un])?;
                Ok(s.scale(0.7))
            },
            &[Tensor::row(bi), Tensor::row(bu)],
            1e-6,
        )
        .expect("shapes");
        worst = worst.max(rep.max_rel_err);
    }
    (
        worst < GRAD_TOL,
        format!("20 random states, max rel err {worst:.1e} < {GRAD_TOL:.0e}"),
    )
}

pub const REINFORCE_PAIRS: usize = 100_000;

/// One position that is either still DROP or already inserted at time `t`.
/// The loss of DROP depends on the schedule through the target rate; the
/// loss of the inserted state is a constant. `rest` stands for the loss of
/// the other positions of a sequence, which does not depend on this state.
fn reinforce_check() -> (bool, String) {
    let (a, b0, t, m, f_ins, rest) = (1.0, 1.5, 0.4, 0.8, 2.0, 5.0);
    let kappa = hazard_shape(t, a).expect("valid");
    let c = (-t.powf(a)).ln_1p();
    let surv = |b: f64| (b * c).exp();
    let d = |lam: f64| lam * (lam / m).ln() - lam + m;
    // d/db of E[f] = S(b) D(b kappa) + (1 - S(b)) f_ins.
    let exact = c * surv(b0) * d(b0 * kappa) + surv(b0) * kappa * (b0 * kappa / m).ln() - c * surv(b0) * f_ins;

    let one = |i: usize, loo: bool| -> f64 {
        let mut rng = stream(19, i as u64);
        let g = Graph::new();
        let b = g.leaf(Tensor::scalar(b0));
        let mut f = vec![];
        let mut lp = vec![];
        for _ in 0..2 {
            let dropped = rng.gen::<f64>() < surv(b0);
            let state = if dropped {
                kuma::PosState::Drop
            } else {
                kuma::PosState::Mask
            };
            let (fv, logp, dlogp) = if dropped {
                let fv = b.scale(kappa).bregman(g.scalar(m)).expect("scalar").offset(rest);
                let s = kuma::state_log_prob(state, t, &KumaParams::new(a, b0, 1.0).expect("pos")).expect("ok");
                (fv, s.logp, s.d_b_ins)
            } else {
                // Inserted means MASK or clean; its probability is 1 - S.
                let s = surv(b0);
                let logp = (-s).ln_1p();
                (g.scalar(f_ins + rest), logp, -c * s / (1.0 - s))
            };
            f.push(fv);
            lp.push(g.custom_scalar(&[b], logp, vec![vec![dlogp]]).expect("scalar"));
        }
        let (f1, f2) = (f[0].item(), f[1].item());
        let mean = f[0].add(f[1]).expect("scalar").scale(0.5);
        let score = if loo {
            lp[0].sub(lp[1]).expect("scalar").scale(0.5 * (f1 - f2))
        } else {
            lp[0].scale(0.5 * f1).add(lp[1].scale(0.5 * f2)).expect("scalar")
        };
        let total = mean.add(score).expect("scalar");
        g.backward(total).expect("backward").wrt(b).map(|v| v[0]).unwrap_or(0.0)
    };
    let loo: Vec<f64> = par::map_indexed(REINFORCE_PAIRS, |i| one(i, true));
    let plain: Vec<f64> = par::map_indexed(REINFORCE_PAIRS, |i| one(i, false));
    let (m_loo, se_loo) = mc::mean_stderr(&loo);
    let (m_plain, _) = mc::mean_stderr(&plain);
    let (v_loo, v_plain) = (mc::variance(&loo), mc::variance(&plain));
    let z = (m_loo - exact).abs() / se_loo;
    let mut detail = String::new();
    let _ = write!(
        detail,
        "exact {exact:.5}, LOO mean {m_loo:.5} (|z| {z:.2} <= 4), var LOO {v_loo:.4} < no-baseline {v_plain:.4} (mean {m_plain:.5})"
    );
    (z <= 4.0 && v_loo < v_plain, detail)
}

fn tiny_data(space: &TinySpace, seed: u64, lo: f64, hi: f64) -> TinyData {
    let mut rng = stream(seed, 0);
    let items = space
        .clean
        .iter()
        .map(|c| {
            let z1 = AugSeq::padded(c, space.len, &space.vocab).expect("fits");
            (z1, rng.gen_range(0.2..1.0), random_params(rng.gen(), space.len, lo, hi))
        })
        .collect::<Vec<_>>();
    let tot: f64 = items.iter().map(|x| x.1).sum();
    TinyData {
        items: items.into_iter().map(|(z, w, p)| (z, w / tot, p)).collect(),
    }
}

pub const PROJECTED_TOL: f64 = 1e-4;

fn projected_check() -> (bool, String) {
    let space = enumerate_tiny(3, 2);
    let data = tiny_data(&space, 20, 0.5, 3.0);
    let times = [0.2, 0.5, 0.8, 0.95];
    let t0 = 1e-3;
    let ys = space.integrate_projected(&data, t0, &times, 150).expect("valid");
    let mut worst: f64 = 0.0;
    for (t, y) in times.iter().zip(&ys) {
        let p = space.marginal(&data, *t).expect("valid");
        for (a, b) in y.iter().zip(&p) {
            worst = worst.max((a - b).abs());
        }
    }
    (
        worst <= PROJECTED_TOL,
        format!(
            "L=3 V=2, {} states, max abs err {worst:.2e} <= {PROJECTED_TOL:.0e}",
            space.partial.len()
        ),
    )
}

pub const KL_SLACK: f64 = 1e-3;

fn kl_check() -> (bool, String) {
    let space = enumerate_tiny(3, 2);
    let data = tiny_data(&space, 21, 0.7, 2.0);
    let (t0, t1) = (1e-3, 0.99);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut detail = String::new();
    for k in 0..5u64 {
        // Multiplicative noise fixed per (state, slot), so the perturbed
        // generator is a smooth function of time.
        let noise = |i: usize, j: usize, s: u64| {
            let h = (i as u64)
                .wrapping_mul(0x9E37_79B9)
                .wrapping_add((j as u64) << 20)
                .wrapping_add(s << 40)
                ^ (k << 56);
            let u: f64 = stream(22, h).gen();
            (0.6 * (u - 0.5)).exp()
        };
        let gen = |t: f64| {
            let outs = space.projected_outputs(&data, t).expect("valid");
            outs.into_iter()
                .enumerate()
                .map(|(i, base)| {
                    let n = space.partial[i].len();
                    let mut o = base.unwrap_or(GeneratorOutput {
                        lam_ins: vec![0.0; n + 1],
                        lam_un: vec![0.0; n],
                        k_probs: vec![vec![0.0; space.vocab.size as usize]; n],
                    });
                    for (j, r) in o.lam_ins.iter_mut().enumerate() {
                        *r *= noise(i, j, 0);
                    }
                    for (j, r) in o.lam_un.iter_mut().enumerate() {
                        *r *= noise(i, j, 1);
                    }
                    for (j, row) in o.k_probs.iter_mut().enumerate() {
                        let mut tot = 0.0;
                        for (y, p) in row.iter_mut().enumerate() {
                            *p *= noise(i, j * 8 + y, 2);
                            tot += *p;
                        }
                        if tot > 0.0 {
                            row.iter_mut().for_each(|p| *p /= tot);
                        }
                    }
                    o
                })
                .collect()
        };
        let r = terminal_kl_bound(&space, &data, gen, t0, t1, 120).expect("valid");
        worst_gap = worst_gap.max(r.kl - r.integrated_loss);
        let _ = write!(detail, "KL {:.4} <= loss {:.4}; ", r.kl, r.integrated_loss);
    }
    detail.push_str(&format!("slack {KL_SLACK:.0e}"));
    (worst_gap <= KL_SLACK, detail)
}

pub const RECOVERY_MIN: f64 = 0.99;
pub const RECOVERY_RUNS: usize = 2000;

/// Schedules for the teacher-forced sampler instances. Every position shares
/// `a = 1`, as in the trained models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    /// `b_ins` and `b_un` drawn uniformly from `[1, 3]` per position.
    Learned,
    /// `a = b = 1` everywhere, the FlexMDM schedule.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub len: usize,
    pub at_n: f64,
    pub at_2n: f64,
    pub runs: usize,
}

impl Recovery {
    pub fn sigma(&self) -> f64 {
        let r = self.runs as f64;
        ((self.at_n * (1.0 - self.at_n) + self.at_2n * (1.0 - self.at_2n)) / r)
            .sqrt()
            .max(1.0 / r)
    }

    pub fn passed(&self) -> bool {
        self.at_n >= RECOVERY_MIN && self.at_2n >= self.at_n - 2.0 * self.sigma()
    }
}

/// Frequency with which teacher-forced tau-leaping returns the clean
/// sequence, at 1024 and 2048 steps, for lengths 3, 5 (one pad) and 6.
pub fn sampler_recovery(family: ScheduleFamily, runs: usize) -> Vec<Recovery> {
    let vocab = Vocab::new(4, 3).expect("valid");
    let mut rng = stream(23, family as u64);
    let mut out = Vec::new();
    for (case, (len, pad)) in [(3usize, 0usize), (5, 1), (6, 0)].into_iter().enumerate() {
        let clean: Vec<TokenId> = (0..len - pad).map(|_| rng.gen_range(0..3)).collect();
        let z1 = AugSeq::padded(&clean, len, &vocab).expect("fits");
        let params = (0..len)
            .map(|_| match family {
                ScheduleFamily::Learned => KumaParams::new(1.0, rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0)),
                ScheduleFamily::Linear => Ok(KumaParams::linear()),
            })
            .collect::<lflex_core::Result<Vec<_>>>()
            .expect("positive");
        let teacher = Teacher::new(z1.clone(), params, vocab).expect("valid");
        let want = rmdrop(&z1, &vocab);
        let rate = |steps: usize| {
            let cfg = SamplerConfig {
                steps,
                max_len: len,
                ..SamplerConfig::default()
            };
            let hits = par::map_indexed(runs, |i| {
                let mut r = stream(24 + case as u64, (steps as u64) << 32 | i as u64);
                matches!(sample(&teacher, &[], &cfg, &mut r), Ok(o) if o.tokens == want)
            });
            hits.iter().filter(|&&h| h).count() as f64 / runs as f64
        };
        out.push(Recovery {
            len,
            at_n: rate(1024),
            at_2n: rate(2048),
            runs,
        });
    }
    out
}

pub fn describe_recovery(rs: &[Recovery]) -> String {
    let mut detail = String::new();
    for r in rs {
        let _ = write!(detail, "L={}: {:.4} (N=1024), {:.4} (N=2048); ", r.len, r.at_n, r.at_2n);
    }
    let _ = write!(
        detail,
        "{} runs, need >= {RECOVERY_MIN} and no drop beyond 2 sigma",
        rs[0].runs
    );
    detail
}

fn sampler_check() -> (bool, String) {
    let rs = sampler_recovery(ScheduleFamily::Learned, RECOVERY_RUNS);
    (rs.iter().all(Recovery::passed), describe_recovery(&rs))
}
