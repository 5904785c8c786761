use lflex_autodiff::{GradStore, Graph};
use lflex_core::loss::RegConfig;
use lflex_core::rates::RateModel;
use lflex_core::Vocab;
use lflex_model::checkpoint;
use lflex_model::config::{Backbone, Method, RunConfig};
use lflex_model::net::Model;
use lflex_model::objective::{example_objective_with_coef, ObjectiveConfig};
use lflex_model::train::{self, Example, RunOptions, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Real tokens 0..4, 4 = separator, MASK = 5.
fn vocab() -> Vocab {
    Vocab::new(6, 5).unwrap()
}

fn tiny_cfg(method: Method, backbone: Backbone, freeze: bool) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.method = method;
    c.model.backbone = backbone;
    c.model.freeze_b_un = freeze;
    c.model.layers = 1;
    c.model.width = 8;
    c.model.heads = 2;
    c.model.mlp_mult = 2;
    c.model.aux_layers = 1;
    c.model.aux_width = 8;
    c.model.aux_heads = 2;
    c.train.batch = 4;
    c.train.shards = 2;
    c.train.warmup = 1;
    c.train.lr = 1e-2;
    c
}

fn tiny_model(c: &RunConfig, seed: u64) -> Model {
    Model::new(&c.model, vocab(), 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn ocfg() -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_reg: 0.7,
        reg: RegConfig::default(),
    }
}

const PROMPT: [u32; 3] = [1, 4, 2];
const ANSWER: [u32; 5] = [3, 0, 2, 2, 1];

fn objective_value(model: &Model, t: f64, seed: u64, coef: f64) -> f64 {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, _) = example_objective_with_coef(&g, model, &ocfg(), &PROMPT, &ANSWER, t, &mut rng, Some(coef)).unwrap();
    v.item()
}

fn objective_grad(model: &Model, t: f64, seed: u64, coef: f64) -> GradStore {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, _) = example_objective_with_coef(&g, model, &ocfg(), &PROMPT, &ANSWER, t, &mut rng, Some(coef)).unwrap();
    let mut gs = GradStore::zeros_like(&model.store);
    g.backward(v).unwrap().accumulate(&mut gs, 1.0);
    gs
}

#[test]
fn full_objective_matches_finite_differences() {
    for (backbone, freeze) in [(Backbone::Separate, false), (Backbone::Shared, true)] {
        let c = tiny_cfg(Method::Lflexmdm, backbone, freeze);
        let mut model = tiny_model(&c, 3);
        let (t, seed, coef) = (0.55, 11, 1.7);
        let an = objective_grad(&model, t, seed, coef);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let n = model.store.get(id).len();
            for k in [0, n / 2, n - 1] {
                let orig = model.store.get(id).data[k];
                model.store.get_mut(id).data[k] = orig + h;
                let up = objective_value(&model, t, seed, coef);
                model.store.get_mut(id).data[k] = orig - h;
                let dn = objective_value(&model, t, seed, coef);
                model.store.get_mut(id).data[k] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = an.get(id)[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{k}]: tape {a} fd {fd}", model.store.name(id));
                worst = worst.max(rel);
                checked += 1;
            }
        }
        assert!(checked > 40, "{checked}");
        assert!(worst < 1e-4);
    }
}

#[test]
fn score_term_gradient_is_linear_in_the_frozen_coefficient() {
    let c = tiny_cfg(Method::Lflexmdm, Backbone::Separate, false);
    let model = tiny_model(&c, 5);
    let g0 = objective_grad(&model, 0.4, 2, 0.0);
    let g1 = objective_grad(&model, 0.4, 2, 1.0);
    let g2 = objective_grad(&model, 0.4, 2, 2.0);
    let mut any = false;
    for ((a, b), c) in g0
        .grads
        .iter()
        .flatten()
        .zip(g1.grads.iter().flatten())
        .zip(g2.grads.iter().flatten())
    {
        assert!(((c - b) - (b - a)).abs() < 1e-10 * (1.0 + a.abs() + b.abs()));
        any |= (b - a).abs() > 1e-8;
    }
    assert!(any, "score term has no gradient");
}

#[test]
fn generator_outputs_are_well_formed_and_pure() {
    let c = tiny_cfg(Method::Lflexmdm, Backbone::Separate, true);
    let model = tiny_model(&c, 1);
    for x in [vec![], vec![5, 1], vec![5, 5, 0, 3, 5, 2]] {
        let out = model.rates(&PROMPT, &x, 0.3).unwrap();
        assert_eq!(out.lam_ins.len(), x.len() + 1);
        assert_eq!(out.lam_un.len(), x.len());
        assert_eq!(out.k_probs.len(), x.len());
        assert!(out.lam_ins.iter().chain(&out.lam_un).all(|&r| r > 0.0 && r.is_finite()));
        for row in &out.k_probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(row[5], 0.0, "MASK must get no probability");
        }
        assert_eq!(out, model.rates(&PROMPT, &x, 0.3).unwrap());
    }
    assert!(model.rates(&PROMPT, &[0; 7], 0.3).is_err(), "length overflow");
}

#[test]
fn schedule_network_initialization_and_freezing() {
    let g = Graph::new();
    let frozen = tiny_model(&tiny_cfg(Method::Lflexmdm, Backbone::Separate, true), 1);
    let aux = frozen.forward_aux(&g, &PROMPT, &ANSWER).unwrap();
    assert!(aux.b_un.is_none());
    for b in aux.b_ins.unwrap().value().data {
        assert!((b - 1.0).abs() < 0.1, "{b}");
    }
    let free = tiny_model(&tiny_cfg(Method::Lflexmdm, Backbone::Separate, false), 1);
    let aux = free.forward_aux(&g, &PROMPT, &ANSWER).unwrap();
    assert_eq!(aux.b_un.unwrap().len(), ANSWER.len());
    let base = tiny_model(&tiny_cfg(Method::Flexmdm, Backbone::Separate, true), 1);
    assert!(!base.has_aux());
    assert!(base.store.names().iter().all(|n| n.starts_with("gen.")));
}

#[test]
fn shared_backbone_feeds_the_schedule_heads() {
    let c = tiny_cfg(Method::Lflexmdm, Backbone::Shared, true);
    let mut model = tiny_model(&c, 4);
    assert!(model
        .store
        .names()
        .iter()
        .all(|n| !n.starts_with("aux.") || n.starts_with("aux.b_head")));
    let b = |m: &Model| {
        let g = Graph::new();
        m.forward_aux(&g, &PROMPT, &ANSWER).unwrap().b_ins.unwrap().value().data
    };
    let before = b(&model);
    let id = model.store.find("gen.block0.qkv.w").unwrap();
    model.store.get_mut(id).data.iter_mut().for_each(|x| *x *= 3.0);
    assert_ne!(before, b(&model));
}

fn toy_data() -> Vec<Example> {
    let mut out = vec![];
    for a in 0..4u32 {
        for b in 0..4u32 {
            out.push(Example {
                prompt: vec![a, 4, b],
                answer: vec![b, a, b],
            });
        }
    }
    out
}

#[test]
fn training_is_deterministic_and_resumable() {
    let mut c = tiny_cfg(Method::Lflexmdm, Backbone::Separate, true);
    c.train.steps = 6;
    let run = |c: &RunConfig| {
        let mut tr = Trainer::new(c.clone(), vocab(), 6, toy_data()).unwrap();
        (0..c.train.steps)
            .map(|_| {
                let m = tr.step().unwrap();
                (m.stats, m.grad_norm)
            })
            .collect::<Vec<_>>()
    };
    let a = run(&c);
    assert_eq!(a, run(&c));

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions::default();
    let mut whole = Trainer::new(c.clone(), vocab(), 6, toy_data()).unwrap();
    train::run(&mut whole, &dir.path().join("whole"), &opts).unwrap();

    let mut half = c.clone();
    half.train.steps = 3;
    let mut tr = Trainer::new(half, vocab(), 6, toy_data()).unwrap();
    let ck = train::run(&mut tr, &dir.path().join("split"), &opts).unwrap();
    let mut resumed = Trainer::resume(checkpoint::load(&ck).unwrap(), c.clone(), toy_data()).unwrap();
    assert_eq!(resumed.next_step, 3);
    train::run(&mut resumed, &dir.path().join("split"), &opts).unwrap();

    for f in [train::METRICS_FILE, train::CHECKPOINT_FILE] {
        let x = std::fs::read(dir.path().join("whole").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("split").join(f)).unwrap();
        assert!(x == y, "{f} differs after resume");
    }

    let mut other = c.clone();
    other.model.a = 2.0;
    assert!(Trainer::resume(checkpoint::load(&ck).unwrap(), other, toy_data()).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let c = tiny_cfg(Method::Lflexmdm, Backbone::Separate, false);
    let tr = Trainer::new(c.clone(), vocab(), 6, toy_data()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.bin");
    tr.save(&p).unwrap();
    let ck = checkpoint::load(&p).unwrap();
    assert_eq!(ck.config, c);
    for id in tr.model.store.ids() {
        assert_eq!(ck.model.store.get(id), tr.model.store.get(id));
    }
    assert_eq!(ck.opt.unwrap(), tr.opt);

    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load(&p).is_err());
    std::fs::write(&p, b"not a checkpoint\n{}\n").unwrap();
    assert!(checkpoint::load(&p).is_err());
}

#[test]
fn baseline_has_no_score_term() {
    let mut c = tiny_cfg(Method::Flexmdm, Backbone::Separate, true);
    c.train.steps = 2;
    let mut tr = Trainer::new(c, vocab(), 6, toy_data()).unwrap();
    let m = tr.step().unwrap();
    assert_eq!(m.stats.score_abs, 0.0);
    assert_eq!(m.stats.reg, 0.0);
}

#[test]
fn adamw_reference_steps() {
    use lflex_autodiff::{AdamW, ParamStore, Tensor};
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::scalar(1.0), true);
    let mut g = GradStore::zeros_like(&s);
    g.grads[0][0] = 1.0;
    let mut o = AdamW::new(&s, 0.1, 0.0);
    o.eps = 0.0;
    o.update(&mut s, &g, 0.1);
    assert!((s.get(id).data[0] - 0.9).abs() < 1e-12);
    o.update(&mut s, &g, 0.0);
    assert!((s.get(id).data[0] - 0.9).abs() < 1e-12);
}
