//! Generator and schedule networks: a pre-norm transformer with rotary
//! positions and time-conditioned adaptive layer norm.

use crate::config::{Backbone, Method, ModelSection};
use crate::error::{ModelError, Result};
use lflex_autodiff::{concat_cols, Graph, ParamId, ParamStore, Tensor, Var};
use lflex_core::kuma::hazard_shape;
use lflex_core::{CoreError, TokenId, Vocab};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;
/// Added to every softplus rate so it stays strictly positive.
pub const RATE_EPS: f64 = 1e-8;
/// Lower bound on schedule rates produced by the auxiliary heads.
pub const B_FLOOR: f64 = 1e-4;
const INIT_STD: f64 = 0.02;

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect())
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(s: &mut ParamStore, name: &str, i: usize, o: usize, std: f64, bias: f64, rng: &mut impl Rng) -> Self {
        let w = if std > 0.0 {
            normal(rng, i, o, std)
        } else {
            Tensor::zeros(i, o)
        };
        Self {
            w: s.add(format!("{name}.w"), w, true),
            b: s.add(format!("{name}.b"), Tensor::new(1, o, vec![bias; o]), false),
        }
    }

    fn fwd<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        Ok(x.matmul(g.param(s, self.w))?.add(g.param(s, self.b))?)
    }
}

/// Two-layer GELU head mapping each row to `out` scalars.
#[derive(Debug, Clone)]
struct Head {
    l1: Linear,
    l2: Linear,
}

impl Head {
    fn new(s: &mut ParamStore, name: &str, d: usize, out: usize, bias: f64, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(s, &format!("{name}.l1"), d, d, (1.0 / d as f64).sqrt(), 0.0, rng),
            l2: Linear::new(s, &format!("{name}.l2"), d, out, INIT_STD, bias, rng),
        }
    }

    fn fwd<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.l1.fwd(g, s, x)?.gelu();
        self.l2.fwd(g, s, h)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ada: Linear,
    qkv: Linear,
    out: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// `LN(x) * (1 + scale) + shift`.
fn modulate<'g>(x: Var<'g>, shift: Var<'g>, scale: Var<'g>) -> Result<Var<'g>> {
    let h = x.layer_norm_rows(LN_EPS);
    Ok(h.mul(scale.offset(1.0))?.add(shift)?)
}

#[derive(Debug, Clone)]
struct Trunk {
    width: usize,
    heads: usize,
    rope_base: f64,
    embed: ParamId,
    t1: Linear,
    t2: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
}

impl Trunk {
    fn new(
        s: &mut ParamStore,
        name: &str,
        vocab_rows: usize,
        layers: usize,
        width: usize,
        heads: usize,
        mlp_mult: usize,
        rope_base: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = width;
        let proj = (1.0 / d as f64).sqrt();
        let embed = s.add(format!("{name}.embed"), normal(rng, vocab_rows, d, 1.0), false);
        let t1 = Linear::new(s, &format!("{name}.time1"), d, d, proj, 0.0, rng);
        let t2 = Linear::new(s, &format!("{name}.time2"), d, d, proj, 0.0, rng);
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{name}.block{l}");
                let deep = proj / (2.0 * layers as f64).sqrt();
                Block {
                    ada: Linear::new(s, &format!("{p}.ada"), d, 6 * d, 0.0, 0.0, rng),
                    qkv: Linear::new(s, &format!("{p}.qkv"), d, 3 * d, proj, 0.0, rng),
                    out: Linear::new(s, &format!("{p}.out"), d, d, deep, 0.0, rng),
                    fc1: Linear::new(s, &format!("{p}.fc1"), d, mlp_mult * d, proj, 0.0, rng),
                    fc2: Linear::new(
                        s,
                        &format!("{p}.fc2"),
                        mlp_mult * d,
                        d,
                        deep / (mlp_mult as f64).sqrt(),
                        0.0,
                        rng,
                    ),
                }
            })
            .collect();
        let final_ada = Linear::new(s, &format!("{name}.final_ada"), d, 2 * d, 0.0, 0.0, rng);
        Self {
            width,
            heads,
            rope_base,
            embed,
            t1,
            t2,
            blocks,
            final_ada,
        }
    }

    fn time_features(&self, t: f64) -> Tensor {
        let half = self.width / 2;
        let mut v = Vec::with_capacity(self.width);
        for k in 0..half {
            let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            v.push((1000.0 * t * f).cos());
        }
        for k in 0..half {
            let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            v.push((1000.0 * t * f).sin());
        }
        v.resize(self.width, 0.0);
        Tensor::row(v)
    }

    /// Run the trunk over embedding rows `ids` conditioned on time `t`.
    fn fwd<'g>(&self, g: &'g Graph, s: &ParamStore, ids: &[usize], t: f64) -> Result<Var<'g>> {
        let d = self.width;
        let dh = d / self.heads;
        let n = ids.len();
        let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let cond = self.t1.fwd(g, s, g.constant(self.time_features(t)))?.silu();
        let cond = self.t2.fwd(g, s, cond)?.silu();
        let mut x = g.param(s, self.embed).gather_rows(ids)?;
        let att_scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let m = b.ada.fwd(g, s, cond)?;
            let part = |k: usize| m.slice_cols(k * d, d);
            let h = modulate(x, part(0)?, part(1)?)?;
            let qkv = b.qkv.fwd(g, s, h)?;
            let q = qkv.slice_cols(0, d)?.rope(self.heads, &pos, self.rope_base)?;
            let k = qkv.slice_cols(d, d)?.rope(self.heads, &pos, self.rope_base)?;
            let v = qkv.slice_cols(2 * d, d)?;
            let mut outs = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = q.slice_cols(hd * dh, dh)?;
                let kh = k.slice_cols(hd * dh, dh)?;
                let vh = v.slice_cols(hd * dh, dh)?;
                let p = qh.matmul_t(kh)?.scale(att_scale).softmax_rows();
                outs.push(p.matmul(vh)?);
            }
            let att = b.out.fwd(g, s, concat_cols(&outs)?)?;
            x = x.add(att.mul(part(2)?.offset(1.0))?)?;
            let h = modulate(x, part(3)?, part(4)?)?;
            let mlp = b.fc2.fwd(g, s, b.fc1.fwd(g, s, h)?.gelu())?;
            x = x.add(mlp.mul(part(5)?.offset(1.0))?)?;
        }
        let f = self.final_ada.fwd(g, s, cond)?;
        modulate(x, f.slice_cols(0, d)?, f.slice_cols(d, d)?)
    }
}

#[derive(Debug, Clone)]
struct Aux {
    /// `None` when the generator trunk is shared.
    trunk: Option<Trunk>,
    head: Head,
}

/// Differentiable generator outputs for one partial sequence.
pub struct GenVars<'g> {
    /// `1 x (n+1)` insertion rate per gap.
    pub lam_ins: Var<'g>,
    /// `1 x n` unmask rate per index (absent when `n = 0`).
    pub lam_un: Option<Var<'g>>,
    /// `n x V` token log-probabilities (absent when `n = 0`).
    pub log_k: Option<Var<'g>>,
}

/// Per-position schedule rates for a clean sequence. `None` means the rate is
/// fixed at 1 and carries no parameters.
pub struct AuxVars<'g> {
    pub b_ins: Option<Var<'g>>,
    pub b_un: Option<Var<'g>>,
}

/// Generator plus optional schedule network over one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelSection,
    pub vocab: Vocab,
    pub max_len: usize,
    pub store: ParamStore,
    trunk: Trunk,
    k_head: Linear,
    ins_head: Head,
    un_head: Head,
    aux: Option<Aux>,
    mask_bias: Tensor,
}

impl Model {
    pub fn new(cfg: &ModelSection, vocab: Vocab, max_len: usize, rng: &mut impl Rng) -> Result<Self> {
        if !cfg.width.is_multiple_of(cfg.heads) || !(cfg.width / cfg.heads).is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "width {} does not split into {} even heads",
                cfg.width, cfg.heads
            )));
        }
        let v = vocab.size as usize;
        let mut s = ParamStore::new();
        // One extra embedding row for the boundary token.
        let trunk = Trunk::new(
            &mut s,
            "gen",
            v + 1,
            cfg.layers,
            cfg.width,
            cfg.heads,
            cfg.mlp_mult,
            cfg.rope_base,
            rng,
        );
        let k_head = Linear::new(&mut s, "gen.k_head", cfg.width, v, INIT_STD, 0.0, rng);
        let ins_head = Head::new(&mut s, "gen.ins_head", cfg.width, 1, 0.0, rng);
        let un_head = Head::new(&mut s, "gen.un_head", cfg.width, 1, 0.0, rng);
        let aux = match cfg.method {
            Method::Flexmdm => None,
            Method::Lflexmdm => {
                let (trunk, width) = match cfg.backbone {
                    Backbone::Shared => (None, cfg.width),
                    Backbone::Separate => (
                        Some(Trunk::new(
                            &mut s,
                            "aux",
                            v + 1,
                            cfg.aux_layers,
                            cfg.aux_width,
                            cfg.aux_heads,
                            cfg.mlp_mult,
                            cfg.rope_base,
                            rng,
                        )),
                        cfg.aux_width,
                    ),
                };
                let outs = if cfg.freeze_b_un { 1 } else { 2 };
                // softplus(bias) = 1 - B_FLOOR, so fresh schedules start near linear.
                let bias = ((1.0 - B_FLOOR).exp() - 1.0).ln();
                let head = Head::new(&mut s, "aux.b_head", width, outs, bias, rng);
                Some(Aux { trunk, head })
            }
        };
        let mut mask_bias = Tensor::zeros(1, v);
        mask_bias.data[vocab.mask as usize] = -1e30;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            max_len,
            store: s,
            trunk,
            k_head,
            ins_head,
            un_head,
            aux,
            mask_bias,
        })
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    fn ids(&self, prompt: &[TokenId], x: &[TokenId]) -> Result<Vec<usize>> {
        let v = self.vocab.size;
        let bos = v as usize;
        let mut ids = Vec::with_capacity(prompt.len() + x.len() + 1);
        for &tok in prompt.iter().chain(x) {
            if tok >= v {
                return Err(ModelError::Data(format!("token {tok} outside a vocabulary of {v}")));
            }
        }
        ids.extend(prompt.iter().map(|&t| t as usize));
        ids.push(bos);
        ids.extend(x.iter().map(|&t| t as usize));
        Ok(ids)
    }

    /// Rates and token distributions for the partial sequence `x` at time `t`.
    pub fn forward_gen<'g>(&self, g: &'g Graph, prompt: &[TokenId], x: &[TokenId], t: f64) -> Result<GenVars<'g>> {
        if x.len() > self.max_len {
            return Err(CoreError::LengthOverflow {
                len: x.len(),
                max: self.max_len,
            }
            .into());
        }
        let s = &self.store;
        let p = prompt.len();
        let n = x.len();
        let kappa = hazard_shape(t, self.cfg.a)?;
        let h = self.trunk.fwd(g, s, &self.ids(prompt, x)?, t)?;
        let rate = |head: &Head, rows: Var<'g>| -> Result<Var<'g>> {
            Ok(head
                .fwd(g, s, rows)?
                .transpose()
                .softplus()
                .offset(RATE_EPS)
                .scale(kappa))
        };
        let lam_ins = rate(&self.ins_head, h.slice_rows(p, n + 1)?)?;
        let (lam_un, log_k) = if n == 0 {
            (None, None)
        } else {
            let rows = h.slice_rows(p + 1, n)?;
            let logits = self.k_head.fwd(g, s, rows)?.add(g.constant(self.mask_bias.clone()))?;
            (Some(rate(&self.un_head, rows)?), Some(logits.log_softmax_rows()))
        };
        Ok(GenVars { lam_ins, lam_un, log_k })
    }

    /// Schedule rates for every position of the clean answer `z1`.
    pub fn forward_aux<'g>(&self, g: &'g Graph, prompt: &[TokenId], z1: &[TokenId]) -> Result<AuxVars<'g>> {
        let Some(aux) = &self.aux else {
            return Ok(AuxVars {
                b_ins: None,
                b_un: None,
            });
        };
        if z1.is_empty() {
            return Err(ModelError::Data("empty clean sequence".into()));
        }
        let s = &self.store;
        let ids = self.ids(prompt, z1)?;
        let h = match &aux.trunk {
            Some(tr) => tr.fwd(g, s, &ids, 1.0)?,
            None => self.trunk.fwd(g, s, &ids, 1.0)?,
        };
        let rows = h.slice_rows(prompt.len() + 1, z1.len())?;
        let b = aux.head.fwd(g, s, rows)?.softplus().offset(B_FLOOR);
        let b_ins = b.slice_cols(0, 1)?.transpose();
        let b_un = if self.cfg.freeze_b_un {
            None
        } else {
            Some(b.slice_cols(1, 1)?.transpose())
        };
        Ok(AuxVars {
            b_ins: Some(b_ins),
            b_un,
        })
    }
}
