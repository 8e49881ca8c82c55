use std::sync::Arc;

use super::site::{Hooks, SiteKind, Stream};
use super::{ModelConfig, Param, Result};
use crate::tensor::{Graph, Tensor, Var};

pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncLayer {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    mlp: MlpIdx,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecLayer {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross: AttnIdx,
    ln3: NormIdx,
    mlp: MlpIdx,
}

/// Parameter indices in the fixed declared order used by checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: NormIdx,
    dec: Vec<DecLayer>,
    dec_ln: NormIdx,
    out_w: Option<usize>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Normal(std));
        let b = self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            g: self.add(format!("{prefix}.g"), &[d], Init::Ones),
            b: self.add(format!("{prefix}.b"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d);
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, ff: usize) -> MlpIdx {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, ff);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), ff, d);
        MlpIdx { w1, b1, w2, b2 }
    }
}

impl Layout {
    pub(crate) fn build(c: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
        let d = c.d_model;
        let mut b = Builder { specs: Vec::new() };
        let tok_emb = b.add("tok_emb".into(), &[c.vocab_size, d], Init::Normal(1.0));
        let enc_pos = b.add("enc_pos".into(), &[c.max_len, d], Init::Normal(0.5));
        let dec_pos = b.add("dec_pos".into(), &[c.max_len, d], Init::Normal(0.5));
        let enc = (0..c.n_enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    mlp: b.mlp(&format!("{p}.mlp"), d, c.d_ff),
                }
            })
            .collect();
        let enc_ln = b.norm("enc.ln_f", d);
        let dec = (0..c.n_dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross: b.attn(&format!("{p}.cross"), d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    mlp: b.mlp(&format!("{p}.mlp"), d, c.d_ff),
                }
            })
            .collect();
        let dec_ln = b.norm("dec.ln_f", d);
        let out_w = (!c.tie_output).then(|| {
            b.add(
                "out.w".into(),
                &[c.vocab_size, d],
                Init::Normal(1.0 / (d as f64).sqrt()),
            )
        });
        (
            Layout {
                tok_emb,
                enc_pos,
                dec_pos,
                enc,
                enc_ln,
                dec,
                dec_ln,
                out_w,
            },
            b.specs,
        )
    }

    /// Registers parameters as graph leaves, trainable or constant.
    pub(crate) fn bind(&self, g: &mut Graph, params: &[Param], trainable: bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(Arc::clone(&p.value))
                } else {
                    g.constant_arc(Arc::clone(&p.value))
                }
            })
            .collect()
    }
}

fn linear(g: &mut Graph, pv: &[Var], x: Var, w: usize, b: usize) -> Result<Var> {
    let y = g.matmul(x, pv[w])?;
    Ok(g.add_row(y, pv[b])?)
}

fn norm(g: &mut Graph, pv: &[Var], x: Var, n: &NormIdx, eps: f64) -> Result<Var> {
    Ok(g.layer_norm(x, pv[n.g], pv[n.b], eps)?)
}

fn attention(
    c: &ModelConfig,
    g: &mut Graph,
    pv: &[Var],
    q_in: Var,
    kv_in: Var,
    a: &AttnIdx,
    causal: bool,
) -> Result<Var> {
    let q = linear(g, pv, q_in, a.wq, a.bq)?;
    let k = linear(g, pv, kv_in, a.wk, a.bk)?;
    let v = linear(g, pv, kv_in, a.wv, a.bv)?;
    let (tq, tk) = (g.value(q).rows(), g.value(k).rows());
    let hd = c.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mask = causal.then(|| {
        let mut m = Tensor::zeros(&[tq, tk]);
        for i in 0..tq {
            for j in i + 1..tk {
                m.data_mut()[i * tk + j] = -1e9;
            }
        }
        m
    });
    let mut heads = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let s = g.matmul_nt(qh, kh)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = &mask {
            s = g.add_const(s, m)?;
        }
        let p = g.softmax_rows(s)?;
        heads.push(g.matmul(p, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, pv, cat, a.wo, a.bo)
}

fn mlp(g: &mut Graph, pv: &[Var], x: Var, m: &MlpIdx) -> Result<Var> {
    let h = linear(g, pv, x, m.w1, m.b1)?;
    let h = g.gelu(h)?;
    linear(g, pv, h, m.w2, m.b2)
}

fn embed(g: &mut Graph, pv: &[Var], tok: usize, pos: usize, ids: &[usize]) -> Result<Var> {
    let e = g.gather_rows(pv[tok], ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = g.gather_rows(pv[pos], &positions)?;
    Ok(g.add(e, p)?)
}

/// Encoder stack; returns the final-normed output `[T × d]`.
pub(crate) fn encode(
    c: &ModelConfig,
    lay: &Layout,
    g: &mut Graph,
    pv: &[Var],
    ids: &[usize],
    hooks: &mut Hooks<'_>,
) -> Result<Var> {
    let s = Stream::Encoder;
    let x = embed(g, pv, lay.tok_emb, lay.enc_pos, ids)?;
    let mut x = hooks.visit(g, s, SiteKind::Embedding, None, x)?;
    for (l, layer) in lay.enc.iter().enumerate() {
        let h = norm(g, pv, x, &layer.ln1, c.ln_eps)?;
        let a = attention(c, g, pv, h, h, &layer.attn, false)?;
        let a = hooks.visit(g, s, SiteKind::AttnOut, Some(l), a)?;
        let mid = g.add(x, a)?;
        let h = norm(g, pv, mid, &layer.ln2, c.ln_eps)?;
        let m = mlp(g, pv, h, &layer.mlp)?;
        let m = hooks.visit(g, s, SiteKind::MlpOut, Some(l), m)?;
        let out = g.add(mid, m)?;
        x = hooks.visit(g, s, SiteKind::Hidden, Some(l), out)?;
    }
    norm(g, pv, x, &lay.enc_ln, c.ln_eps)
}

/// Decoder stack over `enc`; returns logits `[S × vocab]`.
pub(crate) fn decode(
    c: &ModelConfig,
    lay: &Layout,
    g: &mut Graph,
    pv: &[Var],
    enc: Var,
    ids: &[usize],
    hooks: &mut Hooks<'_>,
) -> Result<Var> {
    let s = Stream::Decoder;
    let x = embed(g, pv, lay.tok_emb, lay.dec_pos, ids)?;
    let mut x = hooks.visit(g, s, SiteKind::Embedding, None, x)?;
    for (l, layer) in lay.dec.iter().enumerate() {
        let h = norm(g, pv, x, &layer.ln1, c.ln_eps)?;
        let a = attention(c, g, pv, h, h, &layer.self_attn, true)?;
        let x1 = g.add(x, a)?;
        let h = norm(g, pv, x1, &layer.ln2, c.ln_eps)?;
        let ca = attention(c, g, pv, h, enc, &layer.cross, false)?;
        let ca = hooks.visit(g, s, SiteKind::AttnOut, Some(l), ca)?;
        let x2 = g.add(x1, ca)?;
        let h = norm(g, pv, x2, &layer.ln3, c.ln_eps)?;
        let m = mlp(g, pv, h, &layer.mlp)?;
        let m = hooks.visit(g, s, SiteKind::MlpOut, Some(l), m)?;
        let out = g.add(x2, m)?;
        x = hooks.visit(g, s, SiteKind::Hidden, Some(l), out)?;
    }
    let h = norm(g, pv, x, &lay.dec_ln, c.ln_eps)?;
    let w = lay.out_w.unwrap_or(lay.tok_emb);
    Ok(g.matmul_nt(h, pv[w])?)
}

/// Training loss for one `(input, target)` pair: mean token cross-entropy
/// with the decoder fed `[BOS] + target` and predicting `target + [EOS]`.
pub(crate) fn example_loss(
    c: &ModelConfig,
    lay: &Layout,
    g: &mut Graph,
    pv: &[Var],
    input: &[usize],
    target: &[usize],
) -> Result<Var> {
    let mut hooks = Hooks::none();
    let enc = encode(c, lay, g, pv, input, &mut hooks)?;
    let mut dec_in = vec![super::BOS];
    dec_in.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(super::EOS);
    let logits = decode(c, lay, g, pv, enc, &dec_in, &mut hooks)?;
    Ok(g.cross_entropy(logits, &gold)?)
}
