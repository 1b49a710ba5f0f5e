//! Transformer encoder/decoder built on the recorded graph.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::config::{Mode, ModelConfig};
use super::features::Batch;
use super::params::{ModelParams, ParamGroup};
use crate::diffnum::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

/// Graph handles for every model tensor.
pub(crate) struct Vars {
    map: BTreeMap<String, Var>,
}

impl Vars {
    /// Leaves for `params`: trainable for tensors in `trainable`, constant otherwise.
    pub fn leaves(g: &mut Graph, params: &ModelParams, trainable: &[ParamGroup]) -> Self {
        let map = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let train = ParamGroup::of(name).is_some_and(|gr| trainable.contains(&gr));
                let v = if train { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { map }
    }

    /// Pairs existing handles with tensor names in `params` order.
    pub fn from_slice(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.tensors.len() {
            return Err(Error::shape("Vars", format!("{} handles for {} tensors", vars.len(), params.tensors.len())));
        }
        Ok(Self {
            map: params.tensors.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

pub(crate) fn sinusoid(pos: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) as f64 * 2.0;
    let angle = pos as f64 / 10000f64.powf(pair / d as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn positions(b: usize, t: usize, d: usize, offset: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        for pos in 0..t {
            data.extend((0..d).map(|i| sinusoid(offset + pos, i, d)));
        }
    }
    Tensor::new(vec![b, t, d], data).expect("positional table shape")
}

/// Repeats a `[1, ..]` tensor `b` times along the first axis.
pub(crate) fn tile_batch(t: &Tensor, b: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] *= b;
    let mut data = Vec::with_capacity(t.numel() * b);
    for _ in 0..b {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("tiled shape")
}

/// `mask[i * cols + j]` is true where query `i` may not see key `j`.
fn mask_from(rows: usize, cols: usize, hide: impl Fn(usize, usize) -> bool) -> Rc<Vec<bool>> {
    Rc::new((0..rows * cols).map(|k| hide(k / cols, k % cols)).collect())
}

pub(crate) struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub vars: &'a Vars,
}

/// Encoder output arranged as decoder memory.
pub(crate) struct Memory {
    /// `[B, 1 + past, d]`; row 0 is the static start token.
    pub memory: Var,
    /// Posterior mean `[B, past, L]` (absent without history).
    pub mu: Option<Var>,
    /// Posterior sd `[B, past, L]`, latent mode only.
    pub sd: Option<Var>,
}

/// How the latent is formed from the posterior.
pub(crate) enum LatentPath<'a> {
    /// z = posterior mean.
    Mean,
    /// z = mean + sd ⊙ eps, with eps `[B, past, L]`.
    Reparam(&'a Tensor),
    /// A fixed z `[B, past, L]`; the encoder is skipped.
    Given(&'a Tensor),
}

pub(crate) struct Heads {
    /// `[B, K, P]`, scaled units.
    pub mean: Option<Var>,
    /// `[B, K, P]`
    pub logsd: Option<Var>,
    /// Log-rates `[B, K, D]`.
    pub eta: Option<Var>,
}

impl Net<'_> {
    fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.vars.get(&format!("{prefix}.w"))?;
        let b = self.vars.get(&format!("{prefix}.b"))?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }

    fn embed(&self, g: &mut Graph, prefix: &str, x: &Tensor, hours: &[usize], pos: usize) -> Result<Var> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let d = self.cfg.d_model;
        let xv = g.constant(x.clone());
        let h = self.linear(g, &format!("{prefix}.in1"), xv)?;
        let h = g.tanh(h)?;
        let h = self.linear(g, &format!("{prefix}.in2"), h)?;
        let table = self.vars.get(&format!("{prefix}.hour"))?;
        let hv = g.embedding(table, hours)?;
        let hv = g.reshape(hv, &[b, t, d])?;
        let h = g.add(h, hv)?;
        let pe = g.constant(positions(b, t, d, pos));
        g.add(h, pe)
    }

    fn attention(&self, g: &mut Graph, prefix: &str, q_in: Var, kv_in: Var, mask: Option<&Rc<Vec<bool>>>) -> Result<Var> {
        let (b, tq, d) = {
            let s = g.shape(q_in);
            (s[0], s[1], s[2])
        };
        let tk = g.shape(kv_in)[1];
        let h = self.cfg.heads;
        let dh = d / h;
        let q = self.linear(g, &format!("{prefix}.q"), q_in)?;
        let k = self.linear(g, &format!("{prefix}.k"), kv_in)?;
        let v = self.linear(g, &format!("{prefix}.v"), kv_in)?;
        let q = g.reshape(q, &[b, tq, h, dh])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &[b, tk, h, dh])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.reshape(v, &[b, tk, h, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let s = g.matmul(q, kt)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            s = g.masked_fill(s, m.clone(), MASKED)?;
        }
        let a = g.softmax(s)?;
        let o = g.matmul(a, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, tq, d])?;
        self.linear(g, &format!("{prefix}.o"), o)
    }

    fn ffn(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, &format!("{prefix}.ff1"), x)?;
        let h = g.tanh(h)?;
        self.linear(g, &format!("{prefix}.ff2"), h)
    }

    fn residual_norm(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let s = g.add(x, y)?;
        g.layer_norm(s, LN_EPS)
    }

    /// Encodes the batch history and assembles decoder memory.
    pub fn encode(&self, g: &mut Graph, batch: &Batch, latent: LatentPath<'_>) -> Result<Memory> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let stat = if batch.stat.shape()[1] == 0 {
            Tensor::zeros(&[batch.b, 1])
        } else {
            batch.stat.clone()
        };
        let sv = g.constant(stat);
        let start = self.linear(g, "enc.start", sv)?;
        let start = g.reshape(start, &[batch.b, 1, d])?;
        if batch.past == 0 {
            return Ok(Memory {
                memory: start,
                mu: None,
                sd: None,
            });
        }
        if let LatentPath::Given(z) = latent {
            let want = [batch.b, batch.past, cfg.latent_dim];
            if z.shape() != want {
                return Err(Error::shape("decode from z", format!("{:?}, expected {want:?}", z.shape())));
            }
            let zv = g.constant(z.clone());
            let zp = self.linear(g, "enc.z", zv)?;
            let memory = g.concat(&[start, zp], 1)?;
            return Ok(Memory {
                memory,
                mu: None,
                sd: None,
            });
        }
        let mut h = self.embed(g, "enc", &batch.enc, &batch.enc_hours, 0)?;
        let causal = (cfg.mode == Mode::Autoregressive).then(|| mask_from(batch.past, batch.past, |i, j| j > i));
        for l in 0..cfg.enc_layers {
            let a = self.attention(g, &format!("enc.l{l}.self"), h, h, causal.as_ref())?;
            h = self.residual_norm(g, h, a)?;
            let f = self.ffn(g, &format!("enc.l{l}"), h)?;
            h = self.residual_norm(g, h, f)?;
        }
        let mu = self.linear(g, "enc.mu", h)?;
        let sd = if cfg.mode == Mode::Latent {
            let raw = self.linear(g, "enc.sd", h)?;
            let sp = g.softplus(raw)?;
            Some(g.add_scalar(sp, 1e-6)?)
        } else {
            None
        };
        let z = match (latent, sd) {
            (LatentPath::Mean, _) | (LatentPath::Given(_), _) => mu,
            (LatentPath::Reparam(eps), Some(sd)) => {
                if eps.shape() != g.shape(mu) {
                    return Err(Error::shape("reparametrization", format!("{:?} vs {:?}", eps.shape(), g.shape(mu))));
                }
                let e = g.constant(eps.clone());
                let noise = g.mul(sd, e)?;
                g.add(mu, noise)?
            }
            (LatentPath::Reparam(_), None) => {
                return Err(Error::UnsupportedMode {
                    op: "reparametrized latent",
                    mode: cfg.mode.as_str(),
                })
            }
        };
        let zp = self.linear(g, "enc.z", z)?;
        let memory = g.concat(&[start, zp], 1)?;
        Ok(Memory {
            memory,
            mu: Some(mu),
            sd,
        })
    }

    fn decoder(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: &Tensor,
        batch: &Batch,
        memory: Var,
    ) -> Result<Var> {
        let cfg = self.cfg;
        let k = batch.k;
        let m = g.shape(memory)[1];
        let (self_mask, cross_mask) = if cfg.mode == Mode::Autoregressive {
            // One query per hour. Memory row j + 1 holds encoder hour j, and
            // query i sits at encoder position fut_pos + i, so it may read
            // rows 0..=fut_pos + i (the start token and strictly earlier hours).
            let off = batch.fut_pos;
            (
                Some(mask_from(k, k, |i, j| i != j)),
                Some(mask_from(k, m, move |i, j| j > i + off)),
            )
        } else {
            (None, None)
        };
        let mut h = self.embed(g, prefix, x, &batch.fut_hours, batch.fut_pos)?;
        for l in 0..cfg.dec_layers {
            let a = self.attention(g, &format!("{prefix}.l{l}.self"), h, h, self_mask.as_ref())?;
            h = self.residual_norm(g, h, a)?;
            let c = self.attention(g, &format!("{prefix}.l{l}.cross"), h, memory, cross_mask.as_ref())?;
            h = self.residual_norm(g, h, c)?;
            let f = self.ffn(g, &format!("{prefix}.l{l}"), h)?;
            h = self.residual_norm(g, h, f)?;
        }
        Ok(h)
    }

    /// Outcome and/or treatment heads for the batch's future block.
    pub fn decode(&self, g: &mut Graph, batch: &Batch, memory: Var, outcome: bool, treatment: bool) -> Result<Heads> {
        let mut heads = Heads {
            mean: None,
            logsd: None,
            eta: None,
        };
        let (b, k) = (batch.b, batch.k);
        if outcome {
            let h = self.decoder(g, "out", &batch.out, batch, memory)?;
            heads.mean = Some(self.linear(g, "out.head", h)?);
            let table = self.vars.get("out.logsd")?;
            let rows = g.shape(table)[0];
            let ar = self.cfg.mode == Mode::Autoregressive;
            if !ar && k > rows {
                return Err(Error::shape("decode_outcome", format!("horizon {k} exceeds sd table {rows}")));
            }
            let idx: Vec<usize> = (0..b * k).map(|i| if ar { 0 } else { i % k }).collect();
            let p = g.shape(table)[1];
            let ls = g.embedding(table, &idx)?;
            heads.logsd = Some(g.reshape(ls, &[b, k, p])?);
        }
        if treatment {
            let h = self.decoder(g, "trt", &batch.trt, batch, memory)?;
            heads.eta = Some(self.linear(g, "trt.head", h)?);
        }
        Ok(heads)
    }
}
