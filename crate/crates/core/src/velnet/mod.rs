//! Conditional average-velocity network `u(z, r, t, c)`.
//!
//! Layout: the conditioning field and the noisy state are concatenated
//! channel-wise and projected per grid cell into tokens; a stack of gated
//! blocks modulated by the (t, r) embedding follows; a linear head maps
//! tokens back to a field. Every modulation map and the output head start
//! at exactly zero, so a fresh network is the zero field.

mod checkpoint;
mod config;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Mixing, NetConfig};

use crate::diffkit::{RngStream, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::transport::VelocityField;

/// RMS normalization floor.
pub const RMS_EPS: f64 = 1e-6;
const FREQ_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitClass {
    /// Zero-mean uniform on ±1/sqrt(fan_in).
    Uniform { fan_in: usize },
    Zero,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub init: InitClass,
}

/// All learnable tensors of the network, in a fixed order.
#[derive(Clone, Debug)]
pub struct NetParams {
    config: NetConfig,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, InitClass)> {
    let (c, d, e, f) = (cfg.channels, cfg.hidden_dim, cfg.embed_dim, cfg.ffn_dim());
    let u = |fan_in| InitClass::Uniform { fan_in };
    let mut v: Vec<(String, Vec<usize>, InitClass)> = vec![
        ("in_proj.w".into(), vec![2 * c, d], u(2 * c)),
        ("in_proj.b".into(), vec![d], u(2 * c)),
    ];
    for which in ["t_embed", "r_embed"] {
        v.push((format!("{which}.w1"), vec![e, e], u(e)));
        v.push((format!("{which}.b1"), vec![e], u(e)));
        v.push((format!("{which}.w2"), vec![e, e], u(e)));
        v.push((format!("{which}.b2"), vec![e], u(e)));
    }
    for l in 0..cfg.depth {
        v.push((format!("blocks.{l}.mod.w"), vec![e, 6 * d], InitClass::Zero));
        v.push((format!("blocks.{l}.mod.b"), vec![6 * d], InitClass::Zero));
        match cfg.mixing {
            Mixing::PerCellDense => {
                v.push((format!("blocks.{l}.mix.w"), vec![d, d], u(d)));
                v.push((format!("blocks.{l}.mix.b"), vec![d], u(d)));
            }
            Mixing::FullAttention => {
                for m in ["q", "k", "v", "o"] {
                    v.push((format!("blocks.{l}.attn.{m}"), vec![d, d], u(d)));
                }
            }
        }
        v.push((format!("blocks.{l}.ffn.gate"), vec![d, f], u(d)));
        v.push((format!("blocks.{l}.ffn.up"), vec![d, f], u(d)));
        v.push((format!("blocks.{l}.ffn.down"), vec![f, d], u(f)));
    }
    v.push(("head.w".into(), vec![d, c], InitClass::Zero));
    v.push(("head.b".into(), vec![c], InitClass::Zero));
    v
}

impl NetParams {
    /// Fresh parameters. Deterministic in `rng`.
    pub fn init(config: NetConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let entries = param_layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let tensor = match init {
                    InitClass::Zero => Tensor::zeros(&shape),
                    InitClass::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let n = shape.iter().product();
                        let (u, _) = rng.child_named(&name).uniforms(n);
                        Tensor::new(shape, u.into_iter().map(|x| (2.0 * x - 1.0) * bound).collect())?
                    }
                };
                Ok(ParamEntry { name, tensor, init })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(config, entries))
    }

    fn from_entries(config: NetConfig, entries: Vec<ParamEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        NetParams { config, entries, index }
    }

    /// Rebuilds parameters from named tensors; every expected name must be
    /// present with the expected shape.
    pub fn from_named(config: NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut given: HashMap<String, Tensor> = named.into_iter().collect();
        let mut entries = Vec::new();
        for (name, shape, init) in param_layout(&config) {
            let tensor = given
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if tensor.shape() != shape.as_slice() {
                return shape_err("checkpoint parameter", &shape, tensor.shape());
            }
            entries.push(ParamEntry { name, tensor, init });
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Format(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::from_entries(config, entries))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        if self.entries[i].tensor.shape() != t.shape() {
            return shape_err("set parameter", self.entries[i].tensor.shape(), t.shape());
        }
        self.entries[i].tensor = t;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Binds every tensor as a gradient leaf.
    pub fn bind_trainable(&self) -> BoundNet<'_> {
        BoundNet {
            params: self,
            vars: self.entries.iter().map(|e| Var::param(e.tensor.clone())).collect(),
        }
    }

    /// Binds every tensor as a constant.
    pub fn bind_constant(&self) -> BoundNet<'_> {
        BoundNet {
            params: self,
            vars: self.entries.iter().map(|e| Var::constant(e.tensor.clone())).collect(),
        }
    }
}

/// Parameters bound to traced variables for one evaluation or training pass.
pub struct BoundNet<'a> {
    params: &'a NetParams,
    vars: Vec<Var>,
}

impl<'a> BoundNet<'a> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.params
            .index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))
    }

    pub fn config(&self) -> &NetConfig {
        &self.params.config
    }

    fn block(&self, l: usize) -> Result<BlockParams> {
        let p = |s: &str| self.var(&format!("blocks.{l}.{s}")).cloned();
        let mixing = match self.config().mixing {
            Mixing::PerCellDense => MixParams::Dense { w: p("mix.w")?, b: p("mix.b")? },
            Mixing::FullAttention => MixParams::Attention {
                q: p("attn.q")?,
                k: p("attn.k")?,
                v: p("attn.v")?,
                o: p("attn.o")?,
                heads: self.config().attention_heads,
            },
        };
        Ok(BlockParams {
            mixing,
            gate: p("ffn.gate")?,
            up: p("ffn.up")?,
            down: p("ffn.down")?,
        })
    }

    /// Sum of the two time embeddings, shape (B, embed_dim).
    pub fn time_embedding(&self, r: &Var, t: &Var) -> Result<Var> {
        let cfg = self.config();
        let mlp = |which: &str, s: &Var| -> Result<Var> {
            let code = sinusoidal_code_var(s, cfg.embed_dim, cfg.time_scale)?;
            let h = code.matmul(self.var(&format!("{which}.w1"))?)?.add(self.var(&format!("{which}.b1"))?)?.silu()?;
            h.matmul(self.var(&format!("{which}.w2"))?)?.add(self.var(&format!("{which}.b2"))?)
        };
        mlp("t_embed", t)?.add(&mlp("r_embed", r)?)
    }

    /// Modulation (α, β, γ for the mixing branch, then for the SwiGLU branch)
    /// of block `l`, each shaped (B, 1, hidden_dim).
    pub fn modulation(&self, l: usize, temb: &Var) -> Result<Modulation> {
        let d = self.config().hidden_dim;
        let b = temb.shape()[0];
        let m = temb
            .matmul(self.var(&format!("blocks.{l}.mod.w"))?)?
            .add(self.var(&format!("blocks.{l}.mod.b"))?)?
            .reshape(&[b, 1, 6 * d])?;
        let mut parts = m.split(2, &[d; 6])?.into_iter();
        let mut next = || parts.next().expect("six modulation slices");
        Ok(Modulation {
            alpha_mix: next(),
            beta_mix: next(),
            gamma_mix: next(),
            alpha_ffn: next(),
            beta_ffn: next(),
            gamma_ffn: next(),
        })
    }

    /// Full network on batched fields: `z`, `c` are (B, C, H, W); `r`, `t` are (B).
    pub fn forward(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        let cfg = self.config();
        let [ch, gh, gw] = cfg.field_shape();
        let zs = z.shape();
        if zs.len() != 4 || zs[1..] != [ch, gh, gw] {
            return shape_err("velnet forward (state)", &[0, ch, gh, gw], zs);
        }
        if c.shape() != zs {
            return shape_err("velnet forward (conditioning)", zs, c.shape());
        }
        let b = zs[0];
        if r.shape() != [b] || t.shape() != [b] {
            return shape_err("velnet forward (times)", &[b], if r.shape() != [b] { r.shape() } else { t.shape() });
        }
        for (&rv, &tv) in r.value().data().iter().zip(t.value().data()) {
            if rv > tv {
                return invalid(format!("velnet forward: r = {rv} exceeds t = {tv}"));
            }
        }
        let n = gh * gw;
        let x = Var::concat(&[c, z], 1)?.permute(&[0, 2, 3, 1])?.reshape(&[b, n, 2 * ch])?;
        let mut h = x.matmul(self.var("in_proj.w")?)?.add(self.var("in_proj.b")?)?;
        let temb = self.time_embedding(r, t)?;
        for l in 0..cfg.depth {
            let m = self.modulation(l, &temb)?;
            h = block_forward(&h, &m, &self.block(l)?)?;
        }
        let out = h.matmul(self.var("head.w")?)?.add(self.var("head.b")?)?;
        out.reshape(&[b, gh, gw, ch])?.permute(&[0, 3, 1, 2])
    }
}

impl VelocityField for BoundNet<'_> {
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        self.forward(z, r, t, c)
    }
}

impl VelocityField for NetParams {
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        self.bind_constant().forward(z, r, t, c)
    }
}

pub struct Modulation {
    pub alpha_mix: Var,
    pub beta_mix: Var,
    pub gamma_mix: Var,
    pub alpha_ffn: Var,
    pub beta_ffn: Var,
    pub gamma_ffn: Var,
}

pub enum MixParams {
    Dense { w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, o: Var, heads: usize },
}

pub struct BlockParams {
    pub mixing: MixParams,
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

/// Sinusoidal code of a scalar time: entry 2i is sin(s·ω_i), entry 2i+1 is
/// cos(s·ω_i), with s = 1000·t and ω_i = 10000^(−2i/dim).
pub fn sinusoidal_code(t: f64, dim: usize) -> Result<Vec<f64>> {
    sinusoidal_code_scaled(t, dim, 1000.0)
}

pub fn sinusoidal_code_scaled(t: f64, dim: usize, scale: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return invalid(format!("sinusoidal code dimension must be even, got {dim}"));
    }
    Ok(frequencies(dim)
        .iter()
        .flat_map(|w| {
            let a = scale * t * w;
            [a.sin(), a.cos()]
        })
        .collect())
}

fn frequencies(dim: usize) -> Vec<f64> {
    (0..dim / 2).map(|i| FREQ_BASE.powf(-((2 * i) as f64) / dim as f64)).collect()
}

/// Batched, differentiable code: (B) → (B, dim).
pub fn sinusoidal_code_var(t: &Var, dim: usize, scale: f64) -> Result<Var> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return invalid(format!("sinusoidal code dimension must be even, got {dim}"));
    }
    let b = t.shape()[0];
    let half = dim / 2;
    let w: Vec<f64> = frequencies(dim).iter().map(|w| w * scale).collect();
    let angles = t.reshape(&[b, 1])?.mul(&Var::constant(Tensor::new(vec![1, half], w)?))?;
    let s = angles.sin()?.reshape(&[b, half, 1])?;
    let c = angles.cos()?.reshape(&[b, half, 1])?;
    Var::concat(&[&s, &c], 2)?.reshape(&[b, dim])
}

/// z / sqrt(mean(z², last axis) + ε)
pub fn rms_normalize(z: &Var) -> Result<Var> {
    let last = z.shape().len() - 1;
    let ms = z.square()?.mean(&[last], true)?.add_scalar(RMS_EPS)?;
    z.mul(&ms.rsqrt()?)
}

/// normalize(z) ⊙ (1 + α) + β
pub fn ada_rmsnorm(z: &Var, alpha: &Var, beta: &Var) -> Result<Var> {
    rms_normalize(z)?.mul(&alpha.add_scalar(1.0)?)?.add(beta)
}

/// W_down(silu(W_g x) ⊙ (W_u x))
pub fn swiglu(x: &Var, gate: &Var, up: &Var, down: &Var) -> Result<Var> {
    x.matmul(gate)?.silu()?.mul(&x.matmul(up)?)?.matmul(down)
}

/// The token-mixing branch on (B, N, D) tokens.
pub fn mix_tokens(x: &Var, p: &MixParams) -> Result<Var> {
    match p {
        MixParams::Dense { w, b } => x.matmul(w)?.add(b),
        MixParams::Attention { q, k, v, o, heads } => {
            let d = x.shape()[2];
            let dh = d / heads;
            let scale = Var::scalar(1.0 / (dh as f64).sqrt());
            let sizes = vec![dh; *heads];
            let qs = x.matmul(q)?.split(2, &sizes)?;
            let ks = x.matmul(k)?.split(2, &sizes)?;
            let vs = x.matmul(v)?.split(2, &sizes)?;
            let mut outs = Vec::with_capacity(*heads);
            for ((qh, kh), vh) in qs.iter().zip(&ks).zip(&vs) {
                let scores = qh.matmul(&kh.transpose_last2()?)?.mul(&scale)?;
                outs.push(softmax_last(&scores)?.matmul(vh)?);
            }
            let refs: Vec<&Var> = outs.iter().collect();
            Var::concat(&refs, 2)?.matmul(o)
        }
    }
}

/// Softmax over the last axis. The row maximum is subtracted as a constant;
/// softmax is shift invariant so derivatives are unaffected.
pub fn softmax_last(x: &Var) -> Result<Var> {
    let shape = x.shape().to_vec();
    let last = shape[shape.len() - 1];
    let rows = x.value().numel() / last;
    let mut mx = Vec::with_capacity(rows);
    for r in x.value().data().chunks(last) {
        mx.push(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let mut kshape = shape.clone();
    *kshape.last_mut().expect("nonempty shape") = 1;
    let e = x.sub(&Var::constant(Tensor::new(kshape, mx)?))?.exp()?;
    let last_axis = shape.len() - 1;
    e.div(&e.sum(&[last_axis], true)?)
}

/// One gated block:
/// h + γ_mix ⊙ Mix(M_mix(h)), then + γ_ffn ⊙ SwiGLU(M_ffn(·)).
pub fn block_forward(tokens: &Var, m: &Modulation, p: &BlockParams) -> Result<Var> {
    let mixed = mix_tokens(&ada_rmsnorm(tokens, &m.alpha_mix, &m.beta_mix)?, &p.mixing)?;
    let h = tokens.add(&m.gamma_mix.mul(&mixed)?)?;
    let f = swiglu(&ada_rmsnorm(&h, &m.alpha_ffn, &m.beta_ffn)?, &p.gate, &p.up, &p.down)?;
    h.add(&m.gamma_ffn.mul(&f)?)
}
