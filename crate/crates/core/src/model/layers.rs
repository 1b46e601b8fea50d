//! Building blocks shared by both denoiser variants.

use ctcal_autodiff::{Broadcast, Graph, Real, Tensor, Var};

use super::params::{Bound, Init, ParamId};

const NORM_EPS: f64 = 1e-5;

fn c<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `x @ w + b` over the last axis of a matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Self {
        let w = init.normal(&format!("{name}.w"), &[d_in, d_out], gain / (d_in as f64).sqrt());
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[d_out]));
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = p.get(self.w);
        let b = self.b.map(|b| p.get(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let w = init.normal(&format!("{name}.w"), &[c_out, c_in, kernel, kernel], gain / fan_in.sqrt());
        let b = init.zeros(&format!("{name}.b"), &[c_out]);
        Self { w, b, stride, pad: kernel / 2 }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

/// Group normalization over `[B, C, H, W]` with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {channels} channels in {groups} groups");
        Self { gamma: init.ones(&format!("{name}.gamma"), &[channels]), beta: init.zeros(&format!("{name}.beta"), &[channels]), groups }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let y = g.normalize(x, ch / self.groups * hw, c(NORM_EPS));
        let dims = Broadcast::channels(b, ch, hw);
        let y = g.broadcast_mul(y, p.get(self.gamma), dims);
        g.broadcast_add(y, p.get(self.beta), dims)
    }
}

/// Layer normalization over the last axis of a matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Self {
        Self { gamma: init.ones(&format!("{name}.gamma"), &[dim]), beta: init.zeros(&format!("{name}.beta"), &[dim]) }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let dim = *g.shape(x).last().unwrap();
        let rows = g.value(x).len() / dim;
        let y = g.normalize(x, dim, c(NORM_EPS));
        let dims = Broadcast { outer: rows, mid: dim, inner: 1, per_outer: false };
        let y = g.broadcast_mul(y, p.get(self.gamma), dims);
        g.broadcast_add(y, p.get(self.beta), dims)
    }
}

/// Sinusoidal embedding of integer timesteps: `[B] -> [B, dim]`.
pub fn timestep_embedding<T: Real>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); timesteps.len() * dim];
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[b * dim + i] = c(arg.sin());
            out[b * dim + half + i] = c(arg.cos());
        }
    }
    Tensor::new(&[timesteps.len(), dim], out).unwrap()
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub dim: usize,
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeMlp {
    pub fn new<T: Real>(init: &mut Init<'_, T>, dim: usize, out: usize) -> Self {
        Self { dim, l1: Linear::new(init, "time.l1", dim, out, true, 1.0), l2: Linear::new(init, "time.l2", out, out, true, 1.0) }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, timesteps: &[usize]) -> Var {
        let e = g.constant(timestep_embedding(timesteps, self.dim));
        let h = self.l1.apply(g, p, e);
        let h = g.silu(h);
        self.l2.apply(g, p, h)
    }
}

/// Pre-norm causal self-attention block over text tokens.
#[derive(Debug, Clone)]
pub struct TextBlock {
    pub ln1: LayerNorm,
    pub attn: AttnProj,
    pub ln2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

/// Additive causal mask `[groups, n, n]`: token `i` sees tokens `0..=i`.
pub fn causal_mask<T: Real>(groups: usize, n: usize) -> Tensor<T> {
    Tensor::from_fn(&[groups, n, n], |i| {
        let (q, k) = ((i / n) % n, i % n);
        if k > q {
            c(-1e9)
        } else {
            T::zero()
        }
    })
}

/// Learned token embedding plus a learned positional term, then causal
/// self-attention blocks so a noun's feature also carries its modifiers.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: Vec<TextBlock>,
    pub ln_out: Option<LayerNorm>,
}

impl TextEncoder {
    pub fn new<T: Real>(init: &mut Init<'_, T>, vocab: usize, n_max: usize, d_model: usize, heads: usize, layers: usize) -> Self {
        let table = init.normal("text.embed", &[vocab, d_model], 1.0);
        let pos = init.normal("text.pos", &[n_max, d_model], 0.5);
        let blocks = (0..layers)
            .map(|i| {
                let name = format!("text.ctx{i}");
                TextBlock {
                    ln1: LayerNorm::new(init, &format!("{name}.ln1"), d_model),
                    attn: AttnProj::new(init, &format!("{name}.self"), d_model, d_model, d_model),
                    ln2: LayerNorm::new(init, &format!("{name}.ln2"), d_model),
                    mlp1: Linear::new(init, &format!("{name}.mlp1"), d_model, 2 * d_model, true, 1.0),
                    mlp2: Linear::new(init, &format!("{name}.mlp2"), 2 * d_model, d_model, true, 1.0),
                }
            })
            .collect();
        let ln_out = (layers > 0).then(|| LayerNorm::new(init, "text.ln_out", d_model));
        Self { table, pos, d_model, heads, blocks, ln_out }
    }

    /// `ids` is `[B * n]` (padded, row-major); returns `[B, n, d_model]`.
    ///
    /// Padding sits at the end, so the causal mask already keeps it out of every real token.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ids: &[usize], batch: usize, n: usize) -> Var {
        let e = g.gather_rows(p.get(self.table), ids);
        let pos = g.narrow(p.get(self.pos), 0, 0, n);
        let e = g.broadcast_add(e, pos, Broadcast { outer: batch, mid: n * self.d_model, inner: 1, per_outer: false });
        let mut x = g.reshape(e, &[batch, n, self.d_model]);
        if self.blocks.is_empty() {
            return x;
        }
        let mask = g.constant(causal_mask(batch * self.heads, n));
        for b in &self.blocks {
            let h = b.ln1.apply(g, p, x);
            let (a, _) = cross_attention(g, p, &b.attn, h, h, self.heads, Some(mask));
            x = g.add(x, a);
            let h = b.ln2.apply(g, p, x);
            let h = linear3(g, p, &b.mlp1, h);
            let h = g.silu(h);
            let h = linear3(g, p, &b.mlp2, h);
            x = g.add(x, h);
        }
        match &self.ln_out {
            Some(ln) => ln.apply(g, p, x),
            None => x,
        }
    }
}

/// Residual block: GN, SiLU, conv, time shift, GN, SiLU, conv, skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub n1: GroupNorm,
    pub c1: Conv,
    pub temb: Linear,
    pub n2: GroupNorm,
    pub c2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Self {
        Self {
            n1: GroupNorm::new(init, &format!("{name}.n1"), c_in, groups),
            c1: Conv::new(init, &format!("{name}.c1"), c_in, c_out, 3, 1, 1.0),
            temb: Linear::new(init, &format!("{name}.temb"), temb_dim, c_out, true, 1.0),
            n2: GroupNorm::new(init, &format!("{name}.n2"), c_out, groups),
            c2: Conv::new(init, &format!("{name}.c2"), c_out, c_out, 3, 1, 1.0),
            skip: (c_in != c_out).then(|| Conv::new(init, &format!("{name}.skip"), c_in, c_out, 1, 1, 1.0)),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb: Var) -> Var {
        let h = self.n1.apply(g, p, x);
        let h = g.silu(h);
        let h = self.c1.apply(g, p, h);
        let s = g.shape(h).to_vec();
        let t = g.silu(temb);
        let t = self.temb.apply(g, p, t);
        let h = g.broadcast_add(h, t, Broadcast { outer: s[0], mid: s[1], inner: s[2] * s[3], per_outer: true });
        let h = self.n2.apply(g, p, h);
        let h = g.silu(h);
        let h = self.c2.apply(g, p, h);
        let skip = match &self.skip {
            Some(conv) => conv.apply(g, p, x),
            None => x,
        };
        g.add(h, skip)
    }
}

/// `[B, L, h * dh] -> [B * h, L, dh]`.
pub fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, d / heads]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * heads, l, d / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var, batch: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (heads, l, dh) = (s[0] / batch, s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, l, dh]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[batch, l, heads * dh])
}

/// Additive key mask `[B * heads, Lq, Lk]`: keys at or past `valid[b]` get a large negative logit.
pub fn key_mask<T: Real>(valid: &[usize], heads: usize, lq: usize, lk: usize) -> Tensor<T> {
    let neg = c::<T>(-1e9);
    let mut out = vec![T::zero(); valid.len() * heads * lq * lk];
    for (b, &v) in valid.iter().enumerate() {
        for h in 0..heads {
            for q in 0..lq {
                let row = ((b * heads + h) * lq + q) * lk;
                out[row + v..row + lk].iter_mut().for_each(|x| *x = neg);
            }
        }
    }
    Tensor::new(&[valid.len() * heads, lq, lk], out).unwrap()
}

/// Multi-head scaled dot-product attention.
///
/// `q: [B, Lq, d]`, `k, v: [B, Lk, d]`. Returns the merged output `[B, Lq, d]` and the
/// post-softmax weights `[B * heads, Lq, Lk]`.
pub fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> (Var, Var) {
    let batch = g.shape(q)[0];
    let d = g.shape(q)[2];
    let qh = split_heads(g, q, heads);
    let kh = split_heads(g, k, heads);
    let vh = split_heads(g, v, heads);
    let logits = g.matmul_t(qh, kh, false, true);
    let logits = g.scale(logits, c(1.0 / ((d / heads) as f64).sqrt()));
    let logits = match mask {
        Some(m) => g.add(logits, m),
        None => logits,
    };
    let attn = g.softmax(logits);
    let out = g.matmul(attn, vh);
    (merge_heads(g, out, batch), attn)
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnProj {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_query: usize, d_context: usize, d_model: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.wq"), d_query, d_model, false, 1.0),
            k: Linear::new(init, &format!("{name}.wk"), d_context, d_model, false, 1.0),
            v: Linear::new(init, &format!("{name}.wv"), d_context, d_model, false, 1.0),
            o: Linear::new(init, &format!("{name}.wo"), d_model, d_query, true, 1.0),
        }
    }
}

/// Project `[B, L, d_in]` row-wise with a [`Linear`].
pub fn linear3<T: Real>(g: &mut Graph<T>, p: &Bound, layer: &Linear, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
    let y = layer.apply(g, p, flat);
    let d_out = g.shape(y)[1];
    g.reshape(y, &[s[0], s[1], d_out])
}

/// Cross-attention from image features `[B, Lq, C]` to text features `[B, n, d]`.
/// Returns the projected output `[B, Lq, C]` and the weights `[B * heads, Lq, n]`.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    proj: &AttnProj,
    image: Var,
    text: Var,
    heads: usize,
    mask: Option<Var>,
) -> (Var, Var) {
    let q = linear3(g, p, &proj.q, image);
    let k = linear3(g, p, &proj.k, text);
    let v = linear3(g, p, &proj.v, text);
    let (out, attn) = attend(g, q, k, v, heads, mask);
    (linear3(g, p, &proj.o, out), attn)
}
