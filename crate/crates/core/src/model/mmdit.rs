//! Multi-modal diffusion transformer: image patches and text tokens attend jointly.

use ctcal_autodiff::{Graph, Real, Tensor, Var};

use super::layers::{attend, linear3, AttnProj, LayerNorm, Linear, TextEncoder, TimeMlp};
use super::params::{Bound, Init, ParamId};
use super::{AttnKind, AttnRecord, ModelConfig, Text};

#[derive(Debug, Clone)]
struct Stream {
    norm1: LayerNorm,
    shift: Linear,
    proj: AttnProj,
    norm2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

impl Stream {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d: usize, temb: usize) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            shift: Linear::new(init, &format!("{name}.shift"), temb, d, true, 1.0),
            proj: AttnProj::new(init, &format!("{name}.attn"), d, d, d),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            mlp1: Linear::new(init, &format!("{name}.mlp1"), d, 2 * d, true, 1.0),
            mlp2: Linear::new(init, &format!("{name}.mlp2"), 2 * d, d, true, 1.0),
        }
    }

    /// LayerNorm of `[B, L, d]` plus a per-item shift from the time embedding.
    fn modulated<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb: Var) -> Var {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
        let h = self.norm1.apply(g, p, flat);
        let t = g.silu(temb);
        let shift = self.shift.apply(g, p, t);
        let shift = expand_rows(g, shift, s[1]);
        let h = g.add(h, shift);
        g.reshape(h, &[s[0], s[1], s[2]])
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
        let h = self.norm2.apply(g, p, flat);
        let h = self.mlp1.apply(g, p, h);
        let h = g.silu(h);
        let h = self.mlp2.apply(g, p, h);
        let h = g.reshape(h, &[s[0], s[1], s[2]]);
        g.add(x, h)
    }
}

/// Repeat each row of `[B, d]` `reps` times: `[B * reps, d]`.
fn expand_rows<T: Real>(g: &mut Graph<T>, x: Var, reps: usize) -> Var {
    let b = g.shape(x)[0];
    let e = Tensor::from_fn(&[b * reps, b], |i| if (i / b) / reps == i % b { T::one() } else { T::zero() });
    let e = g.constant(e);
    g.matmul(e, x)
}

#[derive(Debug, Clone)]
struct Block {
    img: Stream,
    txt: Stream,
}

#[derive(Debug, Clone)]
pub struct MmDit {
    text: TextEncoder,
    time: TimeMlp,
    patch_in: Linear,
    img_pos: ParamId,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    patch_out: Linear,
}

impl MmDit {
    pub fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<'_, T>) -> Self {
        let d = cfg.d_model;
        let temb = 2 * d;
        let pdim = 3 * cfg.patch * cfg.patch;
        let grid = cfg.resolution / cfg.patch;
        let text = TextEncoder::new(init, cfg.vocab_size + usize::from(cfg.sink_token), cfg.n_max + usize::from(cfg.sink_token), d, cfg.heads, cfg.text_layers);
        let time = TimeMlp::new(init, d, temb);
        let patch_in = Linear::new(init, "patch_in", pdim, d, true, 1.0);
        let img_pos = init.normal("img_pos", &[grid * grid, d], 0.5);
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                img: Stream::new(init, &format!("blocks.{i}.img"), d, temb),
                txt: Stream::new(init, &format!("blocks.{i}.txt"), d, temb),
            })
            .collect();
        let norm_out = LayerNorm::new(init, "norm_out", d);
        let patch_out = Linear::new(init, "patch_out", d, pdim, true, 1.0);
        Self { text, time, patch_in, img_pos, blocks, norm_out, patch_out }
    }

    pub fn forward<T: Real>(&self, cfg: &ModelConfig, g: &mut Graph<T>, p: &Bound, x: Var, text: &Text) -> (Var, Vec<AttnRecord>) {
        let (b, r, pch, d) = (text.batch(), cfg.resolution, cfg.patch, cfg.d_model);
        let grid = r / pch;
        let n_img = grid * grid;
        let n_txt = text.keys();

        let patches = g.reshape(x, &[b, 3, grid, pch, grid, pch]);
        let patches = g.permute(patches, &[0, 2, 4, 1, 3, 5]);
        let patches = g.reshape(patches, &[b * n_img, 3 * pch * pch]);
        let img = self.patch_in.apply(g, p, patches);
        let pos = p.get(self.img_pos);
        let img = g.broadcast_add(
            img,
            pos,
            ctcal_autodiff::Broadcast { outer: b, mid: n_img * d, inner: 1, per_outer: false },
        );
        let mut img = g.reshape(img, &[b, n_img, d]);
        let mut txt = self.text.apply(g, p, &text.ids, b, n_txt);
        let temb = self.time.apply(g, p, &text.timesteps);

        let mut records = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let last = i + 1 == self.blocks.len();
            let hi = block.img.modulated(g, p, img, temb);
            let ht = block.txt.modulated(g, p, txt, temb);
            let qi = linear3(g, p, &block.img.proj.q, hi);
            let ki = linear3(g, p, &block.img.proj.k, hi);
            let vi = linear3(g, p, &block.img.proj.v, hi);
            let qt = linear3(g, p, &block.txt.proj.q, ht);
            let kt = linear3(g, p, &block.txt.proj.k, ht);
            let vt = linear3(g, p, &block.txt.proj.v, ht);
            let q = g.concat(&[qi, qt], 1);
            let k = g.concat(&[ki, kt], 1);
            let v = g.concat(&[vi, vt], 1);
            let mask = text.mask(g, cfg.heads, n_img + n_txt, n_img);
            let (out, weights) = attend(g, q, k, v, cfg.heads, mask);
            records.push(AttnRecord {
                layer: records.len(),
                heads: cfg.heads,
                batch: b,
                weights,
                query_hw: (grid, grid),
                kind: AttnKind::Joint { n_img },
                branch: text.branch,
                timesteps: text.timesteps.clone(),
                text_lens: text.lens.clone(),
                text_offset: text.sink,
            });
            let oi = g.narrow(out, 1, 0, n_img);
            let ot = g.narrow(out, 1, n_img, n_txt);
            let oi = linear3(g, p, &block.img.proj.o, oi);
            img = g.add(img, oi);
            img = block.img.mlp(g, p, img);
            // the text stream's last update would never be read
            if !last {
                let ot = linear3(g, p, &block.txt.proj.o, ot);
                txt = g.add(txt, ot);
                txt = block.txt.mlp(g, p, txt);
            }
        }

        let flat = g.reshape(img, &[b * n_img, d]);
        let h = self.norm_out.apply(g, p, flat);
        let h = self.patch_out.apply(g, p, h);
        let h = g.reshape(h, &[b, grid, grid, 3, pch, pch]);
        let h = g.permute(h, &[0, 3, 1, 4, 2, 5]);
        (g.reshape(h, &[b, 3, r, r]), records)
    }
}
