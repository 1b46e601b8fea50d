//! Small UNet with cross-attention at the two inner resolutions.

use ctcal_autodiff::{Graph, Real, Var};

use super::layers::{cross_attention, AttnProj, Conv, GroupNorm, ResBlock, TextEncoder, TimeMlp};
use super::params::{Bound, Init};
use super::{AttnKind, AttnRecord, ModelConfig, Text};

const GROUPS: usize = 4;

/// Attention sites in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Down1,
    Down2,
    Mid,
    Up1,
}

impl Site {
    pub const EXECUTION_ORDER: [Site; 4] = [Site::Down1, Site::Down2, Site::Mid, Site::Up1];
    /// Sites enabled first as `depth` grows: the coarse sites, then the fine ones.
    pub const PLACEMENT_ORDER: [Site; 4] = [Site::Down2, Site::Mid, Site::Down1, Site::Up1];

    fn name(self) -> &'static str {
        match self {
            Site::Down1 => "down1",
            Site::Down2 => "down2",
            Site::Mid => "mid",
            Site::Up1 => "up1",
        }
    }
}

#[derive(Debug, Clone)]
struct AttnLayer {
    norm: GroupNorm,
    proj: AttnProj,
}

#[derive(Debug, Clone)]
pub struct Unet {
    text: TextEncoder,
    time: TimeMlp,
    conv_in: Conv,
    down1: Conv,
    res_d1: ResBlock,
    down2: Conv,
    res_d2: ResBlock,
    res_mid: ResBlock,
    up1: Conv,
    res_u1: ResBlock,
    up2: Conv,
    res_u2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv,
    attn: [Option<AttnLayer>; 4],
}

impl Unet {
    pub fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<'_, T>) -> Self {
        let d = cfg.d_model;
        let (c0, c1, c2) = (d / 2, d, 2 * d);
        let temb = 2 * d;
        let text = TextEncoder::new(init, cfg.vocab_size + usize::from(cfg.sink_token), cfg.n_max + usize::from(cfg.sink_token), d, cfg.heads, cfg.text_layers);
        let time = TimeMlp::new(init, d, temb);
        let enabled: Vec<Site> = Site::PLACEMENT_ORDER[..cfg.depth].to_vec();
        let mut attn: [Option<AttnLayer>; 4] = Default::default();
        let conv_in = Conv::new(init, "conv_in", 3, c0, 3, 1, 1.0);
        let down1 = Conv::new(init, "down1", c0, c1, 3, 2, 1.0);
        let res_d1 = ResBlock::new(init, "res_d1", c1, c1, temb, GROUPS);
        let down2 = Conv::new(init, "down2", c1, c2, 3, 2, 1.0);
        let res_d2 = ResBlock::new(init, "res_d2", c2, c2, temb, GROUPS);
        let res_mid = ResBlock::new(init, "res_mid", c2, c2, temb, GROUPS);
        let up1 = Conv::new(init, "up1", c2, c1, 3, 1, 1.0);
        let res_u1 = ResBlock::new(init, "res_u1", 2 * c1, c1, temb, GROUPS);
        let up2 = Conv::new(init, "up2", c1, c0, 3, 1, 1.0);
        let res_u2 = ResBlock::new(init, "res_u2", 2 * c0, c0, temb, GROUPS);
        let norm_out = GroupNorm::new(init, "norm_out", c0, GROUPS);
        let conv_out = Conv::new(init, "conv_out", c0, 3, 3, 1, 1.0);
        for (slot, site) in Site::EXECUTION_ORDER.iter().enumerate() {
            if enabled.contains(site) {
                let ch = match site {
                    Site::Down1 | Site::Up1 => c1,
                    Site::Down2 | Site::Mid => c2,
                };
                let name = format!("attn.{}", site.name());
                attn[slot] = Some(AttnLayer {
                    norm: GroupNorm::new(init, &format!("{name}.norm"), ch, GROUPS),
                    proj: AttnProj::new(init, &name, ch, d, d),
                });
            }
        }
        Self {
            text,
            time,
            conv_in,
            down1,
            res_d1,
            down2,
            res_d2,
            res_mid,
            up1,
            res_u1,
            up2,
            res_u2,
            norm_out,
            conv_out,
            attn,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Real>(
        &self,
        slot: usize,
        cfg: &ModelConfig,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        text: &Text,
        ctx: Var,
        records: &mut Vec<AttnRecord>,
    ) -> Var {
        let Some(layer) = &self.attn[slot] else { return x };
        let s = g.shape(x).to_vec();
        let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let hn = layer.norm.apply(g, p, x);
        let tokens = g.permute(hn, &[0, 2, 3, 1]);
        let tokens = g.reshape(tokens, &[b, h * w, ch]);
        let mask = text.mask(g, cfg.heads, h * w, 0);
        let (out, weights) = cross_attention(g, p, &layer.proj, tokens, ctx, cfg.heads, mask);
        records.push(AttnRecord {
            layer: records.len(),
            heads: cfg.heads,
            batch: b,
            weights,
            query_hw: (h, w),
            kind: AttnKind::Cross,
            branch: text.branch,
            timesteps: text.timesteps.clone(),
            text_lens: text.lens.clone(),
            text_offset: text.sink,
        });
        let out = g.reshape(out, &[b, h, w, ch]);
        let out = g.permute(out, &[0, 3, 1, 2]);
        g.add(x, out)
    }

    pub fn forward<T: Real>(&self, cfg: &ModelConfig, g: &mut Graph<T>, p: &Bound, x: Var, text: &Text) -> (Var, Vec<AttnRecord>) {
        let mut records = Vec::new();
        let ctx = self.text.apply(g, p, &text.ids, text.batch(), text.keys());
        let temb = self.time.apply(g, p, &text.timesteps);

        let h0 = self.conv_in.apply(g, p, x);
        let h = self.down1.apply(g, p, h0);
        let h = self.res_d1.apply(g, p, h, temb);
        let h1 = self.attention(0, cfg, g, p, h, text, ctx, &mut records);
        let h = self.down2.apply(g, p, h1);
        let h = self.res_d2.apply(g, p, h, temb);
        let h = self.attention(1, cfg, g, p, h, text, ctx, &mut records);
        let h = self.res_mid.apply(g, p, h, temb);
        let h = self.attention(2, cfg, g, p, h, text, ctx, &mut records);

        let h = g.upsample2x(h);
        let h = self.up1.apply(g, p, h);
        let h = g.concat(&[h, h1], 1);
        let h = self.res_u1.apply(g, p, h, temb);
        let h = self.attention(3, cfg, g, p, h, text, ctx, &mut records);
        let h = g.upsample2x(h);
        let h = self.up2.apply(g, p, h);
        let h = g.concat(&[h, h0], 1);
        let h = self.res_u2.apply(g, p, h, temb);

        let h = self.norm_out.apply(g, p, h);
        let h = g.silu(h);
        (self.conv_out.apply(g, p, h), records)
    }
}
