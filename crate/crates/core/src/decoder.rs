//! Task decoders on the shared representation: a pixel-shuffle segmentation head and a
//! pooled transformer trunk with height and growth-week heads.

use weedsense_tensor::ops::{self, AttentionWeights};
use weedsense_tensor::{Scalar, TensorError, Var};

use crate::config::{Dims, ModelConfig, SEG_UPSCALE};
use crate::error::Result;
use crate::layers::{Conv, ConvBn, LayerNorm, Linear};
use crate::params::{Ctx, Specs};

#[derive(Debug, Clone)]
pub struct SegHead {
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub conv: ConvBn,
    pub cls: Conv,
}

impl SegHead {
    pub fn new(cin: usize, mid: usize, classes: usize, dropout: f64) -> Self {
        SegHead {
            in_channels: cin,
            num_classes: classes,
            dropout,
            conv: ConvBn::relu("seg_head", cin, mid, 3, 1),
            cls: Conv::new("seg_head.cls", mid, classes * SEG_UPSCALE * SEG_UPSCALE, 1, 1).with_bias(),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.conv.specs(s);
        self.cls.specs(s);
    }

    /// Raw logits `[N, classes, 8h, 8w]`.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, agg: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = agg.value().dims4("seg_head")?;
        if c != self.in_channels {
            return Err(TensorError::dim("seg_head", "channels", format!("expected {}, got {c}", self.in_channels)).into());
        }
        let y = self.conv.forward(ctx, agg)?;
        let y = ops::dropout(&y, self.dropout, ctx.mode, ctx.dropout_seed)?;
        let y = self.cls.forward(ctx, &y)?;
        Ok(ops::pixel_shuffle(&y, SEG_UPSCALE)?)
    }
}

/// Pooled single-token transformer block followed by a shared trunk and per-task heads.
#[derive(Debug, Clone)]
pub struct GrowthDecoder {
    pub pooled: usize,
    pub embed: usize,
    pub heads: usize,
    pub proj: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
    pub trunk1: Linear,
    pub trunk2: Linear,
    pub trunk_ln: LayerNorm,
    pub height: Option<Linear>,
    pub height_scale: f64,
    pub week: Option<Linear>,
}

pub struct GrowthOutput<T: Scalar> {
    /// `[N, 1]`, centimetres.
    pub height: Option<Var<T>>,
    /// `[N, weeks]`.
    pub week: Option<Var<T>>,
    /// Attention weights `[N, heads, 1, 1]`.
    pub attention: Var<T>,
}

impl GrowthDecoder {
    pub fn new(cfg: &ModelConfig, dims: &Dims) -> Self {
        let (a, d, f) = (dims.agg, dims.embed, dims.ffn);
        let [d1, d2] = dims.trunk;
        GrowthDecoder {
            pooled: a,
            embed: d,
            heads: dims.heads,
            proj: Linear::new("tgd.proj", a, d),
            wq: Linear::projection("tgd.attn.q", d),
            wk: Linear::projection("tgd.attn.k", d),
            wv: Linear::projection("tgd.attn.v", d),
            wo: Linear::projection("tgd.attn.o", d),
            ln1: LayerNorm::new("tgd.ln1", d),
            ffn1: Linear::new("tgd.ffn1", d, f),
            ffn2: Linear::new("tgd.ffn2", f, d),
            ln2: LayerNorm::new("tgd.ln2", d),
            trunk1: Linear::new("tgd.trunk1", d, d1),
            trunk2: Linear::new("tgd.trunk2", d1, d2),
            trunk_ln: LayerNorm::new("tgd.trunk_ln", d2),
            height: cfg.tasks.height.then(|| Linear::new("tgd.height", d2, 1)),
            height_scale: cfg.height_scale,
            week: cfg.tasks.week.then(|| Linear::new("tgd.week", d2, cfg.num_weeks)),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        for l in [&self.proj, &self.wq, &self.wk, &self.wv, &self.wo] {
            l.specs(s);
        }
        self.ln1.specs(s);
        self.ffn1.specs(s);
        self.ffn2.specs(s);
        self.ln2.specs(s);
        self.trunk1.specs(s);
        self.trunk2.specs(s);
        self.trunk_ln.specs(s);
        self.height.iter().chain(&self.week).for_each(|l| l.specs(s));
    }

    /// Pooled transformer embedding `[N, embed]` and the attention weights.
    pub fn transform<T: Scalar>(&self, ctx: &Ctx<'_, T>, agg: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (n, c, _, _) = agg.value().dims4("tgd_transform")?;
        if c != self.pooled {
            return Err(TensorError::dim("tgd_transform", "channels", format!("expected {}, got {c}", self.pooled)).into());
        }
        let pooled = ops::reshape(&ops::global_avg_pool(agg)?, &[n, 1, c])?;
        let x = self.proj.forward(ctx, &pooled)?;
        let (wq, wk, wv, wo) = (
            ctx.param(&self.wq.weight_name())?,
            ctx.param(&self.wk.weight_name())?,
            ctx.param(&self.wv.weight_name())?,
            ctx.param(&self.wo.weight_name())?,
        );
        let w = AttentionWeights {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
        };
        let (attn, weights) = ops::multi_head_attention(&x, &w, self.heads)?;
        let x = self.ln1.forward(ctx, &ops::add(&x, &attn)?)?;
        let f = self.ffn2.forward(ctx, &ops::gelu(&self.ffn1.forward(ctx, &x)?))?;
        let x = self.ln2.forward(ctx, &ops::add(&x, &f)?)?;
        Ok((ops::reshape(&x, &[n, self.embed])?, weights))
    }

    pub fn task_heads<T: Scalar>(&self, ctx: &Ctx<'_, T>, f_trans: &Var<T>) -> Result<(Option<Var<T>>, Option<Var<T>>)> {
        let t = self.trunk2.forward(ctx, &self.trunk1.forward(ctx, f_trans)?)?;
        let t = ops::relu(&self.trunk_ln.forward(ctx, &t)?);
        let height = match &self.height {
            Some(l) if self.height_scale == 1.0 => Some(l.forward(ctx, &t)?),
            Some(l) => Some(ops::scale(&l.forward(ctx, &t)?, self.height_scale)),
            None => None,
        };
        let week = self.week.as_ref().map(|l| l.forward(ctx, &t)).transpose()?;
        Ok((height, week))
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, agg: &Var<T>) -> Result<GrowthOutput<T>> {
        let (f, attention) = self.transform(ctx, agg)?;
        let (height, week) = self.task_heads(ctx, &f)?;
        Ok(GrowthOutput { height, week, attention })
    }
}
