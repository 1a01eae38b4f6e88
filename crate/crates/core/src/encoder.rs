//! Dual-path encoder: a shallow-wide detail branch at 1/8 resolution, a deep-narrow
//! semantic branch of inverted-bottleneck blocks down to 1/32, a global context block,
//! and the guided aggregation that fuses both into the shared representation.

use weedsense_tensor::ops::{self, PoolOptions};
use weedsense_tensor::{Scalar, TensorError, Var};

use crate::config::{Dims, ModelConfig, UibKernels, AUX_FACTORS};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBn};
use crate::params::{Ctx, Init, Specs};

pub(crate) fn check_divisible<T: Scalar>(op: &'static str, x: &Var<T>, k: usize) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.value().dims4(op)?;
    for (axis, v) in [("height", h), ("width", w)] {
        if v % k != 0 {
            return Err(TensorError::dim(op, axis, format!("{v} is not divisible by {k}")).into());
        }
    }
    Ok((h, w))
}

#[derive(Debug, Clone)]
pub struct DetailBranch {
    pub stages: [Vec<ConvBn>; 3],
}

impl DetailBranch {
    pub fn new(widths: [usize; 3]) -> Self {
        let [d1, d2, d3] = widths;
        let stage = |s: usize, cin: usize, c: usize, n: usize| -> Vec<ConvBn> {
            (0..n)
                .map(|i| {
                    let (ci, st) = if i == 0 { (cin, 2) } else { (c, 1) };
                    ConvBn::relu(&format!("detail.s{s}.{i}"), ci, c, 3, st)
                })
                .collect()
        };
        DetailBranch {
            stages: [stage(1, 3, d1, 2), stage(2, d1, d2, 3), stage(3, d2, d3, 3)],
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.stages.iter().flatten().for_each(|l| l.specs(s));
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_divisible("detail_branch", x, 8)?;
        let mut y = x.clone();
        for l in self.stages.iter().flatten() {
            y = l.forward(ctx, &y)?;
        }
        Ok(y)
    }
}

/// Stride-2 conv, then a conv path and a max-pool path side by side, concatenated and
/// fused; 4x downsampling overall.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: ConvBn,
    pub left1: ConvBn,
    pub left2: ConvBn,
    pub fuse: ConvBn,
}

impl Stem {
    pub fn new(c: usize) -> Self {
        Stem {
            conv: ConvBn::relu("semantic.stem.conv", 3, c, 3, 2),
            left1: ConvBn::relu("semantic.stem.left1", c, c / 2, 1, 1),
            left2: ConvBn::relu("semantic.stem.left2", c / 2, c, 3, 2),
            fuse: ConvBn::relu("semantic.stem.fuse", 2 * c, c, 3, 1),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        for l in [&self.conv, &self.left1, &self.left2, &self.fuse] {
            l.specs(s);
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_divisible("stem", x, 4)?;
        let y = self.conv.forward(ctx, x)?;
        let left = self.left2.forward(ctx, &self.left1.forward(ctx, &y)?)?;
        let right = ops::max_pool2d(&y, PoolOptions::new(3, 2, 1))?;
        self.fuse.forward(ctx, &ops::concat(&[&left, &right], 1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UibSpec {
    pub kernels: UibKernels,
    pub expansion: usize,
    pub use_se: bool,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub layer_scale_init: f64,
}

impl UibSpec {
    pub fn expanded(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// Universal inverted bottleneck: optional start depthwise, 1x1 expansion, optional mid
/// depthwise carrying the stride, optional squeeze-excitation, 1x1 projection, optional
/// end depthwise on the projected channels, layer scale, and a residual when shapes match.
#[derive(Debug, Clone)]
pub struct UibBlock {
    pub name: String,
    pub spec: UibSpec,
    pub start: Option<ConvBn>,
    pub expand: ConvBn,
    pub mid: Option<ConvBn>,
    pub se: Option<(Conv, Conv)>,
    pub proj: ConvBn,
    pub end: Option<ConvBn>,
}

impl UibBlock {
    pub fn new(name: &str, spec: UibSpec) -> Result<Self> {
        let k = spec.kernels;
        if ![1, 2].contains(&spec.stride) {
            return Err(Error::config(format!("{name}: stride {} not in {{1,2}}", spec.stride)));
        }
        if spec.stride == 2 && k.mid == 0 {
            return Err(Error::config(format!("{name}: stride 2 needs a mid depthwise kernel, got {k}")));
        }
        let (cin, e, cout) = (spec.in_channels, spec.expanded(), spec.out_channels);
        if spec.use_se && e % 4 != 0 {
            return Err(Error::config(format!("{name}: expanded width {e} not divisible by 4 for SE")));
        }
        let se = spec.use_se.then(|| {
            (
                Conv::new(format!("{name}.se.reduce"), e, e / 4, 1, 1),
                Conv::new(format!("{name}.se.expand"), e / 4, e, 1, 1),
            )
        });
        Ok(UibBlock {
            name: name.to_string(),
            spec,
            start: (k.start > 0).then(|| ConvBn::depthwise(&format!("{name}.start"), cin, k.start, 1, false)),
            expand: ConvBn::relu(&format!("{name}.expand"), cin, e, 1, 1),
            mid: (k.mid > 0).then(|| ConvBn::depthwise(&format!("{name}.mid"), e, k.mid, spec.stride, true)),
            se,
            proj: ConvBn::plain(&format!("{name}.proj"), e, cout, 1, 1),
            end: (k.end > 0).then(|| ConvBn::depthwise(&format!("{name}.end"), cout, k.end, 1, false)),
        })
    }

    fn layer_scale_name(&self) -> String {
        format!("{}.layer_scale", self.name)
    }

    pub fn specs(&self, s: &mut Specs) {
        self.start.iter().for_each(|l| l.specs(s));
        self.expand.specs(s);
        self.mid.iter().for_each(|l| l.specs(s));
        if let Some((a, b)) = &self.se {
            a.specs(s);
            b.specs(s);
        }
        self.proj.specs(s);
        self.end.iter().for_each(|l| l.specs(s));
        s.param(
            self.layer_scale_name(),
            vec![self.spec.out_channels],
            Init::Const(if self.spec.residual() { self.spec.layer_scale_init } else { 1.0 }),
        );
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = x.value().dims4("uib_block")?;
        if c != self.spec.in_channels {
            return Err(TensorError::dim("uib_block", "channels", format!("{}: expected {}, got {c}", self.name, self.spec.in_channels)).into());
        }
        let mut y = x.clone();
        if let Some(l) = &self.start {
            y = l.forward(ctx, &y)?;
        }
        y = self.expand.forward(ctx, &y)?;
        if let Some(l) = &self.mid {
            y = l.forward(ctx, &y)?;
        }
        if let Some((reduce, expand)) = &self.se {
            let w1 = ctx.param(&format!("{}.weight", reduce.name))?;
            let w2 = ctx.param(&format!("{}.weight", expand.name))?;
            y = ops::se_gate(&y, &w1, &w2)?;
        }
        y = self.proj.forward(ctx, &y)?;
        if let Some(l) = &self.end {
            y = l.forward(ctx, &y)?;
        }
        let gamma = ops::reshape(&ctx.param(&self.layer_scale_name())?, &[1, self.spec.out_channels, 1, 1])?;
        y = ops::mul(&y, &gamma)?;
        if self.spec.residual() {
            y = ops::add(&y, x)?;
        }
        Ok(y)
    }
}

/// Global-pooled statistics added back onto the feature map, then fused.
#[derive(Debug, Clone)]
pub struct ContextEmbedding {
    pub channels: usize,
    pub gap: ConvBn,
    pub last: ConvBn,
}

impl ContextEmbedding {
    const BN: &'static str = "context.bn";

    pub fn new(c: usize) -> Self {
        ContextEmbedding {
            channels: c,
            gap: ConvBn::relu("context.gap", c, c, 1, 1),
            last: ConvBn::relu("context.last", c, c, 3, 1),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        crate::layers::BatchNorm::new(Self::BN, self.channels).specs(s);
        self.gap.specs(s);
        self.last.specs(s);
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ops::global_avg_pool(x)?;
        let g = ctx.batch_norm(Self::BN, &g)?;
        let g = self.gap.forward(ctx, &g)?;
        self.last.forward(ctx, &ops::add(x, &g)?)
    }
}

/// Intermediate outputs of the semantic branch.
pub struct SemanticFeatures<T: Scalar> {
    /// Stem (1/4), S3 (1/8), S4 (1/16), S5 (1/32).
    pub stages: [Var<T>; 4],
    /// S5 after the context embedding.
    pub context: Var<T>,
}

#[derive(Debug, Clone)]
pub struct SemanticBranch {
    pub stem: Stem,
    pub stages: [Vec<UibBlock>; 3],
    pub context: ContextEmbedding,
}

impl SemanticBranch {
    pub fn new(cfg: &ModelConfig, dims: &Dims) -> Result<Self> {
        let mut stages: [Vec<UibBlock>; 3] = Default::default();
        let mut cin = dims.semantic[0];
        for (i, stage) in stages.iter_mut().enumerate() {
            let cout = dims.semantic[i + 1];
            for b in 0..dims.blocks[i] {
                let spec = UibSpec {
                    kernels: cfg.kernels,
                    expansion: dims.expansion,
                    use_se: cfg.use_se,
                    stride: if b == 0 { 2 } else { 1 },
                    in_channels: if b == 0 { cin } else { cout },
                    out_channels: cout,
                    layer_scale_init: cfg.layer_scale_init,
                };
                let block = UibBlock::new(&format!("semantic.s{}.{b}", i + 3), spec)
                    .map_err(|e| Error::config(format!("stage S{}: {e}", i + 3)))?;
                stage.push(block);
            }
            cin = cout;
        }
        Ok(SemanticBranch {
            stem: Stem::new(dims.semantic[0]),
            stages,
            context: ContextEmbedding::new(dims.semantic[3]),
        })
    }

    pub fn specs(&self, s: &mut Specs) {
        self.stem.specs(s);
        self.stages.iter().flatten().for_each(|b| b.specs(s));
        self.context.specs(s);
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<SemanticFeatures<T>> {
        check_divisible("semantic_branch", x, 32)?;
        let stem = self.stem.forward(ctx, x)?;
        let mut outs = vec![stem.clone()];
        let mut y = stem;
        for stage in &self.stages {
            for b in stage {
                y = b.forward(ctx, &y)?;
            }
            outs.push(y.clone());
        }
        let context = self.context.forward(ctx, &y)?;
        let stages: [Var<T>; 4] = outs.try_into().map_err(|_| Error::config("semantic stages"))?;
        Ok(SemanticFeatures { stages, context })
    }
}

/// Guided aggregation: each branch gates the other through a sigmoid, the two gated
/// maps are summed at 1/8 resolution and fused.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub in_channels: usize,
    pub out_channels: usize,
    pub left1_dw: ConvBn,
    pub left1_pw: Conv,
    pub left2: ConvBn,
    pub right1: ConvBn,
    pub right2_dw: ConvBn,
    pub right2_pw: Conv,
    pub fuse: ConvBn,
}

impl Aggregation {
    pub fn new(c: usize, a: usize) -> Self {
        Aggregation {
            in_channels: c,
            out_channels: a,
            left1_dw: ConvBn::depthwise("agg.left1.dw", c, 3, 1, false),
            left1_pw: Conv::new("agg.left1.pw", c, a, 1, 1),
            left2: ConvBn::plain("agg.left2", c, a, 3, 2),
            right1: ConvBn::plain("agg.right1", c, a, 3, 1),
            right2_dw: ConvBn::depthwise("agg.right2.dw", c, 3, 1, false),
            right2_pw: Conv::new("agg.right2.pw", c, a, 1, 1),
            fuse: ConvBn::relu("agg.fuse", a, a, 3, 1),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.left1_dw.specs(s);
        self.left1_pw.specs(s);
        self.left2.specs(s);
        self.right1.specs(s);
        self.right2_dw.specs(s);
        self.right2_pw.specs(s);
        self.fuse.specs(s);
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, detail: &Var<T>, semantic: &Var<T>) -> Result<Var<T>> {
        let (nd, cd, hd, wd) = detail.value().dims4("aggregate")?;
        let (ns, cs, hs, ws) = semantic.value().dims4("aggregate")?;
        if nd != ns {
            return Err(TensorError::dim("aggregate", "batch", format!("{nd} vs {ns}")).into());
        }
        if cd != cs || cd != self.in_channels {
            return Err(TensorError::dim("aggregate", "channels", format!("detail {cd}, semantic {cs}, expected {}", self.in_channels)).into());
        }
        if hd != 4 * hs || wd != 4 * ws {
            return Err(TensorError::dim("aggregate", "height/width", format!("detail {hd}x{wd} must be 4x semantic {hs}x{ws}")).into());
        }
        let left1 = self.left1_pw.forward(ctx, &self.left1_dw.forward(ctx, detail)?)?;
        let left2 = ops::avg_pool2d(&self.left2.forward(ctx, detail)?, PoolOptions::new(3, 2, 1))?;
        let right1 = ops::upsample_nearest(&self.right1.forward(ctx, semantic)?, 4)?;
        let right2 = self.right2_pw.forward(ctx, &self.right2_dw.forward(ctx, semantic)?)?;
        let left = ops::mul(&left1, &ops::sigmoid(&right1))?;
        let right = ops::upsample_nearest(&ops::mul(&left2, &ops::sigmoid(&right2))?, 4)?;
        self.fuse.forward(ctx, &ops::add(&left, &right)?)
    }
}

/// Training-only segmentation head on an intermediate stage.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub factor: usize,
    pub conv: ConvBn,
    pub cls: Conv,
}

impl AuxHead {
    pub fn new(index: usize, cin: usize, hidden: usize, factor: usize, classes: usize) -> Self {
        AuxHead {
            factor,
            conv: ConvBn::relu(&format!("aux.{index}"), cin, hidden, 3, 1),
            cls: Conv::new(format!("aux.{index}.cls"), hidden, classes * factor * factor, 1, 1).with_bias(),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.conv.specs(s);
        self.cls.specs(s);
    }

    /// Logits at `factor` times the stage resolution.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.cls.forward(ctx, &self.conv.forward(ctx, x)?)?;
        Ok(ops::pixel_shuffle(&y, self.factor)?)
    }
}

pub fn aux_heads(cfg: &ModelConfig, dims: &Dims) -> Vec<AuxHead> {
    (0..4)
        .map(|i| AuxHead::new(i, dims.semantic[i], dims.aux_hidden[i], AUX_FACTORS[i], cfg.num_classes))
        .collect()
}

pub struct EncoderOutput<T: Scalar> {
    /// Shared representation at 1/8 resolution.
    pub agg: Var<T>,
    /// Stage features feeding the auxiliary heads.
    pub stages: [Var<T>; 4],
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub detail: DetailBranch,
    pub semantic: SemanticBranch,
    pub aggregation: Aggregation,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, dims: &Dims) -> Result<Self> {
        Ok(Encoder {
            detail: DetailBranch::new(dims.detail),
            semantic: SemanticBranch::new(cfg, dims)?,
            aggregation: Aggregation::new(dims.detail[2], dims.agg),
        })
    }

    pub fn specs(&self, s: &mut Specs) {
        self.detail.specs(s);
        self.semantic.specs(s);
        self.aggregation.specs(s);
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<EncoderOutput<T>> {
        let (_, c, _, _) = x.value().dims4("encoder")?;
        if c != 3 {
            return Err(TensorError::dim("encoder", "channels", format!("expected 3 input channels, got {c}")).into());
        }
        check_divisible("encoder", x, 32)?;
        let detail = self.detail.forward(ctx, x)?;
        let sem = self.semantic.forward(ctx, x)?;
        let agg = self.aggregation.forward(ctx, &detail, &sem.context)?;
        Ok(EncoderOutput { agg, stages: sem.stages })
    }
}
