//! The assembled network: encoder, the enabled task decoders, and training-only
//! auxiliary heads.

use weedsense_tensor::{Mode, Scalar, Tensor, Var};

use crate::config::{Dims, ModelConfig, Task};
use crate::decoder::{GrowthDecoder, SegHead};
use crate::encoder::{aux_heads, AuxHead, Encoder};
use crate::error::Result;
use crate::params::{Ctx, ParamStore, Specs};

/// Parameter-free description of a network.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub dims: Dims,
    pub encoder: Encoder,
    pub seg_head: Option<SegHead>,
    pub aux: Vec<AuxHead>,
    pub growth: Option<GrowthDecoder>,
}

pub struct ForwardOutput<T: Scalar> {
    pub seg: Option<Var<T>>,
    pub height: Option<Var<T>>,
    pub week: Option<Var<T>>,
    /// Four full-resolution maps in train mode with aux heads enabled, else empty.
    pub aux: Vec<Var<T>>,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let dims = config.validate()?;
        let seg = config.tasks.seg;
        Ok(Network {
            encoder: Encoder::new(config, &dims)?,
            seg_head: seg.then(|| SegHead::new(dims.agg, dims.seg_mid, config.num_classes, config.dropout)),
            aux: if config.aux_active() { aux_heads(config, &dims) } else { Vec::new() },
            growth: config.tasks.growth().then(|| GrowthDecoder::new(config, &dims)),
            config: config.clone(),
            dims,
        })
    }

    pub fn specs(&self) -> Specs {
        let mut s = Specs::default();
        self.encoder.specs(&mut s);
        self.seg_head.iter().for_each(|h| h.specs(&mut s));
        self.aux.iter().for_each(|h| h.specs(&mut s));
        self.growth.iter().for_each(|h| h.specs(&mut s));
        s
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<ForwardOutput<T>> {
        let enc = self.encoder.forward(ctx, x)?;
        let seg = self.seg_head.as_ref().map(|h| h.forward(ctx, &enc.agg)).transpose()?;
        let aux = if ctx.mode == Mode::Train {
            self.aux
                .iter()
                .zip(&enc.stages)
                .map(|(h, f)| h.forward(ctx, f))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (height, week) = match &self.growth {
            Some(g) => {
                let out = g.forward(ctx, &enc.agg)?;
                (out.height, out.week)
            }
            None => (None, None),
        };
        Ok(ForwardOutput { seg, height, week, aux })
    }
}

/// A network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic in `seed`; each parameter's initial value depends only on the seed
    /// and its name.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let net = Network::new(config)?;
        let params = ParamStore::from_specs(&net.specs(), seed)?;
        Ok(Model { net, params })
    }

    /// A model restricted to one task: segmentation keeps the seg head and aux heads,
    /// height and week keep the growth decoder with a single head.
    pub fn build_single_task(config: &ModelConfig, task: Task, seed: u64) -> Result<Self> {
        Model::build(&config.single_task(task), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.params.total()
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        let ctx = Ctx::new(&self.params, None, mode);
        self.net.forward(&ctx, &Var::constant(x.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Size;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width_divisor: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tiny_model_shape_contract() {
        let m = Model::<f32>::build(&tiny(), 0).unwrap();
        let x = Tensor::from_fn([2, 3, 64, 64], |i| ((i % 17) as f32) / 17.0);
        let out = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.seg.unwrap().shape(), &[2, 17, 64, 64]);
        assert_eq!(out.height.unwrap().shape(), &[2, 1]);
        assert_eq!(out.week.unwrap().shape(), &[2, 11]);
        assert!(out.aux.is_empty());
        let out = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.aux.len(), 4);
        for a in &out.aux {
            assert_eq!(a.shape(), &[2, 17, 64, 64]);
        }
    }

    #[test]
    fn input_must_be_divisible_by_32() {
        let m = Model::<f32>::build(&tiny(), 0).unwrap();
        let x = Tensor::zeros([1, 3, 48, 64]);
        let e = m.forward(&x, Mode::Eval).err().unwrap();
        assert_eq!(e.category(), "dimension");
    }

    #[test]
    fn height_only_model_has_no_segmentation() {
        let cfg = ModelConfig {
            size: Size::Small,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::build_single_task(&cfg, Task::Height, 0).unwrap();
        assert!(m.net.seg_head.is_none() && m.net.aux.is_empty());
        let g = m.net.growth.as_ref().unwrap();
        assert!(g.height.is_some() && g.week.is_none());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(&tiny(), 5).unwrap();
        let b = Model::<f32>::build(&tiny(), 5).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::<f32>::build(&tiny(), 6).unwrap();
        assert_ne!(a.params, c.params);
    }
}
