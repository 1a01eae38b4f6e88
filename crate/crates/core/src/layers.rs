//! Parameterized building blocks. Each layer knows its parameter names and shapes and
//! reads the values from a [`Ctx`] at forward time.

use weedsense_tensor::ops::{self, Conv2dOptions};
use weedsense_tensor::{Scalar, Var};

use crate::error::Result;
use crate::params::{Ctx, Init, Specs};

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    /// Dense convolution with "same" padding and no bias.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            groups: channels,
            ..Conv::new(name, channels, channels, kernel, stride)
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn specs(&self, s: &mut Specs) {
        let per_group = self.cin / self.groups;
        s.param(
            format!("{}.weight", self.name),
            vec![self.cout, per_group, self.kernel, self.kernel],
            Init::Kaiming {
                fan_in: per_group * self.kernel * self.kernel,
            },
        );
        if self.bias {
            s.param(format!("{}.bias", self.name), vec![self.cout], Init::Const(0.0));
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        let opts = Conv2dOptions::new(self.stride, self.kernel / 2, self.groups);
        Ok(ops::conv2d(x, &w, b.as_ref(), opts)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        s.param(format!("{}.gamma", self.name), vec![self.channels], Init::Const(1.0));
        s.param(format!("{}.beta", self.name), vec![self.channels], Init::Const(0.0));
        s.batch_norms.push((self.name.clone(), self.channels));
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        ctx.batch_norm(&self.name, x)
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    /// Convolution `{name}.conv` followed by batch norm `{name}.bn`.
    pub fn new(name: &str, conv: Conv, relu: bool) -> Self {
        let conv = Conv {
            name: format!("{name}.conv"),
            ..conv
        };
        let bn = BatchNorm::new(format!("{name}.bn"), conv.cout);
        ConvBn { conv, bn, relu }
    }

    pub fn relu(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvBn::new(name, Conv::new("", cin, cout, kernel, stride), true)
    }

    pub fn plain(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvBn::new(name, Conv::new("", cin, cout, kernel, stride), false)
    }

    pub fn depthwise(name: &str, channels: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvBn::new(name, Conv::depthwise("", channels, kernel, stride), relu)
    }

    pub fn specs(&self, s: &mut Specs) {
        self.conv.specs(s);
        self.bn.specs(s);
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?;
        Ok(if self.relu { ops::relu(&y) } else { y })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
    pub xavier: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias: true,
            xavier: false,
        }
    }

    /// Bias-free, Glorot-initialized projection as used inside attention.
    pub fn projection(name: impl Into<String>, d: usize) -> Self {
        Linear {
            bias: false,
            xavier: true,
            ..Linear::new(name, d, d)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn specs(&self, s: &mut Specs) {
        let init = if self.xavier {
            Init::Xavier {
                fan_in: self.din,
                fan_out: self.dout,
            }
        } else {
            Init::Kaiming { fan_in: self.din }
        };
        s.param(self.weight_name(), vec![self.dout, self.din], init);
        if self.bias {
            s.param(format!("{}.bias", self.name), vec![self.dout], Init::Const(0.0));
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        Ok(ops::linear(x, &w, b.as_ref())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim }
    }

    pub fn specs(&self, s: &mut Specs) {
        s.param(format!("{}.gamma", self.name), vec![self.dim], Init::Const(1.0));
        s.param(format!("{}.beta", self.name), vec![self.dim], Init::Const(0.0));
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ctx.param(&format!("{}.gamma", self.name))?;
        let b = ctx.param(&format!("{}.beta", self.name))?;
        Ok(ops::layer_norm(x, &g, &b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_two_to_three_has_nine_parameters() {
        let mut s = Specs::default();
        Linear::new("fc", 2, 3).specs(&mut s);
        assert_eq!(s.total(), 9);
    }

    #[test]
    fn depthwise_weight_has_one_input_channel() {
        let mut s = Specs::default();
        Conv::depthwise("dw", 8, 3, 1).specs(&mut s);
        assert_eq!(s.params[0].shape, vec![8, 1, 3, 3]);
    }
}
