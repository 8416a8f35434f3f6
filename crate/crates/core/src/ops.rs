//! The candidate operation set and its per-edge instances.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, FactorizedReduce, Norm, Registry};
use crate::tensor::{ConvGeometry, PoolKind, Scalar, Var};

/// Candidate operation kinds. The discriminant is the canonical index used
/// for every tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Zero = 0,
    SkipConnect = 1,
    MaxPool3x3 = 2,
    AvgPool3x3 = 3,
    SepConv3x3 = 4,
    SepConv5x5 = 5,
    DilConv3x3 = 6,
    DilConv5x5 = 7,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        OpKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OpKind::MaxPool3x3 | OpKind::AvgPool3x3)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operation `{s}`")))
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// ReLU → depthwise k×k → pointwise 1×1 → batch norm.
#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    depthwise: Conv,
    pointwise: Conv,
    bn: Norm,
}

impl ConvBlock {
    fn new(name: &str, channels: usize, kernel: usize, stride: usize, dilation: usize, affine: bool) -> Self {
        let padding = dilation * (kernel - 1) / 2;
        ConvBlock {
            depthwise: Conv::new(
                format!("{name}.dw"),
                channels,
                channels,
                kernel,
                ConvGeometry::new(stride, padding, dilation, channels),
            ),
            pointwise: Conv::new(format!("{name}.pw"), channels, channels, 1, ConvGeometry::pointwise()),
            bn: Norm::new(format!("{name}.bn"), channels, affine),
        }
    }

    fn registry(&self) -> Registry {
        let mut r = self.depthwise.registry();
        r.extend(self.pointwise.registry());
        r.extend(self.bn.registry());
        r
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x);
        let h = self.depthwise.forward(ctx, h)?;
        let h = self.pointwise.forward(ctx, h)?;
        self.bn.forward(ctx, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Zero,
    Identity,
    Reduce(FactorizedReduce),
    Pool { kind: PoolKind, bn: Norm },
    Sep(Box<[ConvBlock; 2]>),
    Dil(ConvBlock),
}

/// One operation bound to a channel count, stride and parameter prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct OpInstance {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    body: Body,
}

/// Builds `kind` with its parameters named under `prefix`.
pub fn instantiate_op_named(
    kind: OpKind,
    channels: usize,
    stride: usize,
    affine: bool,
    prefix: &str,
) -> Result<OpInstance> {
    if channels == 0 {
        return Err(Error::InvalidArgument("operation channels must be positive".into()));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("operation stride must be 1 or 2, got {stride}")));
    }
    let body = match kind {
        OpKind::Zero => Body::Zero,
        OpKind::SkipConnect if stride == 1 => Body::Identity,
        OpKind::SkipConnect => Body::Reduce(FactorizedReduce::new(prefix, channels, channels, affine)?),
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => Body::Pool {
            kind: if kind == OpKind::MaxPool3x3 {
                PoolKind::Max
            } else {
                PoolKind::Avg
            },
            bn: Norm::new(format!("{prefix}.bn"), channels, affine),
        },
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
            Body::Sep(Box::new([
                ConvBlock::new(&format!("{prefix}.0"), channels, k, stride, 1, affine),
                ConvBlock::new(&format!("{prefix}.1"), channels, k, 1, 1, affine),
            ]))
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
            Body::Dil(ConvBlock::new(prefix, channels, k, stride, 2, affine))
        }
    };
    Ok(OpInstance {
        kind,
        channels,
        stride,
        body,
    })
}

/// Builds `kind` with parameters named under `kind`'s canonical name.
pub fn instantiate_op(kind: OpKind, channels: usize, stride: usize, affine: bool) -> Result<OpInstance> {
    instantiate_op_named(kind, channels, stride, affine, kind.name())
}

/// Trainable scalar count of the instantiated operation.
pub fn op_param_count(kind: OpKind, channels: usize, stride: usize, affine: bool) -> Result<usize> {
    Ok(instantiate_op(kind, channels, stride, affine)?.registry().param_count())
}

impl OpInstance {
    pub fn registry(&self) -> Registry {
        match &self.body {
            Body::Zero | Body::Identity => Registry::default(),
            Body::Reduce(fr) => fr.registry(),
            Body::Pool { bn, .. } => bn.registry(),
            Body::Sep(blocks) => {
                let mut r = blocks[0].registry();
                r.extend(blocks[1].registry());
                r
            }
            Body::Dil(block) => block.registry(),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                self.kind.name(),
                format!("expected [N, {}, H, W] input, got {:?}", self.channels, shape),
            ));
        }
        match &self.body {
            Body::Zero => {
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let s = self.stride;
                Ok(ctx.tape.zeros(vec![n, c, (h - 1) / s + 1, (w - 1) / s + 1]))
            }
            Body::Identity => Ok(x),
            Body::Reduce(fr) => fr.forward(ctx, x),
            Body::Pool { kind, bn } => {
                let y = ctx.tape.pool2d(x, *kind, 3, self.stride)?;
                bn.forward(ctx, y)
            }
            Body::Sep(blocks) => {
                let h = blocks[0].forward(ctx, x)?;
                blocks[1].forward(ctx, h)
            }
            Body::Dil(block) => block.forward(ctx, x),
        }
    }
}
