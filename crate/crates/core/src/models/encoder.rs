//! The four encoder families. Every stage halves the spatial resolution.

use alloc::format;
use alloc::vec::Vec;

use super::config::{scaled, EncoderFamily, EncoderKind, DENSE_GROWTH, DENSE_LAYERS};
use super::layers::{Builder, Conv, ConvBlock, Ctx, Norm};
use crate::error::Result;
use crate::nn::Var;
use crate::real::Real;

#[derive(Clone, Debug)]
enum Stage {
    /// conv-relu, conv-relu, 2x2 max pool.
    Plain { first: ConvBlock, second: ConvBlock },
    /// Strided basic residual block with projection shortcut.
    Residual { c1: Conv, n1: Norm, c2: Conv, n2: Norm, proj: Conv, proj_norm: Norm },
    /// Pre-activation dense layers, then a 1x1 transition and 2x2 average pool.
    Dense { layers: Vec<(Norm, Conv)>, trans_norm: Norm, trans: Conv },
    /// Strided depthwise 3x3 then pointwise 1x1, each followed by norm and ReLU.
    Depthwise { dw: Conv, n1: Norm, pw: Conv, n2: Norm },
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    stages: Vec<Stage>,
    pub channels: Vec<usize>,
}

impl Encoder {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, family: &EncoderFamily, in_channels: usize) -> Result<Self> {
        let channels = family.channels();
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let p = format!("encoder.stage{}", i + 1);
            let stage = match family.kind {
                EncoderKind::PlainConvStack => Stage::Plain {
                    first: b.conv_block(&format!("{p}.0"), cin, c, 3, 1, false)?,
                    second: b.conv_block(&format!("{p}.1"), c, c, 3, 1, false)?,
                },
                EncoderKind::Residual => Stage::Residual {
                    c1: b.conv(&format!("{p}.conv1"), cin, c, 3, 2, 1, false)?,
                    n1: b.norm(&format!("{p}.bn1"), c)?,
                    c2: b.conv(&format!("{p}.conv2"), c, c, 3, 1, 1, false)?,
                    n2: b.norm(&format!("{p}.bn2"), c)?,
                    proj: b.conv(&format!("{p}.downsample.conv"), cin, c, 1, 2, 1, false)?,
                    proj_norm: b.norm(&format!("{p}.downsample.bn"), c)?,
                },
                EncoderKind::DenselyConnected => {
                    let growth = scaled(DENSE_GROWTH, family.width_scale);
                    let layers = (0..DENSE_LAYERS)
                        .map(|l| {
                            let width = cin + l * growth;
                            Ok((
                                b.norm(&format!("{p}.layer{l}.bn"), width)?,
                                b.conv(&format!("{p}.layer{l}.conv"), width, growth, 3, 1, 1, false)?,
                            ))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let width = cin + DENSE_LAYERS * growth;
                    Stage::Dense {
                        layers,
                        trans_norm: b.norm(&format!("{p}.transition.bn"), width)?,
                        trans: b.conv(&format!("{p}.transition.conv"), width, c, 1, 1, 1, false)?,
                    }
                }
                EncoderKind::DepthwiseSeparable => Stage::Depthwise {
                    dw: b.conv(&format!("{p}.depthwise"), cin, cin, 3, 2, cin, false)?,
                    n1: b.norm(&format!("{p}.bn1"), cin)?,
                    pw: b.conv(&format!("{p}.pointwise"), cin, c, 1, 1, 1, false)?,
                    n2: b.norm(&format!("{p}.bn2"), c)?,
                },
            };
            stages.push(stage);
            cin = c;
        }
        Ok(Self { stages, channels })
    }

    /// Feature maps at `H/2, H/4, ..., H/2^depth`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Vec<Var>> {
        let mut features = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                Stage::Plain { first, second } => {
                    let y = ctx.block(first, h)?;
                    let y = ctx.block(second, y)?;
                    ctx.tape.max_pool2d(y, 2, 2)?
                }
                Stage::Residual { c1, n1, c2, n2, proj, proj_norm } => {
                    let y = ctx.conv(c1, h)?;
                    let y = ctx.norm(n1, y)?;
                    let y = ctx.relu(y);
                    let y = ctx.conv(c2, y)?;
                    let y = ctx.norm(n2, y)?;
                    let s = ctx.conv(proj, h)?;
                    let s = ctx.norm(proj_norm, s)?;
                    let sum = ctx.tape.add(y, s)?;
                    ctx.relu(sum)
                }
                Stage::Dense { layers, trans_norm, trans } => {
                    let mut acc = h;
                    for (norm, conv) in layers {
                        let y = ctx.norm(norm, acc)?;
                        let y = ctx.relu(y);
                        let y = ctx.conv(conv, y)?;
                        acc = ctx.tape.concat(&[acc, y])?;
                    }
                    let y = ctx.norm(trans_norm, acc)?;
                    let y = ctx.relu(y);
                    let y = ctx.conv(trans, y)?;
                    let [_, _, hh, ww] = ctx.tape.shape(y);
                    ctx.tape.adaptive_avg_pool2d(y, hh / 2, ww / 2)?
                }
                Stage::Depthwise { dw, n1, pw, n2 } => {
                    let y = ctx.conv(dw, h)?;
                    let y = ctx.norm(n1, y)?;
                    let y = ctx.relu(y);
                    let y = ctx.conv(pw, y)?;
                    let y = ctx.norm(n2, y)?;
                    ctx.relu(y)
                }
            };
            features.push(h);
        }
        Ok(features)
    }
}
