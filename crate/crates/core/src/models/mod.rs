//! Unet, Linknet, FPN and PSPNet over a pluggable encoder.
//!
//! All four map a `(B, 1, H, W)` batch to per-pixel foreground probabilities of
//! the same shape through a final sigmoid. Parameters live in a [`ParamStore`]
//! under dotted names; everything the encoder owns starts with `encoder.`, which
//! is what warm-start checkpoints are filtered on.

mod config;
mod encoder;
mod layers;

pub use config::{
    scaled, ArchHyper, Architecture, EncoderFamily, EncoderKind, MergePolicy, ModelConfig, WeightInit, DEFAULT_WIDTH_SCALE,
    DENSE_GROWTH, DENSE_LAYERS,
};

use alloc::format;
use alloc::vec::Vec;

use encoder::Encoder;
use layers::{Builder, Conv, ConvBlock, Ctx, Norm};

use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore, Tape, Tensor4, Var};
use crate::real::Real;
use crate::rng::RngStream;

pub const ENCODER_PREFIX: &str = "encoder.";

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with(ENCODER_PREFIX)
}

#[derive(Clone, Debug)]
struct LinkBlock {
    reduce: ConvBlock,
    mid: ConvBlock,
    expand: ConvBlock,
}

#[derive(Clone, Debug)]
struct PyramidBranch {
    bins: usize,
    conv: Conv,
    norm: Option<Norm>,
}

#[derive(Clone, Debug)]
enum Decoder {
    Unet { blocks: Vec<(ConvBlock, ConvBlock)>, head: Conv },
    Linknet { blocks: Vec<LinkBlock>, head: Conv },
    Fpn { laterals: Vec<Conv>, seg: Vec<Vec<ConvBlock>>, dropout: f64, head: Conv },
    Psp { branches: Vec<PyramidBranch>, bottleneck: ConvBlock, dropout: f64, head: Conv },
}

/// Layer layout of one configured network; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    input_shape: (usize, usize),
    encoder: Encoder,
    decoder: Decoder,
}

/// Lays out `config` for `(H, W)` inputs. The returned store holds default values
/// (zero weights, unit norm scales); initialize it before use.
pub fn build<T: Real>(config: &ModelConfig, input_shape: (usize, usize)) -> Result<(Model, ParamStore<T>)> {
    config.validate()?;
    check_input(config, input_shape)?;
    let mut store = ParamStore::new();
    let mut b = Builder { store: &mut store };
    let encoder = Encoder::build(&mut b, &config.encoder, 1)?;
    let s = config.encoder.width_scale;
    let ch = encoder.channels.clone();
    let d = ch.len();
    let decoder = match &config.hyper {
        ArchHyper::Unet { decoder_channels, decoder_batch_norm } => {
            let mut blocks = Vec::new();
            let mut cin = ch[d - 1];
            for (j, &dc) in decoder_channels.iter().enumerate() {
                let out = scaled(dc, s);
                let skip = if j + 1 < d { ch[d - 2 - j] } else { 0 };
                let p = format!("decoder.block{j}");
                blocks.push((
                    b.conv_block(&format!("{p}.0"), cin + skip, out, 3, 1, *decoder_batch_norm)?,
                    b.conv_block(&format!("{p}.1"), out, out, 3, 1, *decoder_batch_norm)?,
                ));
                cin = out;
            }
            Decoder::Unet { blocks, head: b.conv("head", cin, 1, 3, 1, 1, true)? }
        }
        ArchHyper::Linknet { decoder_batch_norm, prefinal_channels } => {
            let mut blocks = Vec::new();
            let mut cin = ch[d - 1];
            for j in 0..d {
                let out = if j + 1 < d { ch[d - 2 - j] } else { scaled(*prefinal_channels, s) };
                let mid = (cin / 4).max(1);
                let p = format!("decoder.block{j}");
                let bn = *decoder_batch_norm;
                blocks.push(LinkBlock {
                    reduce: b.conv_block(&format!("{p}.reduce"), cin, mid, 1, 1, bn)?,
                    mid: b.conv_block(&format!("{p}.mid"), mid, mid, 3, 1, bn)?,
                    expand: b.conv_block(&format!("{p}.expand"), mid, out, 1, 1, bn)?,
                });
                cin = out;
            }
            Decoder::Linknet { blocks, head: b.conv("head", cin, 1, 3, 1, 1, true)? }
        }
        ArchHyper::Fpn { pyramid_channels, segmentation_channels, dropout, .. } => {
            let pc = scaled(*pyramid_channels, s);
            let sc = scaled(*segmentation_channels, s);
            // laterals for the four deepest stages, deepest first
            let laterals = (0..4)
                .map(|k| b.conv(&format!("decoder.lateral{k}"), ch[d - 1 - k], pc, 1, 1, 1, true))
                .collect::<Result<Vec<_>>>()?;
            let seg = (0..4)
                .map(|k| {
                    let n_up = 3 - k;
                    (0..n_up.max(1))
                        .map(|i| {
                            let cin = if i == 0 { pc } else { sc };
                            b.conv_block(&format!("decoder.seg{k}.{i}"), cin, sc, 3, 1, false)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Decoder::Fpn { laterals, seg, dropout: *dropout, head: b.conv("head", sc, 1, 1, 1, 1, true)? }
        }
        ArchHyper::Pspnet { output_channels, dropout, batch_norm, bins } => {
            let c = ch[d - 1];
            let reduced = (c / bins.len()).max(1);
            let branches = bins
                .iter()
                .enumerate()
                .map(|(i, &bins)| {
                    let p = format!("decoder.pyramid{i}");
                    Ok(PyramidBranch {
                        bins,
                        conv: b.conv(&format!("{p}.conv"), c, reduced, 1, 1, 1, !batch_norm)?,
                        norm: if *batch_norm { Some(b.norm(&format!("{p}.bn"), reduced)?) } else { None },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let oc = scaled(*output_channels, s);
            let bottleneck = b.conv_block("decoder.bottleneck", c + bins.len() * reduced, oc, 1, 1, *batch_norm)?;
            Decoder::Psp { branches, bottleneck, dropout: *dropout, head: b.conv("head", oc, 1, 3, 1, 1, true)? }
        }
    };
    Ok((Model { config: config.clone(), input_shape, encoder, decoder }, store))
}

fn check_input(config: &ModelConfig, (h, w): (usize, usize)) -> Result<()> {
    let factor = 1usize << config.encoder.depth;
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{} with encoder depth {} needs H and W divisible by {factor}, got {h}x{w}",
            config.architecture, config.encoder.depth
        )));
    }
    Ok(())
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    /// Records the forward pass on `tape`; returns the probability map.
    ///
    /// `rng` feeds dropout and is only required in train mode for FPN and PSPNet.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let [_, c, h, w] = tape.shape(x);
        if c != 1 {
            return Err(Error::Shape(format!("expected single-channel input, got {c} channels")));
        }
        check_input(&self.config, (h, w))?;
        let mut ctx = Ctx { tape, store, mode, rng };
        let feats = self.encoder.forward(&mut ctx, x)?;
        let d = feats.len();
        let logits = match &self.decoder {
            Decoder::Unet { blocks, head } => {
                let mut y = feats[d - 1];
                for (j, (first, second)) in blocks.iter().enumerate() {
                    y = ctx.tape.upsample_nearest2x(y);
                    if j + 1 < d {
                        y = ctx.tape.concat(&[y, feats[d - 2 - j]])?;
                    }
                    y = ctx.block(first, y)?;
                    y = ctx.block(second, y)?;
                }
                ctx.conv(head, y)?
            }
            Decoder::Linknet { blocks, head } => {
                let mut y = feats[d - 1];
                for (j, blk) in blocks.iter().enumerate() {
                    y = ctx.block(&blk.reduce, y)?;
                    y = ctx.tape.upsample_nearest2x(y);
                    y = ctx.block(&blk.mid, y)?;
                    y = ctx.block(&blk.expand, y)?;
                    if j + 1 < d {
                        y = ctx.tape.add(y, feats[d - 2 - j])?;
                    }
                }
                ctx.conv(head, y)?
            }
            Decoder::Fpn { laterals, seg, dropout, head } => {
                let mut pyramid: Vec<Var> = Vec::with_capacity(4);
                for (k, lat) in laterals.iter().enumerate() {
                    let l = ctx.conv(lat, feats[d - 1 - k])?;
                    let p = match pyramid.last() {
                        Some(&prev) => {
                            let up = ctx.tape.upsample_nearest2x(prev);
                            ctx.tape.add(up, l)?
                        }
                        None => l,
                    };
                    pyramid.push(p);
                }
                let mut merged: Option<Var> = None;
                for (k, (blocks, &p)) in seg.iter().zip(&pyramid).enumerate() {
                    let n_up = 3 - k;
                    let mut y = p;
                    for blk in blocks {
                        y = ctx.block(blk, y)?;
                        if n_up > 0 {
                            y = ctx.tape.upsample_nearest2x(y);
                        }
                    }
                    merged = Some(match merged {
                        Some(m) => ctx.tape.add(m, y)?,
                        None => y,
                    });
                }
                let y = ctx.dropout(merged.expect("four pyramid levels"), *dropout)?;
                let y = ctx.conv(head, y)?;
                ctx.tape.bilinear_resize(y, h, w)?
            }
            Decoder::Psp { branches, bottleneck, dropout, head } => {
                let f = feats[d - 1];
                let [_, _, fh, fw] = ctx.tape.shape(f);
                let mut parts = Vec::with_capacity(branches.len() + 1);
                parts.push(f);
                for br in branches {
                    let y = ctx.tape.adaptive_avg_pool2d(f, br.bins, br.bins)?;
                    let mut y = ctx.conv(&br.conv, y)?;
                    if let Some(n) = &br.norm {
                        y = ctx.norm(n, y)?;
                    }
                    let y = ctx.relu(y);
                    parts.push(ctx.tape.bilinear_resize(y, fh, fw)?);
                }
                let y = ctx.tape.concat(&parts)?;
                let y = ctx.block(bottleneck, y)?;
                let y = ctx.dropout(y, *dropout)?;
                let y = ctx.conv(head, y)?;
                ctx.tape.bilinear_resize(y, h, w)?
            }
        };
        Ok(ctx.tape.sigmoid(logits))
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = self.forward(&mut tape, store, xv, Mode::Eval, None)?;
        Ok(tape.value(y).clone())
    }
}
