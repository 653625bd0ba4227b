use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::retrieval::{check_image, conv_bias};
use super::{insert_conv, insert_conv_transpose, Architecture, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Element, ParamSet, Var};

/// Stem plus three blocks; the last three block outputs are projected by 1×1
/// convs to `C_enc` channels and summed.
#[derive(Debug)]
pub struct ReconEncoder<E: Element = f32> {
    pub params: ParamSet<E>,
    image_size: usize,
    image_channels: usize,
    calls: AtomicUsize,
}

impl<E: Element> Clone for ReconEncoder<E> {
    fn clone(&self) -> Self {
        ReconEncoder {
            params: self.params.clone(),
            image_size: self.image_size,
            image_channels: self.image_channels,
            calls: AtomicUsize::new(0),
        }
    }
}

const ENCODER_STRIDES: [usize; 4] = [2, 2, 1, 1];

impl<E: Element> ReconEncoder<E> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let w = arch.encoder_widths;
        insert_conv(&mut params, "stem", w[0], arch.image_channels, 3, rng)?;
        for i in 1..4 {
            insert_conv(&mut params, &format!("block{i}"), w[i], w[i - 1], 3, rng)?;
        }
        for i in 1..4 {
            insert_conv(&mut params, &format!("agg{i}"), arch.encoder_channels, w[i], 1, rng)?;
        }
        Ok(ReconEncoder {
            params,
            image_size: arch.image_size,
            image_channels: arch.image_channels,
            calls: AtomicUsize::new(0),
        })
    }

    /// `F̂_I = G_E(X)` at the retrieval feature resolution.
    pub fn forward<'g>(&self, p: &BoundParams<'g, E>, x: Var<'g, E>) -> Result<Var<'g, E>> {
        check_image(&x.shape(), self.image_channels, self.image_size)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = conv_bias(p, "stem", x, ENCODER_STRIDES[0], 1)?.relu();
        let mut out: Option<Var<'g, E>> = None;
        for i in 1..4 {
            h = conv_bias(p, &format!("block{i}"), h, ENCODER_STRIDES[i], 1)?.relu();
            let proj = conv_bias(p, &format!("agg{i}"), h, 1, 0)?;
            out = Some(match out {
                Some(acc) => acc.add(proj)?,
                None => proj,
            });
        }
        Ok(out.expect("three blocks"))
    }

    /// Number of forward passes since construction.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn cast<F: Element>(&self) -> ReconEncoder<F> {
        ReconEncoder {
            params: self.params.cast(),
            image_size: self.image_size,
            image_channels: self.image_channels,
            calls: AtomicUsize::new(0),
        }
    }
}

/// U-Net decoder: `D` stride-2 down blocks, `D − 1` up blocks with skip
/// connections, and a transposed-conv colorization block squashed into (0, 1).
#[derive(Debug)]
pub struct ReconDecoder<E: Element = f32> {
    pub params: ParamSet<E>,
    depth: usize,
    in_channels: usize,
    out_channels: usize,
    calls: AtomicUsize,
}

impl<E: Element> Clone for ReconDecoder<E> {
    fn clone(&self) -> Self {
        ReconDecoder {
            params: self.params.clone(),
            depth: self.depth,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            calls: AtomicUsize::new(0),
        }
    }
}

const MAX_DECODER_WIDTH_MULT: usize = 8;

impl<E: Element> ReconDecoder<E> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let d = arch.decoder_depth;
        let width = |i: usize| arch.decoder_width * (1 << i.min(3)).min(MAX_DECODER_WIDTH_MULT);
        let mut params = ParamSet::new();
        let mut c_in = arch.encoder_channels;
        for i in 0..d {
            insert_conv(&mut params, &format!("down{i}"), width(i), c_in, 4, rng)?;
            c_in = width(i);
        }
        // up j consumes the deepest map (j = 0) or [up_{j−1}, down_{d−1−j}]
        for j in 0..d.saturating_sub(1) {
            let c_in = if j == 0 {
                width(d - 1)
            } else {
                width(d - 1 - j) * 2
            };
            insert_conv_transpose(&mut params, &format!("up{j}"), c_in, width(d - 2 - j), 4, rng)?;
        }
        let c_in = if d == 1 { width(0) } else { width(0) * 2 };
        insert_conv_transpose(&mut params, "color", c_in, arch.image_channels, 4, rng)?;
        Ok(ReconDecoder {
            params,
            depth: d,
            in_channels: arch.encoder_channels,
            out_channels: arch.image_channels,
            calls: AtomicUsize::new(0),
        })
    }

    /// Decodes an image-resolution representation into an image in (0, 1).
    pub fn forward<'g>(&self, p: &BoundParams<'g, E>, cx: Var<'g, E>) -> Result<Var<'g, E>> {
        let shape = cx.shape();
        let div = 1usize << self.depth;
        if shape.len() != 4
            || shape[1] != self.in_channels
            || shape[2] % div != 0
            || shape[3] % div != 0
        {
            return Err(Error::dim(
                "recon_decode",
                format!(
                    "expected (N, {}, H, W) with H, W divisible by {div}, got {shape:?}",
                    self.in_channels
                ),
            ));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let slope = E::from_f64_lossy(LEAKY_SLOPE);
        let eps = E::from_f64_lossy(NORM_EPS);
        let norm_act = |v: Var<'g, E>| -> Result<Var<'g, E>> {
            let s = v.shape();
            let v = if s[2] * s[3] > 1 { v.instance_norm(eps)? } else { v };
            Ok(v.leaky_relu(slope))
        };
        let mut downs = Vec::with_capacity(self.depth);
        let mut h = cx;
        for i in 0..self.depth {
            h = norm_act(conv_bias(p, &format!("down{i}"), h, 2, 1)?)?;
            downs.push(h);
        }
        let mut up = downs[self.depth - 1];
        for j in 0..self.depth - 1 {
            let input = if j == 0 {
                up
            } else {
                up.concat_channels(downs[self.depth - 1 - j])?
            };
            up = norm_act(deconv_bias(p, &format!("up{j}"), input)?)?;
        }
        let input = if self.depth == 1 {
            up
        } else {
            up.concat_channels(downs[0])?
        };
        Ok(deconv_bias(p, "color", input)?.sigmoid())
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cast<F: Element>(&self) -> ReconDecoder<F> {
        ReconDecoder {
            params: self.params.cast(),
            depth: self.depth,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            calls: AtomicUsize::new(0),
        }
    }
}

fn deconv_bias<'g, E: Element>(
    p: &BoundParams<'g, E>,
    name: &str,
    x: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let y = x.conv_transpose2d(p.get(&format!("{name}.weight"))?, 2, 1)?;
    y.add(p.get(&format!("{name}.bias"))?)
}
