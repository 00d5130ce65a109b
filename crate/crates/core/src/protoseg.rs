//! Encoder and the prototype segmentation pipeline.
//!
//! `segment` composes: encode both images, pool the support mask onto the
//! feature grid, collect foreground/background prototype vectors, score the
//! query features against them, blend prototypes per pixel with
//! softmax-weighted aggregation, and emit a two-channel probability map at
//! the original resolution. Everything runs on the tape so the whole
//! pipeline is differentiable with respect to the encoder parameters.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Image2, Mask2};
use crate::rng;
use crate::tensor::{real, ModelParams, Real, Tape, Tensor, TensorId};

/// Shape of the convolutional encoder: three 3x3 blocks with relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub widths: [usize; 3],
    pub strides: [usize; 3],
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { widths: [16, 32, 64], strides: [1, 2, 2], kernel: 3 }
    }
}

impl EncoderConfig {
    /// Overall spatial downsampling factor.
    pub fn down_factor(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.widths[2]
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

/// Thresholds and sharpness constants of the prototype head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtoConfig {
    pub tau_fg: f32,
    pub tau_bg: f32,
    /// Multiplier on cosine scores before the per-pixel prototype softmax.
    pub alpha_w: f32,
    /// Multiplier on cosine logits before the fg/bg softmax.
    pub alpha_p: f32,
    pub cos_eps: f32,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig { tau_fg: 0.5, tau_bg: 0.5, alpha_w: 20.0, alpha_p: 20.0, cos_eps: 1e-8 }
    }
}

/// Fresh He-initialized encoder parameters (biases zero).
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> ModelParams<f32> {
    let mut rng = rng::seeded(seed);
    let mut params = ModelParams::new();
    let mut cin = 1usize;
    for (i, (&cout, _)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
        let k = cfg.kernel;
        let fan_in = (cin * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0f32, std).expect("std is positive");
        let wdata: Vec<f32> = (0..cout * cin * k * k).map(|_| normal.sample(&mut rng)).collect();
        params.push(
            &format!("conv{i}.weight"),
            Tensor::new(vec![cout, cin, k, k], wdata).expect("shape matches data"),
        );
        params.push(&format!("conv{i}.bias"), Tensor::zeros(&[cout]));
        cin = cout;
    }
    params
}

/// Put every parameter on the tape as a differentiable leaf, in order.
pub fn stage_params<R: Real>(tape: &mut Tape<R>, params: &ModelParams<R>) -> Vec<TensorId> {
    params.iter().map(|p| tape.leaf(p.value.clone())).collect()
}

/// Copy tape gradients back into the parameter store, accumulating.
pub fn harvest_grads<R: Real>(
    tape: &Tape<R>,
    staged: &[TensorId],
    params: &mut ModelParams<R>,
) -> Result<()> {
    if staged.len() != params.len() {
        return Err(Error::Contract(format!(
            "harvest_grads: {} staged ids for {} params",
            staged.len(),
            params.len()
        )));
    }
    for (i, &id) in staged.iter().enumerate() {
        let g = tape.grad(id).ok_or_else(|| {
            Error::Contract(format!("harvest_grads: no gradient for parameter {i}"))
        })?;
        params.accumulate_grad(i, &g)?;
    }
    Ok(())
}

/// Lift a grayscale image onto the tape as a constant `[1, H, W]` tensor.
pub fn image_tensor<R: Real>(tape: &mut Tape<R>, image: &Image2) -> TensorId {
    let data = image.data.iter().map(|&v| real::<R>(v)).collect();
    let t = Tensor { shape: vec![1, image.h, image.w], data };
    tape.constant(t)
}

/// Forward pass of the encoder; input `[1, H, W]`, output
/// `[C, H/d, W/d]` where `d` is the config's downsampling factor.
pub fn encode<R: Real>(
    tape: &mut Tape<R>,
    cfg: &EncoderConfig,
    staged: &[TensorId],
    image: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Dimension(format!("encode: want [1,H,W], got {shape:?}")));
    }
    let d = cfg.down_factor();
    if shape[1] % d != 0 || shape[2] % d != 0 {
        return Err(Error::Dimension(format!(
            "encode: dims {}x{} not divisible by {d}",
            shape[1], shape[2]
        )));
    }
    if staged.len() != 6 {
        return Err(Error::Contract(format!("encode: expected 6 parameters, got {}", staged.len())));
    }
    let mut x = image;
    for i in 0..3 {
        let w = staged[2 * i];
        let b = staged[2 * i + 1];
        x = tape.conv2d(x, w, Some(b), cfg.strides[i], cfg.pad())?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Foreground/background prototype vectors with their feature-grid
/// provenance. Either side may come from the masked-average fallback, in
/// which case its coordinate list is empty.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `[n_f, C]` tensor on the tape.
    pub fg: TensorId,
    /// `[n_b, C]` tensor on the tape.
    pub bg: TensorId,
    pub fg_coords: Vec<(usize, usize)>,
    pub bg_coords: Vec<(usize, usize)>,
    pub fg_fallback: bool,
    pub bg_fallback: bool,
}

/// Per-cell foreground pixel counts of a mask pooled onto an `h x w` grid
/// with square blocks of side `factor`.
fn pooled_counts(mask: &Mask2, h: usize, w: usize, factor: usize) -> Vec<u32> {
    let mut counts = vec![0u32; h * w];
    for by in 0..h {
        for bx in 0..w {
            let mut acc = 0u32;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += mask.get(by * factor + dy, bx * factor + dx) as u32;
                }
            }
            counts[by * w + bx] = acc;
        }
    }
    counts
}

/// Downsample the support mask onto the feature grid and gather prototypes.
///
/// Cells whose pooled foreground fraction exceeds `tau_fg` provide
/// foreground prototypes; cells below `tau_bg` provide background ones. An
/// empty side falls back to a single soft masked-average vector, weighted by
/// the pooled fractions (complemented fractions for background).
pub fn extract_prototypes<R: Real>(
    tape: &mut Tape<R>,
    feats: TensorId,
    mask: &Mask2,
    cfg: &ProtoConfig,
) -> Result<PrototypeSet> {
    let fshape = tape.shape(feats).to_vec();
    if fshape.len() != 3 {
        return Err(Error::Dimension(format!("extract_prototypes: want [C,h,w], got {fshape:?}")));
    }
    let (h, w) = (fshape[1], fshape[2]);
    if h == 0 || mask.h % h != 0 || w == 0 || mask.w % w != 0 || mask.h / h != mask.w / w {
        return Err(Error::Dimension(format!(
            "extract_prototypes: mask {}x{} does not pool onto {h}x{w}",
            mask.h, mask.w
        )));
    }
    let factor = mask.h / h;
    let ff = (factor * factor) as f32;
    let counts = pooled_counts(mask, h, w, factor);

    // Integer-exact threshold comparison: pooled > tau <=> count > tau*f².
    let fg_thresh = cfg.tau_fg * ff;
    let bg_thresh = cfg.tau_bg * ff;
    let mut fg_coords = Vec::new();
    let mut bg_coords = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = counts[y * w + x] as f32;
            if c > fg_thresh {
                fg_coords.push((y, x));
            }
            if c < bg_thresh {
                bg_coords.push((y, x));
            }
        }
    }

    let eps = real::<R>(1e-8);
    let fg_fallback = fg_coords.is_empty();
    let fg = if fg_fallback {
        let weights: Vec<R> = counts.iter().map(|&c| real::<R>(c as f32 / ff)).collect();
        let mean = tape.masked_mean(feats, &weights, eps)?;
        tape.reshape(mean, &[1, fshape[0]])?
    } else {
        tape.gather_pixels(feats, fg_coords.clone())?
    };
    let bg_fallback = bg_coords.is_empty();
    let bg = if bg_fallback {
        let weights: Vec<R> =
            counts.iter().map(|&c| real::<R>((ff - c as f32) / ff)).collect();
        let mean = tape.masked_mean(feats, &weights, eps)?;
        tape.reshape(mean, &[1, fshape[0]])?
    } else {
        tape.gather_pixels(feats, bg_coords.clone())?
    };

    Ok(PrototypeSet { fg, bg, fg_coords, bg_coords, fg_fallback, bg_fallback })
}

/// Cosine similarity of every query feature against every prototype:
/// `([n_f,h,w], [n_b,h,w])`.
pub fn score_maps<R: Real>(
    tape: &mut Tape<R>,
    query_feats: TensorId,
    protos: &PrototypeSet,
    cfg: &ProtoConfig,
) -> Result<(TensorId, TensorId)> {
    let eps = real::<R>(cfg.cos_eps);
    let fg = tape.cosine_scores(query_feats, protos.fg, eps)?;
    let bg = tape.cosine_scores(query_feats, protos.bg, eps)?;
    Ok((fg, bg))
}

/// Blend a prototype list into one vector per pixel, weighted by a softmax
/// over `alpha_w`-scaled scores. `[n,h,w] x [n,C] -> [C,h,w]`.
pub fn aggregate_prototypes<R: Real>(
    tape: &mut Tape<R>,
    scores: TensorId,
    protos: TensorId,
    cfg: &ProtoConfig,
) -> Result<TensorId> {
    let scaled = tape.scale(scores, real::<R>(cfg.alpha_w));
    let weights = tape.softmax(scaled, 0)?;
    tape.combine_protos(weights, protos)
}

/// Two-channel prediction: softmax over `alpha_p`-scaled cosine logits
/// `[cos(q, bg_hat), cos(q, fg_hat)]`, bilinearly upsampled to the output
/// size. Channel 1 is the foreground probability.
pub fn predict<R: Real>(
    tape: &mut Tape<R>,
    query_feats: TensorId,
    fg_hat: TensorId,
    bg_hat: TensorId,
    out_h: usize,
    out_w: usize,
    cfg: &ProtoConfig,
) -> Result<TensorId> {
    let eps = real::<R>(cfg.cos_eps);
    let cos_bg = tape.cosine_fields(query_feats, bg_hat, eps)?;
    let cos_fg = tape.cosine_fields(query_feats, fg_hat, eps)?;
    let stacked = tape.stack(&[cos_bg, cos_fg])?;
    let logits = tape.scale(stacked, real::<R>(cfg.alpha_p));
    let probs = tape.softmax(logits, 0)?;
    tape.resize_bilinear(probs, out_h, out_w)
}

/// Full one-shot forward pass; returns the `[2, H, W]` probability map.
pub fn segment<R: Real>(
    tape: &mut Tape<R>,
    enc: &EncoderConfig,
    proto: &ProtoConfig,
    staged: &[TensorId],
    support_image: &Image2,
    support_mask: &Mask2,
    query_image: &Image2,
) -> Result<TensorId> {
    if support_image.h != query_image.h
        || support_image.w != query_image.w
        || support_mask.h != support_image.h
        || support_mask.w != support_image.w
    {
        return Err(Error::Dimension(format!(
            "segment: mismatched sizes {}x{} / {}x{} / mask {}x{}",
            support_image.h,
            support_image.w,
            query_image.h,
            query_image.w,
            support_mask.h,
            support_mask.w
        )));
    }
    let s_img = image_tensor(tape, support_image);
    let q_img = image_tensor(tape, query_image);
    let s_feats = encode(tape, enc, staged, s_img)?;
    let q_feats = encode(tape, enc, staged, q_img)?;
    let protos = extract_prototypes(tape, s_feats, support_mask, proto)?;
    let (fg_scores, bg_scores) = score_maps(tape, q_feats, &protos, proto)?;
    let fg_hat = aggregate_prototypes(tape, fg_scores, protos.fg, proto)?;
    let bg_hat = aggregate_prototypes(tape, bg_scores, protos.bg, proto)?;
    predict(tape, q_feats, fg_hat, bg_hat, query_image.h, query_image.w, proto)
}
