//! Episode construction.
//!
//! A self-supervised episode takes one slice, samples a superpixel as a
//! pseudo foreground, and produces two independently augmented views: the
//! support view and the query view. The pseudo-mask rides through each
//! view's geometric transform so the pair stays a consistent one-shot task.
//!
//! Downstream (evaluation) episodes instead pair a labelled support slice
//! with a query slice from the same class, no augmentation involved.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{Image2, Mask2};
use crate::superpixel::{self, SuperpixelConfig};

/// Side of the square control grid used for elastic displacement fields.
const ELASTIC_GRID: usize = 4;
/// Maximum per-axis elastic displacement in pixels.
const ELASTIC_AMP: f32 = 2.0;

/// Sampling ranges for augmentation draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub rot_max_deg: f32,
    pub scale_lo: f32,
    pub scale_hi: f32,
    pub flip_prob: f32,
    pub elastic_prob: f32,
    pub gamma_lo: f32,
    pub gamma_hi: f32,
    pub noise_max: f32,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rot_max_deg: 20.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            flip_prob: 0.5,
            elastic_prob: 0.5,
            gamma_lo: 0.7,
            gamma_hi: 1.4,
            noise_max: 0.05,
        }
    }
}

/// One concrete augmentation: the geometric part applies to image and mask
/// alike, the intensity part (gamma, noise) to the image only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f32,
    pub scale: f32,
    pub hflip: bool,
    /// Row-major `(dy, dx)` displacements on an `ELASTIC_GRID`² control
    /// grid, present when the elastic deformation is on.
    pub elastic: Option<Vec<(f32, f32)>>,
    pub gamma: f32,
    pub noise_sigma: f32,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            rotation_deg: 0.0,
            scale: 1.0,
            hflip: false,
            elastic: None,
            gamma: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, ranges: &AugmentRanges) -> Self {
        let rotation_deg = rng.gen_range(-ranges.rot_max_deg..=ranges.rot_max_deg);
        let scale = rng.gen_range(ranges.scale_lo..=ranges.scale_hi);
        let hflip = rng.gen_range(0.0f32..1.0) < ranges.flip_prob;
        let elastic = if rng.gen_range(0.0f32..1.0) < ranges.elastic_prob {
            let pts = (0..ELASTIC_GRID * ELASTIC_GRID)
                .map(|_| {
                    (
                        rng.gen_range(-ELASTIC_AMP..=ELASTIC_AMP),
                        rng.gen_range(-ELASTIC_AMP..=ELASTIC_AMP),
                    )
                })
                .collect();
            Some(pts)
        } else {
            None
        };
        let gamma = rng.gen_range(ranges.gamma_lo..=ranges.gamma_hi);
        let noise_sigma = rng.gen_range(0.0..=ranges.noise_max);
        AugmentSpec { rotation_deg, scale, hflip, elastic, gamma, noise_sigma }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && !self.hflip && self.elastic.is_none()
    }

    /// Destination-to-source coordinate map of the geometric part.
    ///
    /// The forward transform is flip, then rotate-and-scale about the image
    /// centre, then the elastic push; here it is evaluated inverted so every
    /// output pixel pulls from exactly one source location.
    fn src_of(&self, y: f32, x: f32, h: usize, w: usize) -> (f32, f32) {
        let (mut sy, mut sx) = (y, x);
        if let Some(grid) = &self.elastic {
            let (dy, dx) = elastic_displacement(grid, y, x, h, w);
            sy += dy;
            sx += dx;
        }
        if self.rotation_deg != 0.0 || self.scale != 1.0 {
            let cy = (h as f32 - 1.0) / 2.0;
            let cx = (w as f32 - 1.0) / 2.0;
            let theta = -self.rotation_deg.to_radians();
            let (sin, cos) = theta.sin_cos();
            let (ry, rx) = (sy - cy, sx - cx);
            let inv_s = 1.0 / self.scale;
            sy = cy + (cos * ry - sin * rx) * inv_s;
            sx = cx + (sin * ry + cos * rx) * inv_s;
        }
        if self.hflip {
            sx = (w as f32 - 1.0) - sx;
        }
        (sy, sx)
    }
}

/// Bilinear interpolation of the coarse control grid at pixel coordinates.
fn elastic_displacement(grid: &[(f32, f32)], y: f32, x: f32, h: usize, w: usize) -> (f32, f32) {
    let g = ELASTIC_GRID;
    let gy = (y / (h as f32 - 1.0)) * (g as f32 - 1.0);
    let gx = (x / (w as f32 - 1.0)) * (g as f32 - 1.0);
    let y0 = (gy.floor().max(0.0) as usize).min(g - 2);
    let x0 = (gx.floor().max(0.0) as usize).min(g - 2);
    let ty = (gy - y0 as f32).clamp(0.0, 1.0);
    let tx = (gx - x0 as f32).clamp(0.0, 1.0);
    let at = |yy: usize, xx: usize| grid[yy * g + xx];
    let lerp2 = |a: (f32, f32), b: (f32, f32), t: f32| {
        (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
    };
    let top = lerp2(at(y0, x0), at(y0, x0 + 1), tx);
    let bot = lerp2(at(y0 + 1, x0), at(y0 + 1, x0 + 1), tx);
    lerp2(top, bot, ty)
}

/// Apply the geometric part of a spec to an image with bilinear sampling;
/// out-of-frame sources read as zero.
pub fn warp_image(image: &Image2, spec: &AugmentSpec) -> Image2 {
    if spec.is_geometric_identity() {
        return image.clone();
    }
    let (h, w) = (image.h, image.w);
    Image2::from_fn(h, w, |y, x| {
        let (sy, sx) = spec.src_of(y as f32, x as f32, h, w);
        bilinear_zero(image, sy, sx)
    })
}

/// Apply the geometric part of a spec to a mask with nearest-neighbour
/// sampling; out-of-frame sources read as background.
pub fn warp_mask(mask: &Mask2, spec: &AugmentSpec) -> Mask2 {
    if spec.is_geometric_identity() {
        return mask.clone();
    }
    let (h, w) = (mask.h, mask.w);
    Mask2::from_fn(h, w, |y, x| {
        let (sy, sx) = spec.src_of(y as f32, x as f32, h, w);
        let iy = sy.round();
        let ix = sx.round();
        if iy < 0.0 || ix < 0.0 || iy >= h as f32 || ix >= w as f32 {
            false
        } else {
            mask.get(iy as usize, ix as usize) != 0
        }
    })
}

fn bilinear_zero(image: &Image2, sy: f32, sx: f32) -> f32 {
    let (h, w) = (image.h as isize, image.w as isize);
    let y0 = sy.floor();
    let x0 = sx.floor();
    let ty = sy - y0;
    let tx = sx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let sample = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            image.get(y as usize, x as usize)
        }
    };
    let top = sample(y0, x0) * (1.0 - tx) + sample(y0, x0 + 1) * tx;
    let bot = sample(y0 + 1, x0) * (1.0 - tx) + sample(y0 + 1, x0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Intensity part of a spec: gamma curve, then additive Gaussian noise,
/// clamped back into [0,1]. Consumes rng draws only when noise is active.
fn apply_intensity(image: &mut Image2, spec: &AugmentSpec, rng: &mut ChaCha8Rng) {
    if spec.gamma != 1.0 {
        for v in &mut image.data {
            *v = v.max(0.0).powf(spec.gamma);
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
        for v in &mut image.data {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
}

/// Where a slice came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRef {
    pub client_id: u32,
    pub scan_id: u32,
    pub slice_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub source: SliceRef,
    pub support_spec: AugmentSpec,
    pub query_spec: AugmentSpec,
}

/// A one-shot task: segment the query according to the support example.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_image: Image2,
    pub support_mask: Mask2,
    pub query_image: Image2,
    pub query_gt_mask: Mask2,
    pub meta: EpisodeMeta,
}

/// Attempts per view at drawing an augmentation that keeps the mask
/// non-empty before falling back to the identity transform.
const AUGMENT_RETRIES: usize = 5;

fn augment_view(
    slice: &Image2,
    mask: &Mask2,
    rng: &mut ChaCha8Rng,
    ranges: &AugmentRanges,
) -> (Image2, Mask2, AugmentSpec) {
    let mut spec = AugmentSpec::identity();
    let mut warped = mask.clone();
    for _attempt in 0..AUGMENT_RETRIES {
        let candidate = AugmentSpec::sample(rng, ranges);
        let m = warp_mask(mask, &candidate);
        if !m.is_empty() {
            spec = candidate;
            warped = m;
            break;
        }
    }
    let mut image = warp_image(slice, &spec);
    apply_intensity(&mut image, &spec, rng);
    (image, warped, spec)
}

/// Build a self-supervised episode from one raw slice.
///
/// Superpixels are computed on the un-augmented slice; the sampled
/// pseudo-mask is then carried through each view's geometric transform.
pub fn make_episode(
    slice: &Image2,
    source: SliceRef,
    rng: &mut ChaCha8Rng,
    sp: &SuperpixelConfig,
    ranges: &AugmentRanges,
) -> Result<Episode> {
    let pseudo = superpixel::pseudo_mask_for_slice(slice, sp, rng)?;
    let (support_image, support_mask, support_spec) = augment_view(slice, &pseudo, rng, ranges);
    let (query_image, query_gt_mask, query_spec) = augment_view(slice, &pseudo, rng, ranges);
    Ok(Episode {
        support_image,
        support_mask,
        query_image,
        query_gt_mask,
        meta: EpisodeMeta { source, support_spec, query_spec },
    })
}

/// Episode built from real labels for evaluation: the support is the middle
/// slice of one third of a labelled scan, the query is any other slice.
///
/// Returns `None` when the class has no pixels on the support slice, which
/// callers record as a skipped class rather than an error.
pub fn downstream_episode(
    support_slices: &[Image2],
    support_labelmaps: &[Mask2],
    query_slice: &Image2,
    query_labelmap: &Mask2,
    class_id: u8,
    part_index: usize,
) -> Result<Option<Episode>> {
    use crate::error::Error;
    if support_slices.len() != support_labelmaps.len() || support_slices.is_empty() {
        return Err(Error::Contract(format!(
            "downstream_episode: {} slices vs {} labelmaps",
            support_slices.len(),
            support_labelmaps.len()
        )));
    }
    if part_index >= 3 {
        return Err(Error::Contract(format!("downstream_episode: part_index {part_index} > 2")));
    }
    let (start, end) = part_bounds(support_slices.len())[part_index];
    let mid = middle_slice(start, end);
    let support_image = support_slices[mid].clone();
    let support_mask = class_mask(&support_labelmaps[mid], class_id);
    if support_mask.is_empty() {
        return Ok(None);
    }
    let query_gt_mask = class_mask(query_labelmap, class_id);
    let identity = AugmentSpec::identity();
    Ok(Some(Episode {
        support_image,
        support_mask,
        query_image: query_slice.clone(),
        query_gt_mask,
        meta: EpisodeMeta {
            source: SliceRef { client_id: 0, scan_id: 0, slice_index: mid as u32 },
            support_spec: identity.clone(),
            query_spec: identity,
        },
    }))
}

/// Binary mask of one class in a labelmap.
pub fn class_mask(labelmap: &Mask2, class_id: u8) -> Mask2 {
    Mask2::from_fn(labelmap.h, labelmap.w, |y, x| labelmap.get(y, x) == class_id)
}

/// Split `n` slices into three contiguous parts with boundaries at
/// `floor(p·n/3)`.
pub fn part_bounds(n: usize) -> [(usize, usize); 3] {
    let b = |p: usize| p * n / 3;
    [(b(0), b(1)), (b(1), b(2)), (b(2), b(3))]
}

/// Middle slice of a half-open range.
pub fn middle_slice(start: usize, end: usize) -> usize {
    start + (end - start) / 2
}
