//! Graph-based superpixel segmentation and pseudo-mask sampling.
//!
//! Segments are produced by Felzenszwalb-Huttenlocher greedy merging on a
//! 4-connected grid graph, followed by a minimum-size cleanup pass. One
//! segment within configurable area bounds is then sampled as a stand-in
//! foreground mask for self-supervised episodes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Image2, Mask2};

/// Parameters for segmentation and mask sampling.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SuperpixelConfig {
    pub scale_k: f32,
    pub min_size: usize,
    pub sigma: f32,
    pub area_min_frac: f32,
    pub area_max_frac: f32,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        // k mirrors the classic value of 100 on 8-bit intensities, rescaled
        // to the [0,1] range used here.
        SuperpixelConfig {
            scale_k: 100.0 / 255.0,
            min_size: 32,
            sigma: 0.8,
            area_min_frac: 0.004,
            area_max_frac: 0.4,
        }
    }
}

/// A dense labelling of an image into segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabels {
    pub h: usize,
    pub w: usize,
    /// Row-major label per pixel, each in `[0, num_segments)`.
    pub labels: Vec<u32>,
    pub num_segments: usize,
}

impl SegmentLabels {
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    /// Pixel count of every segment, indexed by label.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.num_segments];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    /// Indicator mask of one segment.
    pub fn mask_of(&self, label: u32) -> Mask2 {
        Mask2::from_fn(self.h, self.w, |y, x| self.label(y, x) == label)
    }
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Max internal edge weight of each root's component.
    int_diff: Vec<f32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            int_diff: vec![0.0; n],
        }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let gp = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = gp;
            a = gp;
        }
        a
    }

    /// Merge the components rooted at `a` and `b` joined by an edge of
    /// weight `w`. Roots must differ.
    fn union(&mut self, a: u32, b: u32, w: f32) {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        let d = self.int_diff[big as usize]
            .max(self.int_diff[small as usize])
            .max(w);
        self.int_diff[big as usize] = d;
    }
}

/// Separable Gaussian blur, kernel truncated at three standard deviations,
/// replicated edges. A zero (or sub-truncation) sigma is an identity.
fn gaussian_smooth(image: &Image2, sigma: f32) -> Image2 {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).floor() as usize;
    if radius == 0 {
        return image.clone();
    }
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        kernel.push((-0.5 * (d / sigma) * (d / sigma)).exp());
    }
    let total: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }

    let (h, w) = (image.h, image.w);
    let mut horiz = Image2::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let xx = (x + i).saturating_sub(radius).min(w - 1);
                acc += kv * image.get(y, xx);
            }
            horiz.set(y, x, acc);
        }
    }
    let mut out = Image2::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let yy = (y + i).saturating_sub(radius).min(h - 1);
                acc += kv * horiz.get(yy, x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

/// Greedy graph-merge segmentation.
///
/// The image is smoothed, turned into a 4-connected grid graph with
/// absolute-intensity-difference edge weights, and merged in ascending
/// weight order under the predicate
/// `w <= min(Int(C1) + k/|C1|, Int(C2) + k/|C2|)`. A final pass over the
/// same sorted edges merges any component smaller than `min_size` into its
/// nearest-edge neighbour, and labels are renumbered densely in first-pixel
/// scan order.
///
/// Edges are enumerated right-then-down from each pixel in row-major order,
/// and the sort is stable, so equal weights resolve by (row, col, direction).
pub fn felzenszwalb(
    image: &Image2,
    scale_k: f32,
    min_size: usize,
    sigma: f32,
) -> Result<SegmentLabels> {
    let (h, w) = (image.h, image.w);
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "felzenszwalb: image must be at least 2x2, got {h}x{w}"
        )));
    }
    if !(scale_k > 0.0) {
        return Err(Error::Dimension(format!("felzenszwalb: scale_k must be positive, got {scale_k}")));
    }
    if min_size < 1 {
        return Err(Error::Dimension("felzenszwalb: min_size must be at least 1".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Dimension(format!("felzenszwalb: sigma must be non-negative, got {sigma}")));
    }

    let smoothed = gaussian_smooth(image, sigma);
    let n = h * w;

    let mut edges: Vec<(f32, u32, u32)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as u32;
            let v = smoothed.get(y, x);
            if x + 1 < w {
                edges.push(((v - smoothed.get(y, x + 1)).abs(), i, i + 1));
            }
            if y + 1 < h {
                edges.push(((v - smoothed.get(y + 1, x)).abs(), i, i + w as u32));
            }
        }
    }
    edges.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("edge weights are finite"));

    let mut uf = UnionFind::new(n);
    for &(wgt, a, b) in &edges {
        let ra = uf.find(a);
        let rb = uf.find(b);
        if ra == rb {
            continue;
        }
        let ta = uf.int_diff[ra as usize] + scale_k / uf.size[ra as usize] as f32;
        let tb = uf.int_diff[rb as usize] + scale_k / uf.size[rb as usize] as f32;
        if wgt <= ta.min(tb) {
            uf.union(ra, rb, wgt);
        }
    }

    for &(wgt, a, b) in &edges {
        let ra = uf.find(a);
        let rb = uf.find(b);
        if ra != rb
            && ((uf.size[ra as usize] as usize) < min_size
                || (uf.size[rb as usize] as usize) < min_size)
        {
            uf.union(ra, rb, wgt);
        }
    }

    let mut label_of_root = vec![u32::MAX; n];
    let mut labels = vec![0u32; n];
    let mut next = 0u32;
    for i in 0..n {
        let r = uf.find(i as u32);
        if label_of_root[r as usize] == u32::MAX {
            label_of_root[r as usize] = next;
            next += 1;
        }
        labels[i] = label_of_root[r as usize];
    }

    Ok(SegmentLabels { h, w, labels, num_segments: next as usize })
}

/// Draw one segment whose area lies within the given fraction bounds and
/// return its indicator mask.
///
/// When no segment qualifies, the segment whose area is closest to the
/// admissible interval is used instead (smallest label on ties), so the call
/// always produces a mask.
pub fn sample_pseudo_mask(
    labels: &SegmentLabels,
    rng: &mut ChaCha8Rng,
    area_min_frac: f32,
    area_max_frac: f32,
) -> Result<Mask2> {
    if !(0.0 <= area_min_frac && area_min_frac < area_max_frac && area_max_frac <= 1.0) {
        return Err(Error::Contract(format!(
            "sample_pseudo_mask: bad area bounds [{area_min_frac}, {area_max_frac}]"
        )));
    }
    let hw = (labels.h * labels.w) as f32;
    let lo = area_min_frac * hw;
    let hi = area_max_frac * hw;
    let areas = labels.areas();

    let admissible: Vec<u32> = (0..labels.num_segments as u32)
        .filter(|&l| {
            let a = areas[l as usize] as f32;
            a >= lo && a <= hi
        })
        .collect();

    let chosen = if admissible.is_empty() {
        let mut best = 0u32;
        let mut best_dist = f32::INFINITY;
        for (l, &a) in areas.iter().enumerate() {
            let a = a as f32;
            let dist = if a < lo { lo - a } else { a - hi };
            if dist < best_dist {
                best_dist = dist;
                best = l as u32;
            }
        }
        best
    } else {
        admissible[rng.gen_range(0..admissible.len())]
    };

    Ok(labels.mask_of(chosen))
}

/// Convenience wrapper applying a whole config.
pub fn pseudo_mask_for_slice(
    image: &Image2,
    cfg: &SuperpixelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Mask2> {
    let labels = felzenszwalb(image, cfg.scale_k, cfg.min_size, cfg.sigma)?;
    sample_pseudo_mask(&labels, rng, cfg.area_min_frac, cfg.area_max_frac)
}
