//! Synthetic phantom volumes, client datasets, and the FPV1 container.
//!
//! Volumes are multi-organ ellipsoid phantoms rendered under one of three
//! modality styles so that clients are genuinely non-IID. Partitioning
//! follows a 4:1 train:validation scan split with one held-out support scan.

mod fpv;

pub use fpv::{read_volume, read_volume_header, write_volume, VolumeHeader, FPV_HEADER_LEN, FPV_MAGIC};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::grid::{Image2, Mask2};
use crate::rng;

/// Imaging style applied when rendering a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityStyle {
    MrT2,
    MrT1,
    Ct,
}

impl ModalityStyle {
    pub fn code(self) -> u8 {
        match self {
            ModalityStyle::MrT2 => 0,
            ModalityStyle::MrT1 => 1,
            ModalityStyle::Ct => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ModalityStyle::MrT2),
            1 => Ok(ModalityStyle::MrT1),
            2 => Ok(ModalityStyle::Ct),
            other => Err(ParseError::UnknownStyle(other).into()),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "MR_T2" => Ok(ModalityStyle::MrT2),
            "MR_T1" => Ok(ModalityStyle::MrT1),
            "CT" => Ok(ModalityStyle::Ct),
            other => Err(Error::Config(format!(
                "unknown modality style {other:?} (expected MR_T2, MR_T1 or CT)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityStyle::MrT2 => "MR_T2",
            ModalityStyle::MrT1 => "MR_T1",
            ModalityStyle::Ct => "CT",
        }
    }
}

impl std::fmt::Display for ModalityStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One scan: a D×H×W voxel grid in [0,1] with an optional label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub voxels: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub style: ModalityStyle,
    pub scan_id: u32,
}

impl Volume {
    pub fn voxel_count(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Structural and range checks for a volume built or loaded elsewhere.
    pub fn validate(&self) -> Result<()> {
        if self.voxels.len() != self.voxel_count() {
            return Err(Error::Data(format!(
                "volume {}: {} voxels for dims {}x{}x{}",
                self.scan_id,
                self.voxels.len(),
                self.d,
                self.h,
                self.w
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.voxel_count() {
                return Err(Error::Data(format!(
                    "volume {}: label map size {} does not match voxels",
                    self.scan_id,
                    labels.len()
                )));
            }
        }
        if !self.voxels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("volume {}: voxels outside [0,1]", self.scan_id)));
        }
        Ok(())
    }

    /// Intensity slice `z` as an image.
    pub fn slice(&self, z: usize) -> Image2 {
        let hw = self.h * self.w;
        Image2 { h: self.h, w: self.w, data: self.voxels[z * hw..(z + 1) * hw].to_vec() }
    }

    /// Label slice `z` as a small-integer map, if labels are present.
    pub fn labelmap(&self, z: usize) -> Option<Mask2> {
        let hw = self.h * self.w;
        self.labels.as_ref().map(|l| Mask2 {
            h: self.h,
            w: self.w,
            data: l[z * hw..(z + 1) * hw].to_vec(),
        })
    }

    pub fn max_label(&self) -> u8 {
        self.labels.as_ref().map_or(0, |l| l.iter().copied().max().unwrap_or(0))
    }
}

struct Organ {
    center: [f32; 3],
    axes: [f32; 3],
    jitter_amp: f32,
    jitter_freq: [f32; 2],
    jitter_phase: [f32; 2],
    base: f32,
}

/// Signed ellipsoid coordinate with a low-frequency boundary wobble;
/// inside where the value is below 1.
fn organ_field(o: &Organ, zf: f32, yf: f32, xf: f32) -> f32 {
    let q = ((zf - o.center[0]) / o.axes[0]).powi(2)
        + ((yf - o.center[1]) / o.axes[1]).powi(2)
        + ((xf - o.center[2]) / o.axes[2]).powi(2);
    let tau = std::f32::consts::TAU;
    let j = o.jitter_amp
        * (o.jitter_freq[0] * yf * tau + o.jitter_phase[0]).sin()
        * (o.jitter_freq[1] * xf * tau + o.jitter_phase[1]).cos();
    q - j
}

/// Render a deterministic multi-organ phantom.
///
/// Organ 1 is a large central blob spanning most slices; further organs are
/// smaller satellites. Styles differ in organ/background contrast so that a
/// federation over mixed styles is non-IID by construction.
pub fn generate_phantom(
    seed: u64,
    style: ModalityStyle,
    n_slices: usize,
    hw: usize,
    n_organs: usize,
) -> Result<Volume> {
    if hw % 4 != 0 || hw == 0 {
        return Err(Error::Config(format!("phantom size {hw} must be a positive multiple of 4")));
    }
    if !(1..=4).contains(&n_organs) {
        return Err(Error::Config(format!("n_organs {n_organs} outside 1..=4")));
    }
    if n_slices == 0 {
        return Err(Error::Config("n_slices must be >= 1".into()));
    }
    let mut rng = rng::seeded(seed);

    // Style palette: background level, per-organ bases, bias strength, noise.
    let (bg, organ_base, bias_amp, noise_sigma): (f32, [f32; 4], f32, f32) = match style {
        ModalityStyle::MrT2 => (0.25, [0.85, 0.55, 0.65, 0.60], 0.20, 0.020),
        ModalityStyle::MrT1 => (0.60, [0.18, 0.35, 0.30, 0.40], 0.10, 0.020),
        ModalityStyle::Ct => (0.47, [0.67, 0.56, 0.60, 0.52], 0.0, 0.015),
    };

    let mut organs: Vec<Organ> = Vec::with_capacity(n_organs);
    for i in 0..n_organs {
        let (center, axes) = if i == 0 {
            (
                [
                    rng.gen_range(0.44f32..0.56),
                    rng.gen_range(0.42f32..0.58),
                    rng.gen_range(0.42f32..0.58),
                ],
                [
                    rng.gen_range(0.36f32..0.46),
                    rng.gen_range(0.16f32..0.24),
                    rng.gen_range(0.16f32..0.24),
                ],
            )
        } else {
            // Keep satellites clear of already placed organs.
            let mut c = [0.5f32, 0.5, 0.5];
            for _ in 0..20 {
                c = [
                    rng.gen_range(0.35f32..0.65),
                    rng.gen_range(0.18f32..0.82),
                    rng.gen_range(0.18f32..0.82),
                ];
                let clear = organs.iter().all(|o| {
                    let dy = c[1] - o.center[1];
                    let dx = c[2] - o.center[2];
                    (dy * dy + dx * dx).sqrt() > 0.30
                });
                if clear {
                    break;
                }
            }
            (
                c,
                [
                    rng.gen_range(0.20f32..0.32),
                    rng.gen_range(0.08f32..0.13),
                    rng.gen_range(0.08f32..0.13),
                ],
            )
        };
        organs.push(Organ {
            center,
            axes,
            jitter_amp: rng.gen_range(0.06f32..0.16),
            jitter_freq: [rng.gen_range(2.0f32..4.0), rng.gen_range(2.0f32..4.0)],
            jitter_phase: [
                rng.gen_range(0.0f32..std::f32::consts::TAU),
                rng.gen_range(0.0f32..std::f32::consts::TAU),
            ],
            base: (organ_base[i] + rng.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0),
        });
    }

    // Smooth intensity fields shared across the scan.
    let bias = [rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)];
    let texture_phase = [
        rng.gen_range(0.0f32..std::f32::consts::TAU),
        rng.gen_range(0.0f32..std::f32::consts::TAU),
    ];
    let noise = Normal::new(0.0f32, noise_sigma).expect("sigma is a positive constant");

    let n = n_slices * hw * hw;
    let mut voxels = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..n_slices {
        let zf = (z as f32 + 0.5) / n_slices as f32;
        for y in 0..hw {
            let yf = (y as f32 + 0.5) / hw as f32;
            for x in 0..hw {
                let xf = (x as f32 + 0.5) / hw as f32;
                let mut label = 0u8;
                let mut base = bg;
                for (i, o) in organs.iter().enumerate() {
                    if organ_field(o, zf, yf, xf) < 1.0 {
                        label = (i + 1) as u8;
                        base = o.base;
                        break;
                    }
                }
                let tau = std::f32::consts::TAU;
                let texture = 0.02
                    * ((2.0 * yf * tau + texture_phase[0]).sin()
                        + (2.0 * xf * tau + texture_phase[1]).cos());
                let field = 1.0 + bias_amp * ((yf - 0.5) * bias[0] + (xf - 0.5) * bias[1]);
                let v = (base * field + texture + noise.sample(&mut rng)).clamp(0.0, 1.0);
                voxels.push(v);
                labels.push(label);
            }
        }
    }

    Ok(Volume {
        d: n_slices,
        h: hw,
        w: hw,
        voxels,
        labels: Some(labels),
        style,
        scan_id: 0,
    })
}

/// Scan-count split: `(training, validation)` with one further scan (id 0)
/// reserved as the support scan. Validation takes the rounded fifth.
pub fn split_counts(count: usize) -> Result<(usize, usize)> {
    if count < 5 {
        return Err(Error::Config(format!(
            "client needs at least 5 scans for the 4:1 split plus a support scan, got {count}"
        )));
    }
    let validation = (count + 2) / 5;
    Ok((count - validation - 1, validation))
}

/// One client's generation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub count: usize,
    pub style: ModalityStyle,
    pub seed: u64,
}

/// Shared phantom geometry settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub hw: usize,
    pub n_organs: usize,
    /// Inclusive range of slices per scan, drawn per scan.
    pub slice_range: (usize, usize),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { hw: 64, n_organs: 3, slice_range: (30, 50) }
    }
}

/// A client's scans split into training, validation and the held-out
/// support scan. Scan ids index into `scans`.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub scans: Vec<Volume>,
    pub training: Vec<usize>,
    pub validation: Vec<usize>,
    pub support: usize,
    /// Total training slices; the |D_k| used for aggregation weights.
    pub slice_count: usize,
}

impl ClientDataset {
    /// Split an ordered scan list: scan 0 is the support, the last rounded
    /// fifth is validation, the rest train.
    pub fn partition(client_id: usize, scans: Vec<Volume>) -> Result<Self> {
        let (n_train, n_val) = split_counts(scans.len())?;
        let training: Vec<usize> = (1..1 + n_train).collect();
        let validation: Vec<usize> = (1 + n_train..scans.len()).collect();
        debug_assert_eq!(validation.len(), n_val);
        let slice_count = training.iter().map(|&i| scans[i].d).sum();
        Ok(ClientDataset { client_id, scans, training, validation, support: 0, slice_count })
    }

    /// Flat (scan, slice) index over the training scans, in scan order.
    pub fn training_slices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.slice_count);
        for &s in &self.training {
            for z in 0..self.scans[s].d {
                out.push((s, z));
            }
        }
        out
    }

    pub fn support_scan(&self) -> &Volume {
        &self.scans[self.support]
    }
}

/// Generate and partition every client in the roster.
pub fn partition_clients(
    specs: &[ClientSpec],
    phantom: &PhantomConfig,
) -> Result<Vec<ClientDataset>> {
    let mut out = Vec::with_capacity(specs.len());
    for (client_id, spec) in specs.iter().enumerate() {
        let scans = generate_client_scans(spec, phantom)?;
        out.push(ClientDataset::partition(client_id, scans)?);
    }
    Ok(out)
}

/// Generate one client's scans; scan ids are positional.
pub fn generate_client_scans(spec: &ClientSpec, phantom: &PhantomConfig) -> Result<Vec<Volume>> {
    if phantom.slice_range.0 > phantom.slice_range.1 || phantom.slice_range.0 == 0 {
        return Err(Error::Config(format!(
            "bad slice range {:?}",
            phantom.slice_range
        )));
    }
    let mut scans = Vec::with_capacity(spec.count);
    for scan_id in 0..spec.count {
        let scan_seed = rng::phantom_seed(spec.seed, scan_id as u64);
        let mut srng = rng::seeded(rng::mix(&[scan_seed, 0x51ce]));
        let n_slices = srng.gen_range(phantom.slice_range.0..=phantom.slice_range.1);
        let mut vol =
            generate_phantom(scan_seed, spec.style, n_slices, phantom.hw, phantom.n_organs)?;
        vol.scan_id = scan_id as u32;
        scans.push(vol);
    }
    Ok(scans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_phantom(42, ModalityStyle::MrT2, 8, 32, 3).unwrap();
        let b = generate_phantom(42, ModalityStyle::MrT2, 8, 32, 3).unwrap();
        assert_eq!(a.voxels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.voxels.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn single_organ_labels_are_binary() {
        let v = generate_phantom(7, ModalityStyle::Ct, 6, 32, 1).unwrap();
        let labels = v.labels.as_ref().unwrap();
        let mut seen: Vec<u8> = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn phantom_is_valid_and_in_range() {
        for style in [ModalityStyle::MrT2, ModalityStyle::MrT1, ModalityStyle::Ct] {
            let v = generate_phantom(3, style, 5, 16, 4).unwrap();
            v.validate().unwrap();
            assert_eq!(v.max_label(), 4);
        }
    }

    #[test]
    fn organ_one_contrast_at_least_point_15_under_every_style() {
        for style in [ModalityStyle::MrT2, ModalityStyle::MrT1, ModalityStyle::Ct] {
            for seed in 0..20u64 {
                let v = generate_phantom(seed, style, 6, 32, 2).unwrap();
                let labels = v.labels.as_ref().unwrap();
                let (mut s1, mut n1, mut s0, mut n0) = (0f64, 0usize, 0f64, 0usize);
                for (i, &l) in labels.iter().enumerate() {
                    if l == 1 {
                        s1 += v.voxels[i] as f64;
                        n1 += 1;
                    } else if l == 0 {
                        s0 += v.voxels[i] as f64;
                        n0 += 1;
                    }
                }
                assert!(n1 > 0, "{style} seed {seed}: organ 1 empty");
                let gap = (s1 / n1 as f64 - s0 / n0 as f64).abs();
                assert!(gap >= 0.15, "{style} seed {seed}: contrast {gap:.3}");
            }
        }
    }

    #[test]
    fn ct_and_mr_t2_slices_separate_by_mean_threshold() {
        let mut means: Vec<(f32, bool)> = Vec::new();
        for seed in 0..10u64 {
            for (style, is_ct) in [(ModalityStyle::MrT2, false), (ModalityStyle::Ct, true)] {
                let v = generate_phantom(1000 + seed, style, 6, 32, 3).unwrap();
                for z in 0..v.d {
                    let s = v.slice(z);
                    let m = s.data.iter().sum::<f32>() / s.data.len() as f32;
                    means.push((m, is_ct));
                }
            }
        }
        // Best single threshold on slice mean intensity.
        let mut best = 0usize;
        for &(t, _) in &means {
            let correct = means
                .iter()
                .filter(|&&(m, is_ct)| (m >= t) == is_ct)
                .count();
            best = best.max(correct).max(means.len() - correct);
        }
        let acc = best as f64 / means.len() as f64;
        assert!(acc >= 0.9, "threshold classifier accuracy {acc:.3}");
    }

    #[test]
    fn split_matches_documented_counts() {
        for (count, want_val) in [(20, 4), (15, 3), (25, 5)] {
            let (train, val) = split_counts(count).unwrap();
            assert_eq!(val, want_val);
            assert_eq!(train + val + 1, count);
        }
        assert_eq!(split_counts(5).unwrap(), (3, 1));
        assert!(matches!(split_counts(4), Err(Error::Config(_))));
    }

    #[test]
    fn split_ratio_holds_for_all_legal_counts() {
        for count in 5..=50usize {
            let (train, val) = split_counts(count).unwrap();
            assert_eq!(train + val + 1, count);
            assert!(val >= 1 && train >= 3);
            // (train + support) : validation stays 4:1 within one scan.
            let ideal = count as f64 / 5.0;
            assert!((val as f64 - ideal).abs() <= 1.0, "count {count}: val {val}");
        }
    }

    #[test]
    fn partition_disjointness_and_slice_count() {
        let spec = ClientSpec { count: 6, style: ModalityStyle::MrT1, seed: 9 };
        let phantom = PhantomConfig { hw: 16, n_organs: 1, slice_range: (4, 6) };
        let clients = partition_clients(std::slice::from_ref(&spec), &phantom).unwrap();
        let c = &clients[0];
        assert!(!c.training.contains(&c.support));
        assert!(!c.validation.contains(&c.support));
        for v in &c.validation {
            assert!(!c.training.contains(v));
        }
        assert_eq!(c.training.len() + c.validation.len() + 1, 6);
        let want: usize = c.training.iter().map(|&i| c.scans[i].d).sum();
        assert_eq!(c.slice_count, want);
        assert_eq!(c.training_slices().len(), want);
    }

    #[test]
    fn roster_pattern_validation_counts() {
        // The documented roster pattern, checked on split arithmetic alone.
        let counts = [20usize, 20, 15, 15, 25];
        let vals: Vec<usize> = counts.iter().map(|&c| split_counts(c).unwrap().1).collect();
        assert_eq!(vals, vec![4, 4, 3, 3, 5]);
    }

    #[test]
    fn bad_phantom_geometry_is_a_config_error() {
        assert!(matches!(
            generate_phantom(1, ModalityStyle::Ct, 4, 30, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_phantom(1, ModalityStyle::Ct, 4, 32, 5),
            Err(Error::Config(_))
        ));
    }
}
