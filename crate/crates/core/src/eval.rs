//! Dice metric and the 3-part one-shot validation protocol.
//!
//! Validation segments every slice of each held-out scan using the middle
//! slice of the index-aligned support-scan third as the one-shot exemplar,
//! and pools intersections over slices into a per-scan volumetric dice.

use serde::{Deserialize, Serialize};

use crate::datastore::ClientDataset;
use crate::episodes::{class_mask, downstream_episode, part_bounds};
use crate::error::{Error, Result};
use crate::grid::Mask2;
use crate::losses::threshold_fg;
use crate::protoseg::{segment, stage_params, EncoderConfig, ProtoConfig};
use crate::tensor::{ModelParams, Tape};

/// On-the-fly pooled dice: 2·ΣI / Σ(|P|+|G|) over everything added.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiceAccum {
    inter: u64,
    total: u64,
}

impl DiceAccum {
    pub fn add_slice(&mut self, pred: &Mask2, gt: &Mask2) -> Result<()> {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::Dimension(format!(
                "dice: pred {}x{} vs gt {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        let mut inter = 0u64;
        for (p, g) in pred.data.iter().zip(&gt.data) {
            if *p != 0 && *g != 0 {
                inter += 1;
            }
        }
        self.inter += inter;
        self.total += (pred.area() + gt.area()) as u64;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0 && self.inter == 0
    }

    /// Pooled dice in [0,1]; vacuously 1.0 when nothing had any area.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            2.0 * self.inter as f64 / self.total as f64
        }
    }
}

/// Dice of a single mask pair.
pub fn dice_score(pred: &Mask2, gt: &Mask2) -> Result<f64> {
    let mut acc = DiceAccum::default();
    acc.add_slice(pred, gt)?;
    Ok(acc.value())
}

/// Per-class validation outcome for one client. Dice values are percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiceReport {
    pub class_id: u8,
    /// `(scan_id, dice_percent)` for each validation scan, in scan order.
    pub per_scan: Vec<(u32, f64)>,
    /// Mean over evaluated scans; absent when every part was skipped.
    pub mean_percent: Option<f64>,
    /// Parts whose support-slice class mask was empty.
    pub skipped_parts: usize,
}

/// Run the 3-part one-shot protocol for one class over a client's
/// validation scans. Parts with an empty support mask are skipped and
/// counted; a class absent from all three support slices yields a report
/// of skips, not an error.
pub fn one_shot_validate(
    params: &ModelParams<f32>,
    enc: &EncoderConfig,
    proto: &ProtoConfig,
    client: &ClientDataset,
    class_id: u8,
) -> Result<DiceReport> {
    let support = client.support_scan();
    if support.labels.is_none() {
        return Err(Error::Data(format!(
            "client {}: support scan {} has no labels",
            client.client_id, support.scan_id
        )));
    }
    let support_slices: Vec<_> = (0..support.d).map(|z| support.slice(z)).collect();
    let support_labels: Vec<_> =
        (0..support.d).map(|z| support.labelmap(z).expect("labels checked above")).collect();

    let mut skipped_parts = 0usize;
    let mut per_scan_accum: Vec<(u32, DiceAccum)> = client
        .validation
        .iter()
        .map(|&s| (client.scans[s].scan_id, DiceAccum::default()))
        .collect();
    let mut any_part = false;

    for part in 0..3 {
        let (s_start, s_end) = part_bounds(support.d)[part];
        let mid = crate::episodes::middle_slice(s_start, s_end);
        if class_mask(&support_labels[mid], class_id).is_empty() {
            skipped_parts += 1;
            continue;
        }
        any_part = true;
        for (vi, &scan_idx) in client.validation.iter().enumerate() {
            let scan = &client.scans[scan_idx];
            if scan.labels.is_none() {
                return Err(Error::Data(format!(
                    "client {}: validation scan {} has no labels",
                    client.client_id, scan.scan_id
                )));
            }
            let (start, end) = part_bounds(scan.d)[part];
            for z in start..end {
                let query_slice = scan.slice(z);
                let query_labels = scan.labelmap(z).expect("labels checked above");
                let episode = downstream_episode(
                    &support_slices,
                    &support_labels,
                    &query_slice,
                    &query_labels,
                    class_id,
                    part,
                )?
                .expect("support mask checked non-empty for this part");
                let mut tape = Tape::<f32>::new();
                let staged = stage_params(&mut tape, params);
                let pred = segment(
                    &mut tape,
                    enc,
                    proto,
                    &staged,
                    &episode.support_image,
                    &episode.support_mask,
                    &episode.query_image,
                )?;
                let pred_mask = threshold_fg(&tape, pred);
                per_scan_accum[vi].1.add_slice(&pred_mask, &episode.query_gt_mask)?;
            }
        }
    }

    let per_scan: Vec<(u32, f64)> = per_scan_accum
        .iter()
        .filter(|(_, acc)| !acc.is_empty() || any_part)
        .map(|(id, acc)| (*id, 100.0 * acc.value()))
        .collect();
    let mean_percent = if any_part && !per_scan.is_empty() {
        Some(per_scan.iter().map(|(_, d)| d).sum::<f64>() / per_scan.len() as f64)
    } else {
        None
    };
    Ok(DiceReport { class_id, per_scan, mean_percent, skipped_parts })
}
