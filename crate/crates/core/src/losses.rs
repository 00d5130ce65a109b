//! The fused training objective.
//!
//! Four terms: class-weighted cross-entropy on the query prediction, a
//! cyclic consistency pass that re-segments the support from the thresholded
//! query prediction, soft spatial dice, and dice on Sobel edge maps.
//! Baseline mode drops the two dice terms for ablation runs.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::grid::Mask2;
use crate::protoseg::{segment, EncoderConfig, ProtoConfig};
use crate::tensor::{real, Real, Tape, Tensor, TensorId};

/// Floor for log arguments inside the cross-entropy.
const LOG_CLAMP: f32 = 1e-8;
/// Stabilizer in both dice denominators.
const DICE_EPS: f32 = 1e-5;
/// Stabilizer under the edge-magnitude square root.
const EDGE_EPS: f32 = 1e-12;

/// Scalar values of each loss term for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cyclic: f64,
    pub spatial_dice: f64,
    pub edge_dice: f64,
    pub total: f64,
}

/// A built loss graph: the breakdown values plus the tape node to run
/// backward from.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLoss {
    pub breakdown: LossBreakdown,
    pub total_id: TensorId,
}

/// Inverse-frequency class weights `(w_bg, w_fg)` for a mask with `n_fg`
/// foreground pixels out of `n`. Degenerate masks put all weight on the
/// only class present.
fn class_weights(n_fg: usize, n: usize) -> (f32, f32) {
    let n_bg = n - n_fg;
    if n_fg == 0 {
        (1.0, 0.0)
    } else if n_bg == 0 {
        (0.0, 1.0)
    } else {
        (n_fg as f32 / n as f32, n_bg as f32 / n as f32)
    }
}

/// Class-weighted cross-entropy of a `[2, H, W]` soft prediction against a
/// binary ground truth: mean over pixels of `w_c · -log(pred[c])` at the
/// true class `c`, log clamped at 1e-8.
pub fn weighted_ce<R: Real>(
    tape: &mut Tape<R>,
    pred: TensorId,
    gt: &Mask2,
) -> Result<TensorId> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 3 || shape[0] != 2 || shape[1] != gt.h || shape[2] != gt.w {
        return Err(Error::Dimension(format!(
            "weighted_ce: pred {shape:?} vs gt {}x{}",
            gt.h, gt.w
        )));
    }
    let n = gt.h * gt.w;
    let (w_bg, w_fg) = class_weights(gt.area(), n);
    let inv_n = 1.0 / n as f32;

    // Constant selector map: w_c/N at the true class, 0 at the other.
    let mut wmap = vec![R::zero(); 2 * n];
    for (i, &g) in gt.data.iter().enumerate() {
        if g != 0 {
            wmap[n + i] = real::<R>(w_fg * inv_n);
        } else {
            wmap[i] = real::<R>(w_bg * inv_n);
        }
    }
    let wmap = tape.constant(Tensor { shape: shape.clone(), data: wmap });
    let logp = tape.ln_clamped(pred, real::<R>(LOG_CLAMP));
    let weighted = tape.mul(wmap, logp)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, real::<R>(-1.0)))
}

/// Soft spatial dice loss `1 − 2Σ(t⊙p) / (Σt + Σp + eps)` of a
/// differentiable `[H, W]` prediction against a binary truth.
pub fn spatial_dice<R: Real>(
    tape: &mut Tape<R>,
    p_true: &Mask2,
    p_pred: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(p_pred).to_vec();
    if shape != [p_true.h, p_true.w] {
        return Err(Error::Dimension(format!(
            "spatial_dice: pred {shape:?} vs truth {}x{}",
            p_true.h, p_true.w
        )));
    }
    let tdata: Vec<R> = p_true.data.iter().map(|&v| real::<R>(v as f32)).collect();
    let tmask = tape.constant(Tensor { shape: shape.clone(), data: tdata });
    dice_from_fields(tape, tmask, p_pred, real::<R>(p_true.area() as f32))
}

/// Shared dice arithmetic over two non-negative fields; `sum_true` is the
/// precomputed Σ of the first field (kept off-tape since it is constant).
fn dice_from_fields<R: Real>(
    tape: &mut Tape<R>,
    truth: TensorId,
    pred: TensorId,
    sum_true: R,
) -> Result<TensorId> {
    let prod = tape.mul(truth, pred)?;
    let inter = tape.sum(prod);
    let numer = tape.scale(inter, real::<R>(2.0));
    let pred_sum = tape.sum(pred);
    let denom = tape.offset(pred_sum, sum_true + real::<R>(DICE_EPS));
    let ratio = tape.div(numer, denom)?;
    let neg = tape.scale(ratio, real::<R>(-1.0));
    Ok(tape.offset(neg, R::one()))
}

/// Sobel gradient magnitude of an `[H, W]` field: 3x3 cross-correlations
/// with zero padding, combined as `sqrt(Gx² + Gy² + 1e-12)`.
pub fn sobel_edge<R: Real>(tape: &mut Tape<R>, field: TensorId) -> Result<TensorId> {
    let shape = tape.shape(field).to_vec();
    if shape.len() != 2 || shape[0] < 3 || shape[1] < 3 {
        return Err(Error::Dimension(format!("sobel_edge: want [H>=3, W>=3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let as3 = tape.reshape(field, &[1, h, w])?;
    let kx: Vec<R> = [-1.0f32, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]
        .iter()
        .map(|&v| real::<R>(v))
        .collect();
    let ky: Vec<R> = [-1.0f32, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]
        .iter()
        .map(|&v| real::<R>(v))
        .collect();
    let kx = tape.constant(Tensor { shape: vec![1, 1, 3, 3], data: kx });
    let ky = tape.constant(Tensor { shape: vec![1, 1, 3, 3], data: ky });
    let gx = tape.conv2d(as3, kx, None, 1, 1)?;
    let gy = tape.conv2d(as3, ky, None, 1, 1)?;
    let mag = tape.edge_magnitude(gx, gy, real::<R>(EDGE_EPS))?;
    tape.reshape(mag, &[h, w])
}

/// Dice loss between two edge maps; the formula is identical to
/// `spatial_dice` applied to the magnitude fields.
pub fn edge_dice<R: Real>(
    tape: &mut Tape<R>,
    e_true: TensorId,
    e_pred: TensorId,
) -> Result<TensorId> {
    if tape.shape(e_true) != tape.shape(e_pred) {
        return Err(Error::Dimension(format!(
            "edge_dice: {:?} vs {:?}",
            tape.shape(e_true),
            tape.shape(e_pred)
        )));
    }
    let st = crate::tensor::canonical_sum(&tape.value(e_true).data);
    dice_from_fields(tape, e_true, e_pred, st)
}

/// Threshold the foreground channel of a `[2, H, W]` prediction at 0.5 into
/// a detached binary mask.
pub fn threshold_fg<R: Real>(tape: &Tape<R>, pred: TensorId) -> Mask2 {
    let v = tape.value(pred);
    let (h, w) = (v.shape[1], v.shape[2]);
    let hw = h * w;
    let half = real::<R>(0.5);
    Mask2::from_fn(h, w, |y, x| v.data[hw + y * w + x] > half)
}

/// Cyclic consistency: re-segment the support image using the thresholded
/// query prediction as the support mask, scored by weighted cross-entropy
/// against the original support mask. The thresholded mask is a constant,
/// so gradients flow only through the second forward pass. An empty
/// reverse mask skips the term (zero loss).
pub fn cyclic_loss<R: Real>(
    tape: &mut Tape<R>,
    enc: &EncoderConfig,
    proto: &ProtoConfig,
    staged: &[TensorId],
    episode: &Episode,
    pred_query: TensorId,
) -> Result<TensorId> {
    let reverse = threshold_fg(tape, pred_query);
    if reverse.is_empty() {
        return Ok(tape.constant(Tensor::scalar(R::zero())));
    }
    let back = segment(
        tape,
        enc,
        proto,
        staged,
        &episode.query_image,
        &reverse,
        &episode.support_image,
    )?;
    weighted_ce(tape, back, &episode.support_mask)
}

/// Build the full loss graph for one episode. With `baseline` set, the two
/// dice terms are reported as zero and left out of the total.
pub fn total_loss<R: Real>(
    tape: &mut Tape<R>,
    enc: &EncoderConfig,
    proto: &ProtoConfig,
    staged: &[TensorId],
    episode: &Episode,
    baseline: bool,
) -> Result<EpisodeLoss> {
    let pred = segment(
        tape,
        enc,
        proto,
        staged,
        &episode.support_image,
        &episode.support_mask,
        &episode.query_image,
    )?;
    let ce = weighted_ce(tape, pred, &episode.query_gt_mask)?;
    let cyc = cyclic_loss(tape, enc, proto, staged, episode, pred)?;
    let base = tape.add(ce, cyc)?;

    let item = |tape: &Tape<R>, id: TensorId| -> f64 { tape.value(id).item().into() };
    if baseline {
        let breakdown = LossBreakdown {
            ce: item(tape, ce),
            cyclic: item(tape, cyc),
            spatial_dice: 0.0,
            edge_dice: 0.0,
            total: item(tape, base),
        };
        return Ok(EpisodeLoss { breakdown, total_id: base });
    }

    let pred_fg = tape.slice_channel(pred, 1)?;
    let sd = spatial_dice(tape, &episode.query_gt_mask, pred_fg)?;

    let gt_field: Vec<R> =
        episode.query_gt_mask.data.iter().map(|&v| real::<R>(v as f32)).collect();
    let gt_t = tape.constant(Tensor {
        shape: vec![episode.query_gt_mask.h, episode.query_gt_mask.w],
        data: gt_field,
    });
    let e_true = sobel_edge(tape, gt_t)?;
    let e_pred = sobel_edge(tape, pred_fg)?;
    let ed = edge_dice(tape, e_true, e_pred)?;

    let dice_sum = tape.add(sd, ed)?;
    let total = tape.add(base, dice_sum)?;
    let breakdown = LossBreakdown {
        ce: item(tape, ce),
        cyclic: item(tape, cyc),
        spatial_dice: item(tape, sd),
        edge_dice: item(tape, ed),
        total: item(tape, total),
    };
    Ok(EpisodeLoss { breakdown, total_id: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{AugmentSpec, EpisodeMeta, SliceRef};
    use crate::gradcheck::{central_diff, normwise_rel_err};
    use crate::grid::Image2;
    use crate::protoseg::{init_params, stage_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred_tensor(tape: &mut Tape<f32>, fg: &[f32], h: usize, w: usize) -> TensorId {
        let mut data = Vec::with_capacity(2 * h * w);
        for &p in fg {
            data.push(1.0 - p);
        }
        data.extend_from_slice(fg);
        tape.constant(Tensor::from_f32(vec![2, h, w], &data).unwrap())
    }

    #[test]
    fn perfect_prediction_has_zero_ce() {
        let gt = Mask2::from_fn(4, 4, |y, _| y < 2);
        let fg: Vec<f32> = gt.data.iter().map(|&v| v as f32).collect();
        let mut tape = Tape::<f32>::new();
        let pred = pred_tensor(&mut tape, &fg, 4, 4);
        let ce = weighted_ce(&mut tape, pred, &gt).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-6);
    }

    #[test]
    fn uniform_half_prediction_on_balanced_mask() {
        let gt = Mask2::from_fn(4, 4, |y, _| y < 2);
        let fg = vec![0.5f32; 16];
        let mut tape = Tape::<f64>::new();
        let mut data = Vec::new();
        for &p in &fg {
            data.push(1.0 - p);
        }
        data.extend_from_slice(&fg);
        let pred = tape.constant(Tensor::from_f32(vec![2, 4, 4], &data).unwrap());
        let ce = weighted_ce(&mut tape, pred, &gt).unwrap();
        let want = -0.5f64 * 0.5f64.ln();
        assert!((tape.value(ce).item() - want).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_on_true_class_stays_finite() {
        let gt = Mask2::from_fn(4, 4, |_, _| true);
        let fg = vec![0.0f32; 16];
        let mut tape = Tape::<f32>::new();
        let pred = pred_tensor(&mut tape, &fg, 4, 4);
        let ce = weighted_ce(&mut tape, pred, &gt).unwrap();
        let v = tape.value(ce).item();
        assert!(v.is_finite());
        // -ln(1e-8), all weight on the foreground class.
        assert!((v - (-(1e-8f32.ln()))).abs() < 1e-3);
    }

    #[test]
    fn empty_gt_reduces_to_background_term() {
        let gt = Mask2::zeros(4, 4);
        let fg = vec![0.25f32; 16];
        let mut tape = Tape::<f64>::new();
        let mut data = Vec::new();
        for &p in &fg {
            data.push(1.0 - p);
        }
        data.extend_from_slice(&fg);
        let pred = tape.constant(Tensor::from_f32(vec![2, 4, 4], &data).unwrap());
        let ce = weighted_ce(&mut tape, pred, &gt).unwrap();
        let want = -(0.75f64.ln());
        assert!((tape.value(ce).item() - want).abs() < 1e-6);
    }

    #[test]
    fn spatial_dice_matches_hand_values() {
        let mut tape = Tape::<f64>::new();
        // Self-match with 10 foreground pixels.
        let m = Mask2::from_fn(5, 4, |y, x| y * 4 + x < 10);
        let fg: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        let pred = tape.constant(Tensor::from_f32(vec![5, 4], &fg).unwrap());
        let d = spatial_dice(&mut tape, &m, pred).unwrap();
        let got = tape.value(d).item();
        let want = 1.0 - 20.0 / (20.0 + 1e-5);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");

        // Disjoint supports.
        let a = Mask2::from_fn(4, 4, |y, _| y < 2);
        let bfg: Vec<f32> = (0..16).map(|i| if i >= 8 { 1.0 } else { 0.0 }).collect();
        let predb = tape.constant(Tensor::from_f32(vec![4, 4], &bfg).unwrap());
        let d2 = spatial_dice(&mut tape, &a, predb).unwrap();
        assert!((tape.value(d2).item() - 1.0).abs() < 1e-9);

        // |true| = 4, |pred| = 4, overlap 2.
        let t = Mask2::from_fn(4, 4, |y, x| y == 0 && x < 4);
        let pfg: Vec<f32> =
            (0..16).map(|i| if (2..6).contains(&i) { 1.0 } else { 0.0 }).collect();
        let predc = tape.constant(Tensor::from_f32(vec![4, 4], &pfg).unwrap());
        let d3 = spatial_dice(&mut tape, &t, predc).unwrap();
        let want3 = 1.0 - 4.0 / (8.0 + 1e-5);
        assert!((tape.value(d3).item() - want3).abs() < 1e-9);
    }

    #[test]
    fn constant_field_has_no_edges() {
        // All-zero field: flat everywhere including the zero-padded border.
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::from_f32(vec![6, 6], &[0.0; 36]).unwrap());
        let ez = sobel_edge(&mut tape, z).unwrap();
        assert!(tape.value(ez).data.iter().all(|&v| v <= 1.01e-6));

        // Nonzero constant: interior is flat; the border sees the padding.
        let f = tape.constant(Tensor::from_f32(vec![6, 6], &[0.7; 36]).unwrap());
        let e = sobel_edge(&mut tape, f).unwrap();
        let v = tape.value(e);
        for y in 1..5 {
            for x in 1..5 {
                assert!(v.data[y * 6 + x] <= 1.01e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn vertical_step_yields_edge_value_four() {
        let mask = Mask2::from_fn(8, 8, |_, x| x >= 4);
        let field: Vec<f32> = mask.data.iter().map(|&v| v as f32).collect();
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::from_f32(vec![8, 8], &field).unwrap());
        let e = sobel_edge(&mut tape, f).unwrap();
        let v = tape.value(e);
        for y in 1..7 {
            assert_eq!(v.data[y * 8 + 3], 4.0, "row {y} col 3");
            assert_eq!(v.data[y * 8 + 4], 4.0, "row {y} col 4");
        }
        // Interior pixels away from the step are flat.
        for y in 1..7 {
            assert!(v.data[y * 8 + 1] < 1e-5);
            assert!(v.data[y * 8 + 6] < 1e-5);
        }
    }

    #[test]
    fn edge_map_commutes_with_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let m = Mask2::from_fn(8, 8, |_, _| rng.gen_bool(0.4));
            let field: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
            let flipped: Vec<f32> = m.flip_h().data.iter().map(|&v| v as f32).collect();
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(Tensor::from_f32(vec![8, 8], &field).unwrap());
            let b = tape.constant(Tensor::from_f32(vec![8, 8], &flipped).unwrap());
            let ea = sobel_edge(&mut tape, a).unwrap();
            let eb = sobel_edge(&mut tape, b).unwrap();
            let va = tape.value(ea);
            let vb = tape.value(eb);
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(
                        va.data[y * 8 + x].to_bits(),
                        vb.data[y * 8 + (7 - x)].to_bits(),
                        "({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn edge_dice_hand_value_and_bounds() {
        let mut tape = Tape::<f64>::new();
        // Identical unit-valued maps with Σe = 8: 1 − 16/(16 + 1e-5).
        let vals: Vec<f32> =
            (0..16).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let e = tape.constant(Tensor::from_f32(vec![4, 4], &vals).unwrap());
        let d = edge_dice(&mut tape, e, e).unwrap();
        let want = 1.0 - 16.0 / (16.0 + 1e-5);
        assert!((tape.value(d).item() - want).abs() < 1e-9);
        assert!((tape.value(d).item() - 6.25e-7).abs() < 1e-6);

        let z = tape.constant(Tensor::from_f32(vec![4, 4], &[0.0; 16]).unwrap());
        let d2 = edge_dice(&mut tape, e, z).unwrap();
        assert!((tape.value(d2).item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn edge_dice_never_exceeds_one() {
        // Non-negative maps bound the loss from above by 1. No lower bound
        // at 0 exists for unnormalized magnitudes: matching high-contrast
        // edges drive the ratio past 1, which is what rewards alignment.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m1 = Mask2::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
            let m2 = Mask2::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
            let f1: Vec<f32> = m1.data.iter().map(|&v| v as f32).collect();
            let f2: Vec<f32> = m2.data.iter().map(|&v| v as f32).collect();
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(Tensor::from_f32(vec![8, 8], &f1).unwrap());
            let b = tape.constant(Tensor::from_f32(vec![8, 8], &f2).unwrap());
            let ea = sobel_edge(&mut tape, a).unwrap();
            let eb = sobel_edge(&mut tape, b).unwrap();
            let d = edge_dice(&mut tape, ea, eb).unwrap();
            assert!(tape.value(d).item() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn edge_dice_invariant_under_simultaneous_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let m1 = Mask2::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
            let m2 = Mask2::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
            let run = |a: &Mask2, b: &Mask2| -> f32 {
                let fa: Vec<f32> = a.data.iter().map(|&v| v as f32).collect();
                let fb: Vec<f32> = b.data.iter().map(|&v| v as f32).collect();
                let mut tape = Tape::<f32>::new();
                let ta = tape.constant(Tensor::from_f32(vec![8, 8], &fa).unwrap());
                let tb = tape.constant(Tensor::from_f32(vec![8, 8], &fb).unwrap());
                let ea = sobel_edge(&mut tape, ta).unwrap();
                let eb = sobel_edge(&mut tape, tb).unwrap();
                let d = edge_dice(&mut tape, ea, eb).unwrap();
                tape.value(d).item()
            };
            let direct = run(&m1, &m2);
            let flipped = run(&m1.flip_h(), &m2.flip_h());
            assert_eq!(direct.to_bits(), flipped.to_bits(), "trial {trial}");
        }
    }

    fn fd_pred_check(
        seeds: std::ops::Range<u64>,
        build: impl Fn(&mut Tape<f64>, TensorId) -> TensorId,
    ) {
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();
            let eval = |v: &[f64]| -> f64 {
                let mut t = Tape::<f64>::new();
                let x = t.leaf(Tensor::new(vec![8, 8], v.to_vec()).unwrap());
                let root = build(&mut t, x);
                t.value(root).item()
            };
            let fd = central_diff(eval, &xs, 1e-6);
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(vec![8, 8], xs.clone()).unwrap());
            let root = build(&mut t, x);
            t.backward(root).unwrap();
            let got = t.grad(x).unwrap();
            let err = normwise_rel_err(&got.data, &fd);
            assert!(err < 1e-3, "seed {seed}: rel err {err:.2e}");
        }
    }

    #[test]
    fn spatial_dice_gradient_matches_fd() {
        let m = Mask2::from_fn(8, 8, |y, x| (y + x) % 3 == 0);
        fd_pred_check(0..50, move |t, x| spatial_dice(t, &m, x).unwrap());
    }

    #[test]
    fn edge_dice_gradient_matches_fd() {
        let m = Mask2::from_fn(8, 8, |y, x| y >= 3 && x < 5);
        let field: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        fd_pred_check(0..50, move |t, x| {
            let gt = t.constant(Tensor::from_f32(vec![8, 8], &field).unwrap());
            let et = sobel_edge(t, gt).unwrap();
            let ep = sobel_edge(t, x).unwrap();
            edge_dice(t, et, ep).unwrap()
        });
    }

    #[test]
    fn weighted_ce_gradient_matches_fd() {
        let m = Mask2::from_fn(8, 8, |y, _| y < 3);
        fd_pred_check(0..50, move |t, x| {
            // Build [2,8,8] with bg = 1 - fg so the input stays a prob map.
            let ones = t.constant(Tensor::from_f32(vec![8, 8], &[1.0; 64]).unwrap());
            let negx = t.scale(x, -1.0);
            let bg = t.add(ones, negx).unwrap();
            let st = t.stack(&[bg, x]).unwrap();
            weighted_ce(t, st, &m).unwrap()
        });
    }

    fn tiny_episode(seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image2::from_fn(16, 16, |y, x| {
            let v = 0.4 + 0.3 * ((y as f32 / 5.0).sin() + (x as f32 / 3.0).cos()) / 2.0;
            (v + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0)
        });
        let mask = Mask2::from_fn(16, 16, |y, x| (4..12).contains(&y) && (6..14).contains(&x));
        let spec = AugmentSpec::identity();
        Episode {
            support_image: img.clone(),
            support_mask: mask.clone(),
            query_image: img,
            query_gt_mask: mask,
            meta: EpisodeMeta {
                source: SliceRef { client_id: 0, scan_id: 0, slice_index: 0 },
                support_spec: spec.clone(),
                query_spec: spec,
            },
        }
    }

    #[test]
    fn breakdown_total_is_the_sum_of_components() {
        let enc = EncoderConfig::default();
        let params = init_params(&enc, 3);
        let ep = tiny_episode(1);
        let mut tape = Tape::<f32>::new();
        let staged = stage_params(&mut tape, &params);
        let loss =
            total_loss(&mut tape, &enc, &ProtoConfig::default(), &staged, &ep, false).unwrap();
        let b = loss.breakdown;
        assert!((b.total - (b.ce + b.cyclic + b.spatial_dice + b.edge_dice)).abs() < 1e-6);
        assert!(b.ce >= 0.0 && b.cyclic >= 0.0);
        assert!(b.spatial_dice >= 0.0 && b.spatial_dice <= 1.0 + 1e-6);
        assert!(b.edge_dice <= 1.0 + 1e-6);
    }

    #[test]
    fn baseline_mode_zeroes_and_excludes_dice_terms() {
        let enc = EncoderConfig::default();
        let params = init_params(&enc, 3);
        let ep = tiny_episode(2);
        let run = |baseline: bool| {
            let mut tape = Tape::<f32>::new();
            let staged = stage_params(&mut tape, &params);
            total_loss(&mut tape, &enc, &ProtoConfig::default(), &staged, &ep, baseline)
                .unwrap()
                .breakdown
        };
        let fused = run(false);
        let base = run(true);
        assert_eq!(base.spatial_dice, 0.0);
        assert_eq!(base.edge_dice, 0.0);
        assert!((base.ce - fused.ce).abs() < 1e-9, "same forward pass");
        assert!((base.cyclic - fused.cyclic).abs() < 1e-9);
        assert!(
            (base.total - (fused.total - fused.spatial_dice - fused.edge_dice)).abs() < 1e-6
        );
    }

    #[test]
    fn cyclic_loss_skips_on_empty_reverse_mask() {
        let enc = EncoderConfig::default();
        let params = init_params(&enc, 4);
        let ep = tiny_episode(3);
        let mut tape = Tape::<f32>::new();
        let staged = stage_params(&mut tape, &params);
        // A prediction with zero foreground everywhere.
        let mut data = vec![1.0f32; 16 * 16];
        data.extend(vec![0.0f32; 16 * 16]);
        let pred = tape.constant(Tensor::from_f32(vec![2, 16, 16], &data).unwrap());
        let c = cyclic_loss(&mut tape, &enc, &ProtoConfig::default(), &staged, &ep, pred).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn cyclic_loss_unrolls_to_support_reconstruction_ce() {
        // Symmetric episode: support == query. Feeding the model's own
        // query prediction back must equal hand-running the reverse pass.
        let enc = EncoderConfig::default();
        let params = init_params(&enc, 5);
        let ep = tiny_episode(4);
        let pcfg = ProtoConfig::default();

        let mut tape = Tape::<f32>::new();
        let staged = stage_params(&mut tape, &params);
        let pred = segment(
            &mut tape,
            &enc,
            &pcfg,
            &staged,
            &ep.support_image,
            &ep.support_mask,
            &ep.query_image,
        )
        .unwrap();
        let cyc = cyclic_loss(&mut tape, &enc, &pcfg, &staged, &ep, pred).unwrap();

        let reverse = threshold_fg(&tape, pred);
        let mut tape2 = Tape::<f32>::new();
        let staged2 = stage_params(&mut tape2, &params);
        let back = segment(
            &mut tape2,
            &enc,
            &pcfg,
            &staged2,
            &ep.query_image,
            &reverse,
            &ep.support_image,
        )
        .unwrap();
        let want = weighted_ce(&mut tape2, back, &ep.support_mask).unwrap();
        assert_eq!(
            tape.value(cyc).item().to_bits(),
            tape2.value(want).item().to_bits()
        );
    }

    #[test]
    fn end_to_end_probe_gradients_match_fd() {
        // Spot-check the full segment + loss graph against finite
        // differences on a random 16-parameter probe.
        let enc = EncoderConfig::default();
        let params64 = init_params(&enc, 11).cast::<f64>();
        let ep = tiny_episode(6);
        let pcfg = ProtoConfig::default();

        let mut probe = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let total: usize = params64.iter().map(|p| p.value.data.len()).sum();
        while probe.len() < 16 {
            let flat = rng.gen_range(0..total);
            if !probe.contains(&flat) {
                probe.push(flat);
            }
        }
        let locate = |flat: usize| -> (usize, usize) {
            let mut off = 0;
            for (pi, p) in params64.iter().enumerate() {
                if flat < off + p.value.data.len() {
                    return (pi, flat - off);
                }
                off += p.value.data.len();
            }
            unreachable!()
        };

        let eval = |vals: &[f64]| -> f64 {
            let mut p = params64.clone();
            for (i, &flat) in probe.iter().enumerate() {
                let (pi, off) = locate(flat);
                p.get_mut(pi).value.data[off] = vals[i];
            }
            let mut tape = Tape::<f64>::new();
            let staged = stage_params(&mut tape, &p);
            let loss = total_loss(&mut tape, &enc, &pcfg, &staged, &ep, false).unwrap();
            loss.breakdown.total
        };

        let x0: Vec<f64> = probe
            .iter()
            .map(|&flat| {
                let (pi, off) = locate(flat);
                params64.get(pi).value.data[off]
            })
            .collect();
        let fd = central_diff(|v| eval(v), &x0, 1e-4);

        let mut tape = Tape::<f64>::new();
        let staged = stage_params(&mut tape, &params64);
        let loss = total_loss(&mut tape, &enc, &pcfg, &staged, &ep, false).unwrap();
        tape.backward(loss.total_id).unwrap();
        let got: Vec<f64> = probe
            .iter()
            .map(|&flat| {
                let (pi, off) = locate(flat);
                tape.grad(staged[pi]).unwrap().data[off]
            })
            .collect();
        let err = normwise_rel_err(&got, &fd);
        assert!(err < 1e-4, "probe gradient rel err {err:.2e}\nfd={fd:?}\ngot={got:?}");
    }
}
