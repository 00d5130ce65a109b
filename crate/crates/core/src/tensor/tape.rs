//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Every operation appends an entry holding its output value and enough
//! saved state to run the chain rule. `backward` walks the arena in reverse
//! creation order, accumulating gradients only into entries that were marked
//! as requiring them (or that lie on a path to one).

use crate::error::{Error, Result};
use crate::tensor::{canonical_sum, real, Real, Tensor};

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<R: Real> {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, R),
    Offset(TensorId, R),
    LnClamped {
        input: TensorId,
        floor: R,
    },
    Relu(TensorId),
    Sum(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        input: TensorId,
        factor: usize,
    },
    ResizeBilinear {
        input: TensorId,
        // Per output row/col: source low index and fractional weight toward
        // the high neighbour.
        ys: Vec<(usize, R)>,
        xs: Vec<(usize, R)>,
        in_h: usize,
        in_w: usize,
    },
    Softmax {
        input: TensorId,
        axis: usize,
    },
    CosineScores {
        feats: TensorId,
        protos: TensorId,
        feat_norms: Vec<R>,
        proto_norms: Vec<R>,
        eps: R,
    },
    CosineFields {
        a: TensorId,
        b: TensorId,
        a_norms: Vec<R>,
        b_norms: Vec<R>,
        eps: R,
    },
    CombineProtos {
        weights: TensorId,
        protos: TensorId,
    },
    GatherPixels {
        feats: TensorId,
        coords: Vec<(usize, usize)>,
    },
    MaskedMean {
        feats: TensorId,
        weights: Vec<R>,
        denom: R,
    },
    Stack(Vec<TensorId>),
    SliceChannel {
        input: TensorId,
        channel: usize,
    },
    Reshape(TensorId),
    EdgeMagnitude {
        gx: TensorId,
        gy: TensorId,
    },
}

#[derive(Debug)]
struct Entry<R: Real> {
    value: Tensor<R>,
    needs_grad: bool,
    op: Op<R>,
}

/// Arena holding the forward computation and, after `backward`, gradients.
#[derive(Debug, Default)]
pub struct Tape<R: Real> {
    entries: Vec<Entry<R>>,
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> TensorId {
        // A node needs a gradient slot if any input does; leaves opt in
        // explicitly via `leaf`.
        let needs = match &op {
            Op::Leaf => false,
            other => self.op_inputs(other).iter().any(|id| self.entries[id.0].needs_grad),
        };
        self.entries.push(Entry { value, needs_grad: needs, op });
        self.grads.push(None);
        TensorId(self.entries.len() - 1)
    }

    fn op_inputs(&self, op: &Op<R>) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Offset(a, _) => vec![*a],
            Op::LnClamped { input, .. } => vec![*input],
            Op::Relu(a) | Op::Sum(a) | Op::Reshape(a) => vec![*a],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::AvgPool { input, .. } => vec![*input],
            Op::ResizeBilinear { input, .. } => vec![*input],
            Op::Softmax { input, .. } => vec![*input],
            Op::CosineScores { feats, protos, .. } => vec![*feats, *protos],
            Op::CosineFields { a, b, .. } => vec![*a, *b],
            Op::CombineProtos { weights, protos } => vec![*weights, *protos],
            Op::GatherPixels { feats, .. } => vec![*feats],
            Op::MaskedMean { feats, .. } => vec![*feats],
            Op::Stack(parts) => parts.clone(),
            Op::SliceChannel { input, .. } => vec![*input],
            Op::EdgeMagnitude { gx, gy } => vec![*gx, *gy],
        }
    }

    /// Insert a constant; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<R>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    /// Insert a differentiable leaf (a parameter or other input whose
    /// gradient is wanted).
    pub fn leaf(&mut self, value: Tensor<R>) -> TensorId {
        let id = self.push(value, Op::Leaf);
        self.entries[id.0].needs_grad = true;
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor<R> {
        &self.entries[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.entries[id.0].value.shape
    }

    /// Gradient of the last `backward` root with respect to `id`, if one
    /// was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<Tensor<R>> {
        self.grads[id.0].as_ref().map(|g| Tensor {
            shape: self.entries[id.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "div")?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x / y)
            .collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: R) -> TensorId {
        let data = self.value(a).data.iter().map(|&x| x * c).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(value, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: TensorId, c: R) -> TensorId {
        let data = self.value(a).data.iter().map(|&x| x + c).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(value, Op::Offset(a, c))
    }

    /// Natural log with the argument clamped from below; the gradient is
    /// zero wherever the clamp was active.
    pub fn ln_clamped(&mut self, input: TensorId, floor: R) -> TensorId {
        let data = self
            .value(input)
            .data
            .iter()
            .map(|&x| if x > floor { x.ln() } else { floor.ln() })
            .collect();
        let value = Tensor { shape: self.shape(input).to_vec(), data };
        self.push(value, Op::LnClamped { input, floor })
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let zero = R::zero();
        let data = self
            .value(input)
            .data
            .iter()
            .map(|&x| if x > zero { x } else { zero })
            .collect();
        let value = Tensor { shape: self.shape(input).to_vec(), data };
        self.push(value, Op::Relu(input))
    }

    /// Sum of all elements, as a scalar. Summation runs in a canonical
    /// (sorted) order so the result is invariant under permutations of the
    /// input, e.g. spatial flips.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let acc = canonical_sum(&self.value(input).data);
        self.push(Tensor::scalar(acc), Op::Sum(input))
    }

    // ---- convolution and spatial ops ------------------------------------

    /// 2-D convolution over a `[C_in, H, W]` input with a
    /// `[C_out, C_in, k, k]` kernel and optional `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 3 {
            return Err(Error::Dimension(format!("conv2d: input must be rank 3, got {ishape:?}")));
        }
        if kshape.len() != 4 || kshape[2] != kshape[3] {
            return Err(Error::Dimension(format!(
                "conv2d: kernel must be [C_out, C_in, k, k], got {kshape:?}"
            )));
        }
        if kshape[1] != ishape[0] {
            return Err(Error::Dimension(format!(
                "conv2d: kernel expects {} input channels, input has {}",
                kshape[1], ishape[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be positive".into()));
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, k) = (kshape[0], kshape[2]);
        let oh = conv_extent(h, k, stride, pad)?;
        let ow = conv_extent(w, k, stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias must be [{cout}], got {:?}",
                    self.shape(b)
                )));
            }
        }

        let mut out = vec![R::zero(); cout * oh * ow];
        if let Some(b) = bias {
            let bd = &self.value(b).data;
            for co in 0..cout {
                out[co * oh * ow..(co + 1) * oh * ow].fill(bd[co]);
            }
        }
        {
            let idata = &self.entries[input.0].value.data;
            let kdata = &self.entries[kernel.0].value.data;
            for co in 0..cout {
                for ci in 0..cin {
                    let kbase = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let (ylo, yhi) = tap_range(ky, pad, stride, h, oh);
                        if ylo > yhi {
                            continue;
                        }
                        for kx in 0..k {
                            let (xlo, xhi) = tap_range(kx, pad, stride, w, ow);
                            if xlo > xhi {
                                continue;
                            }
                            let wk = kdata[kbase + ky * k + kx];
                            if wk == R::zero() {
                                continue;
                            }
                            for oy in ylo..=yhi {
                                let iy = oy * stride + ky - pad;
                                let irow = &idata[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                                let orow = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                                let istart = xlo * stride + kx - pad;
                                for (o, &x) in orow[xlo..=xhi]
                                    .iter_mut()
                                    .zip(irow[istart..].iter().step_by(stride))
                                {
                                    *o = *o + wk * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor { shape: vec![cout, oh, ow], data: out };
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, pad }))
    }

    /// Non-overlapping average pooling over `[C, H, W]` with a square
    /// window; H and W must divide evenly.
    pub fn avg_pool(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "avg_pool: input must be rank 3, got {shape:?}"
            )));
        }
        if factor == 0 || shape[1] % factor != 0 || shape[2] % factor != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool: factor {factor} must evenly divide {}x{}",
                shape[1], shape[2]
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / factor, w / factor);
        let inv = R::one() / real::<R>(factor as f32 * factor as f32);
        let idata = &self.entries[input.0].value.data;
        let mut out = vec![R::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = R::zero();
                    for dy in 0..factor {
                        let iy = oy * factor + dy;
                        for dx in 0..factor {
                            acc = acc + idata[(ci * h + iy) * w + ox * factor + dx];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor { shape: vec![c, oh, ow], data: out };
        Ok(self.push(value, Op::AvgPool { input, factor }))
    }

    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`.
    ///
    /// Source coordinates follow `src = (dst + 0.5) * (in - 1) / out`, which
    /// keeps every sample strictly inside the input grid.
    pub fn resize_bilinear(
        &mut self,
        input: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "resize_bilinear: input must be rank 3, got {shape:?}"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension("resize_bilinear: empty output".into()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let ys = resize_axis_map::<R>(h, out_h);
        let xs = resize_axis_map::<R>(w, out_w);
        let idata = &self.entries[input.0].value.data;
        let one = R::one();
        let mut out = vec![R::zero(); c * out_h * out_w];
        for ci in 0..c {
            for (oy, &(y0, ty)) in ys.iter().enumerate() {
                let y1 = (y0 + 1).min(h - 1);
                let r0 = &idata[(ci * h + y0) * w..(ci * h + y0 + 1) * w];
                let r1 = &idata[(ci * h + y1) * w..(ci * h + y1 + 1) * w];
                let orow = &mut out[(ci * out_h + oy) * out_w..(ci * out_h + oy + 1) * out_w];
                for (ox, &(x0, tx)) in xs.iter().enumerate() {
                    let x1 = (x0 + 1).min(w - 1);
                    let top = r0[x0] * (one - tx) + r0[x1] * tx;
                    let bot = r1[x0] * (one - tx) + r1[x1] * tx;
                    orow[ox] = top * (one - ty) + bot * ty;
                }
            }
        }
        let value = Tensor { shape: vec![c, out_h, out_w], data: out };
        Ok(self.push(value, Op::ResizeBilinear { input, ys, xs, in_h: h, in_w: w }))
    }

    /// Softmax along one axis.
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let lanes = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let idata = &self.entries[input.0].value.data;
        let mut out = vec![R::zero(); idata.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut max = idata[base];
                for l in 1..lanes {
                    let v = idata[base + l * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut total = R::zero();
                for l in 0..lanes {
                    let e = (idata[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    total = total + e;
                }
                for l in 0..lanes {
                    out[base + l * inner] = out[base + l * inner] / total;
                }
            }
        }
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Softmax { input, axis }))
    }

    // ---- prototype ops ---------------------------------------------------

    /// Cosine similarity between every pixel of a `[C, h, w]` feature map
    /// and each of N prototype vectors `[N, C]`, producing `[N, h, w]`.
    pub fn cosine_scores(
        &mut self,
        feats: TensorId,
        protos: TensorId,
        eps: R,
    ) -> Result<TensorId> {
        let fs = self.shape(feats).to_vec();
        let ps = self.shape(protos).to_vec();
        if fs.len() != 3 || ps.len() != 2 || ps[1] != fs[0] {
            return Err(Error::Dimension(format!(
                "cosine_scores: want [C,h,w] x [N,C], got {fs:?} x {ps:?}"
            )));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = ps[0];
        let hw = h * w;
        let fdata = &self.entries[feats.0].value.data;
        let pdata = &self.entries[protos.0].value.data;

        let mut feat_norms = vec![R::zero(); hw];
        for (yx, norm) in feat_norms.iter_mut().enumerate() {
            let mut acc = R::zero();
            for ci in 0..c {
                let v = fdata[ci * hw + yx];
                acc = acc + v * v;
            }
            *norm = acc.sqrt();
        }
        let mut proto_norms = vec![R::zero(); n];
        for (ni, norm) in proto_norms.iter_mut().enumerate() {
            let mut acc = R::zero();
            for &v in &pdata[ni * c..(ni + 1) * c] {
                acc = acc + v * v;
            }
            *norm = acc.sqrt();
        }

        let mut out = vec![R::zero(); n * hw];
        for ni in 0..n {
            let pvec = &pdata[ni * c..(ni + 1) * c];
            for yx in 0..hw {
                let mut dot = R::zero();
                for (ci, &p) in pvec.iter().enumerate() {
                    dot = dot + fdata[ci * hw + yx] * p;
                }
                out[ni * hw + yx] = dot / (feat_norms[yx] * proto_norms[ni] + eps);
            }
        }
        let value = Tensor { shape: vec![n, h, w], data: out };
        Ok(self.push(value, Op::CosineScores { feats, protos, feat_norms, proto_norms, eps }))
    }

    /// Pixelwise cosine similarity between two `[C, h, w]` feature maps,
    /// producing `[h, w]`.
    pub fn cosine_fields(&mut self, a: TensorId, b: TensorId, eps: R) -> Result<TensorId> {
        self.same_shape(a, b, "cosine_fields")?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "cosine_fields: inputs must be rank 3, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let adata = &self.entries[a.0].value.data;
        let bdata = &self.entries[b.0].value.data;
        let norms = |d: &[R]| -> Vec<R> {
            (0..hw)
                .map(|yx| {
                    let mut acc = R::zero();
                    for ci in 0..c {
                        let v = d[ci * hw + yx];
                        acc = acc + v * v;
                    }
                    acc.sqrt()
                })
                .collect()
        };
        let a_norms = norms(adata);
        let b_norms = norms(bdata);
        let mut out = vec![R::zero(); hw];
        for yx in 0..hw {
            let mut dot = R::zero();
            for ci in 0..c {
                dot = dot + adata[ci * hw + yx] * bdata[ci * hw + yx];
            }
            out[yx] = dot / (a_norms[yx] * b_norms[yx] + eps);
        }
        let value = Tensor { shape: vec![h, w], data: out };
        Ok(self.push(value, Op::CosineFields { a, b, a_norms, b_norms, eps }))
    }

    /// Weighted mixture of prototypes per pixel:
    /// `[N, h, w]` weights x `[N, C]` prototypes -> `[C, h, w]`.
    pub fn combine_protos(&mut self, weights: TensorId, protos: TensorId) -> Result<TensorId> {
        let ws = self.shape(weights).to_vec();
        let ps = self.shape(protos).to_vec();
        if ws.len() != 3 || ps.len() != 2 || ws[0] != ps[0] {
            return Err(Error::Dimension(format!(
                "combine_protos: want [N,h,w] x [N,C], got {ws:?} x {ps:?}"
            )));
        }
        let (n, h, w) = (ws[0], ws[1], ws[2]);
        let c = ps[1];
        let hw = h * w;
        let wdata = &self.entries[weights.0].value.data;
        let pdata = &self.entries[protos.0].value.data;
        let mut out = vec![R::zero(); c * hw];
        for ni in 0..n {
            let wslice = &wdata[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let p = pdata[ni * c + ci];
                let oslice = &mut out[ci * hw..(ci + 1) * hw];
                for (o, &wv) in oslice.iter_mut().zip(wslice) {
                    *o = *o + wv * p;
                }
            }
        }
        let value = Tensor { shape: vec![c, h, w], data: out };
        Ok(self.push(value, Op::CombineProtos { weights, protos }))
    }

    /// Gather feature vectors at pixel coordinates: `[C, h, w]` with M
    /// `(y, x)` pairs -> `[M, C]`.
    pub fn gather_pixels(
        &mut self,
        feats: TensorId,
        coords: Vec<(usize, usize)>,
    ) -> Result<TensorId> {
        let shape = self.shape(feats).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "gather_pixels: input must be rank 3, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if coords.is_empty() {
            return Err(Error::Dimension("gather_pixels: no coordinates".into()));
        }
        for &(y, x) in &coords {
            if y >= h || x >= w {
                return Err(Error::Dimension(format!(
                    "gather_pixels: ({y},{x}) outside {h}x{w}"
                )));
            }
        }
        let fdata = &self.entries[feats.0].value.data;
        let m = coords.len();
        let mut out = vec![R::zero(); m * c];
        for (mi, &(y, x)) in coords.iter().enumerate() {
            for ci in 0..c {
                out[mi * c + ci] = fdata[(ci * h + y) * w + x];
            }
        }
        let value = Tensor { shape: vec![m, c], data: out };
        Ok(self.push(value, Op::GatherPixels { feats, coords }))
    }

    /// Weighted mean of a `[C, h, w]` feature map over constant pixel
    /// weights, producing `[C]`. The denominator is `Σw + eps`.
    pub fn masked_mean(
        &mut self,
        feats: TensorId,
        weights: &[R],
        eps: R,
    ) -> Result<TensorId> {
        let shape = self.shape(feats).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "masked_mean: input must be rank 3, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        if weights.len() != hw {
            return Err(Error::Dimension(format!(
                "masked_mean: {} weights for {h}x{w} map",
                weights.len()
            )));
        }
        let mut denom = eps;
        for &wv in weights {
            denom = denom + wv;
        }
        let fdata = &self.entries[feats.0].value.data;
        let mut out = vec![R::zero(); c];
        for (ci, o) in out.iter_mut().enumerate() {
            let mut acc = R::zero();
            for (yx, &wv) in weights.iter().enumerate() {
                acc = acc + fdata[ci * hw + yx] * wv;
            }
            *o = acc / denom;
        }
        let value = Tensor { shape: vec![c], data: out };
        Ok(self.push(value, Op::MaskedMean { feats, weights: weights.to_vec(), denom }))
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack: no inputs".into()));
        }
        let shape0 = self.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            if self.shape(p) != shape0 {
                return Err(Error::Dimension(format!(
                    "stack: mismatched part shapes {:?} vs {shape0:?}",
                    self.shape(p)
                )));
            }
        }
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).data.len());
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&shape0);
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Stack(parts.to_vec())))
    }

    /// Select one index of the leading axis, dropping it.
    pub fn slice_channel(&mut self, input: TensorId, channel: usize) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() || channel >= shape[0] {
            return Err(Error::Dimension(format!(
                "slice_channel: channel {channel} out of range for shape {shape:?}"
            )));
        }
        let rest: usize = shape[1..].iter().product();
        let data = self.value(input).data[channel * rest..(channel + 1) * rest].to_vec();
        let value = Tensor { shape: shape[1..].to_vec(), data };
        Ok(self.push(value, Op::SliceChannel { input, channel }))
    }

    /// Reinterpret the element buffer under a new shape of equal size.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).data.len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape(input)
            )));
        }
        let value = Tensor { shape: shape.to_vec(), data: self.value(input).data.clone() };
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Gradient-magnitude map `sqrt(gx² + gy² + eps)` from two same-shaped
    /// directional derivative maps.
    pub fn edge_magnitude(&mut self, gx: TensorId, gy: TensorId, eps: R) -> Result<TensorId> {
        self.same_shape(gx, gy, "edge_magnitude")?;
        let data = self
            .value(gx)
            .data
            .iter()
            .zip(&self.value(gy).data)
            .map(|(&x, &y)| (x * x + y * y + eps).sqrt())
            .collect();
        let value = Tensor { shape: self.shape(gx).to_vec(), data };
        Ok(self.push(value, Op::EdgeMagnitude { gx, gy }))
    }

    // ---- backward --------------------------------------------------------

    /// Run reverse-mode accumulation from a scalar root. Existing gradients
    /// are cleared first.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(vec![R::one()]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            if !self.entries[idx].needs_grad && !matches!(self.entries[idx].op, Op::Leaf) {
                continue;
            }
            self.apply_backward(idx, &gout);
            // Keep the gradient readable after the pass.
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<R>>], id: TensorId, len: usize) -> &mut [R] {
        grads[id.0].get_or_insert_with(|| vec![R::zero(); len]).as_mut_slice()
    }

    fn apply_backward(&mut self, idx: usize, gout: &[R]) {
        // Split borrows: entries are read-only here, grads are written.
        let entries = &self.entries;
        let grads = &mut self.grads;
        let op = &entries[idx].op;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &id in &[*a, *b] {
                    if entries[id.0].needs_grad {
                        let g = Self::accum(grads, id, gout.len());
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi + go;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if entries[a.0].needs_grad {
                    let bdata = &entries[b.0].value.data;
                    let g = Self::accum(grads, a, gout.len());
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bdata) {
                        *gi = *gi + go * bv;
                    }
                }
                if entries[b.0].needs_grad {
                    let adata = &entries[a.0].value.data;
                    let g = Self::accum(grads, b, gout.len());
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(adata) {
                        *gi = *gi + go * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if entries[a.0].needs_grad {
                    let bdata = &entries[b.0].value.data;
                    let g = Self::accum(grads, a, gout.len());
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bdata) {
                        *gi = *gi + go / bv;
                    }
                }
                if entries[b.0].needs_grad {
                    let adata = &entries[a.0].value.data;
                    let bdata = &entries[b.0].value.data;
                    let g = Self::accum(grads, b, gout.len());
                    for i in 0..gout.len() {
                        g[i] = g[i] - gout[i] * adata[i] / (bdata[i] * bdata[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if entries[a.0].needs_grad {
                    let g = Self::accum(grads, a, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go * c;
                    }
                }
            }
            Op::Offset(a, _) => {
                let a = *a;
                if entries[a.0].needs_grad {
                    let g = Self::accum(grads, a, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
            }
            Op::LnClamped { input, floor } => {
                let (input, floor) = (*input, *floor);
                if entries[input.0].needs_grad {
                    let idata = &entries[input.0].value.data;
                    let g = Self::accum(grads, input, gout.len());
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(idata) {
                        if x > floor {
                            *gi = *gi + go / x;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if entries[a.0].needs_grad {
                    let idata = &entries[a.0].value.data;
                    let zero = R::zero();
                    let g = Self::accum(grads, a, gout.len());
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(idata) {
                        if x > zero {
                            *gi = *gi + go;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if entries[a.0].needs_grad {
                    let go = gout[0];
                    let len = entries[a.0].value.data.len();
                    let g = Self::accum(grads, a, len);
                    for gi in g.iter_mut() {
                        *gi = *gi + go;
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                let (input, kernel, bias, stride, pad) = (*input, *kernel, *bias, *stride, *pad);
                let ishape = &entries[input.0].value.shape;
                let kshape = &entries[kernel.0].value.shape;
                let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (cout, k) = (kshape[0], kshape[2]);
                let oshape = &entries[idx].value.shape;
                let (oh, ow) = (oshape[1], oshape[2]);

                if let Some(b) = bias {
                    if entries[b.0].needs_grad {
                        let g = Self::accum(grads, b, cout);
                        for co in 0..cout {
                            let mut acc = R::zero();
                            for &go in &gout[co * oh * ow..(co + 1) * oh * ow] {
                                acc = acc + go;
                            }
                            g[co] = g[co] + acc;
                        }
                    }
                }

                let want_in = entries[input.0].needs_grad;
                let want_k = entries[kernel.0].needs_grad;
                if !want_in && !want_k {
                    return;
                }
                let idata = &entries[input.0].value.data;
                let kdata = &entries[kernel.0].value.data;

                if want_k {
                    // Gradients for the kernel: correlate input patches with
                    // the upstream gradient.
                    let gk = Self::accum(grads, kernel, kdata.len());
                    for co in 0..cout {
                        for ci in 0..cin {
                            let kbase = (co * cin + ci) * k * k;
                            for ky in 0..k {
                                let (ylo, yhi) = tap_range(ky, pad, stride, h, oh);
                                if ylo > yhi {
                                    continue;
                                }
                                for kx in 0..k {
                                    let (xlo, xhi) = tap_range(kx, pad, stride, w, ow);
                                    if xlo > xhi {
                                        continue;
                                    }
                                    let mut acc = R::zero();
                                    for oy in ylo..=yhi {
                                        let iy = oy * stride + ky - pad;
                                        let irow =
                                            &idata[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                                        let grow =
                                            &gout[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                                        let istart = xlo * stride + kx - pad;
                                        for (&go, &x) in grow[xlo..=xhi]
                                            .iter()
                                            .zip(irow[istart..].iter().step_by(stride))
                                        {
                                            acc = acc + go * x;
                                        }
                                    }
                                    gk[kbase + ky * k + kx] = gk[kbase + ky * k + kx] + acc;
                                }
                            }
                        }
                    }
                }

                if want_in {
                    let gi = Self::accum(grads, input, idata.len());
                    for co in 0..cout {
                        for ci in 0..cin {
                            let kbase = (co * cin + ci) * k * k;
                            for ky in 0..k {
                                let (ylo, yhi) = tap_range(ky, pad, stride, h, oh);
                                if ylo > yhi {
                                    continue;
                                }
                                for kx in 0..k {
                                    let (xlo, xhi) = tap_range(kx, pad, stride, w, ow);
                                    if xlo > xhi {
                                        continue;
                                    }
                                    let wk = kdata[kbase + ky * k + kx];
                                    if wk == R::zero() {
                                        continue;
                                    }
                                    for oy in ylo..=yhi {
                                        let iy = oy * stride + ky - pad;
                                        let grow =
                                            &gout[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                                        let girow =
                                            &mut gi[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                                        let istart = xlo * stride + kx - pad;
                                        for (gv, &go) in girow[istart..]
                                            .iter_mut()
                                            .step_by(stride)
                                            .zip(grow[xlo..=xhi].iter())
                                        {
                                            *gv = *gv + wk * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool { input, factor } => {
                let (input, factor) = (*input, *factor);
                if entries[input.0].needs_grad {
                    let ishape = &entries[input.0].value.shape;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (oh, ow) = (h / factor, w / factor);
                    let inv = R::one() / real::<R>(factor as f32 * factor as f32);
                    let g = Self::accum(grads, input, c * h * w);
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout[(ci * oh + oy) * ow + ox] * inv;
                                for dy in 0..factor {
                                    let iy = oy * factor + dy;
                                    for dx in 0..factor {
                                        let ii = (ci * h + iy) * w + ox * factor + dx;
                                        g[ii] = g[ii] + go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ResizeBilinear { input, ys, xs, in_h, in_w } => {
                let input_id = *input;
                if entries[input_id.0].needs_grad {
                    let (h, w) = (*in_h, *in_w);
                    let oshape = &entries[idx].value.shape;
                    let (c, out_h, out_w) = (oshape[0], oshape[1], oshape[2]);
                    let one = R::one();
                    let g = Self::accum(grads, input_id, c * h * w);
                    for ci in 0..c {
                        for (oy, &(y0, ty)) in ys.iter().enumerate() {
                            let y1 = (y0 + 1).min(h - 1);
                            for (ox, &(x0, tx)) in xs.iter().enumerate() {
                                let x1 = (x0 + 1).min(w - 1);
                                let go = gout[(ci * out_h + oy) * out_w + ox];
                                g[(ci * h + y0) * w + x0] =
                                    g[(ci * h + y0) * w + x0] + go * (one - ty) * (one - tx);
                                g[(ci * h + y0) * w + x1] =
                                    g[(ci * h + y0) * w + x1] + go * (one - ty) * tx;
                                g[(ci * h + y1) * w + x0] =
                                    g[(ci * h + y1) * w + x0] + go * ty * (one - tx);
                                g[(ci * h + y1) * w + x1] =
                                    g[(ci * h + y1) * w + x1] + go * ty * tx;
                            }
                        }
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (input, axis) = (*input, *axis);
                if entries[input.0].needs_grad {
                    let s = &entries[idx].value;
                    let shape = &s.shape;
                    let lanes = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let sdata = &s.data;
                    let g = Self::accum(grads, input, sdata.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lanes * inner + i;
                            let mut dot = R::zero();
                            for l in 0..lanes {
                                let j = base + l * inner;
                                dot = dot + gout[j] * sdata[j];
                            }
                            for l in 0..lanes {
                                let j = base + l * inner;
                                g[j] = g[j] + sdata[j] * (gout[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::CosineScores { feats, protos, feat_norms, proto_norms, eps } => {
                let (feats, protos, eps) = (*feats, *protos, *eps);
                let fshape = &entries[feats.0].value.shape;
                let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
                let hw = h * w;
                let n = entries[protos.0].value.shape[0];
                let fdata = &entries[feats.0].value.data;
                let pdata = &entries[protos.0].value.data;
                let ydata = &entries[idx].value.data;
                let zero = R::zero();

                if entries[feats.0].needs_grad {
                    let g = Self::accum(grads, feats, fdata.len());
                    for ni in 0..n {
                        let pn = proto_norms[ni];
                        let pvec = &pdata[ni * c..(ni + 1) * c];
                        for yx in 0..hw {
                            let go = gout[ni * hw + yx];
                            if go == zero {
                                continue;
                            }
                            let nq = feat_norms[yx];
                            let d = nq * pn + eps;
                            let y = ydata[ni * hw + yx];
                            let rad = if nq > zero { y * pn / (nq * d) } else { zero };
                            for (ci, &p) in pvec.iter().enumerate() {
                                let q = fdata[ci * hw + yx];
                                g[ci * hw + yx] = g[ci * hw + yx] + go * (p / d - rad * q);
                            }
                        }
                    }
                }
                if entries[protos.0].needs_grad {
                    let g = Self::accum(grads, protos, pdata.len());
                    for ni in 0..n {
                        let pn = proto_norms[ni];
                        let pvec = &pdata[ni * c..(ni + 1) * c];
                        for yx in 0..hw {
                            let go = gout[ni * hw + yx];
                            if go == zero {
                                continue;
                            }
                            let nq = feat_norms[yx];
                            let d = nq * pn + eps;
                            let y = ydata[ni * hw + yx];
                            let rad = if pn > zero { y * nq / (pn * d) } else { zero };
                            for ci in 0..c {
                                let q = fdata[ci * hw + yx];
                                g[ni * c + ci] =
                                    g[ni * c + ci] + go * (q / d - rad * pvec[ci]);
                            }
                        }
                    }
                }
            }
            Op::CosineFields { a, b, a_norms, b_norms, eps } => {
                let (a, b, eps) = (*a, *b, *eps);
                let shape = &entries[a.0].value.shape;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let hw = h * w;
                let adata = &entries[a.0].value.data;
                let bdata = &entries[b.0].value.data;
                let ydata = &entries[idx].value.data;
                let zero = R::zero();
                for side in 0..2 {
                    let (this, this_norms, other, other_norms) = if side == 0 {
                        (a, a_norms, b, b_norms)
                    } else {
                        (b, b_norms, a, a_norms)
                    };
                    if !entries[this.0].needs_grad {
                        continue;
                    }
                    let tdata = if side == 0 { adata } else { bdata };
                    let odata = if side == 0 { bdata } else { adata };
                    let _ = other;
                    let g = Self::accum(grads, this, c * hw);
                    for yx in 0..hw {
                        let go = gout[yx];
                        if go == zero {
                            continue;
                        }
                        let nt = this_norms[yx];
                        let no = other_norms[yx];
                        let d = nt * no + eps;
                        let y = ydata[yx];
                        let rad = if nt > zero { y * no / (nt * d) } else { zero };
                        for ci in 0..c {
                            let ov = odata[ci * hw + yx];
                            let tv = tdata[ci * hw + yx];
                            g[ci * hw + yx] = g[ci * hw + yx] + go * (ov / d - rad * tv);
                        }
                    }
                }
            }
            Op::CombineProtos { weights, protos } => {
                let (weights, protos) = (*weights, *protos);
                let ws = &entries[weights.0].value.shape;
                let (n, h, w) = (ws[0], ws[1], ws[2]);
                let c = entries[protos.0].value.shape[1];
                let hw = h * w;
                let wdata = &entries[weights.0].value.data;
                let pdata = &entries[protos.0].value.data;
                if entries[weights.0].needs_grad {
                    let g = Self::accum(grads, weights, n * hw);
                    for ni in 0..n {
                        let pvec = &pdata[ni * c..(ni + 1) * c];
                        for yx in 0..hw {
                            let mut acc = R::zero();
                            for (ci, &p) in pvec.iter().enumerate() {
                                acc = acc + gout[ci * hw + yx] * p;
                            }
                            g[ni * hw + yx] = g[ni * hw + yx] + acc;
                        }
                    }
                }
                if entries[protos.0].needs_grad {
                    let g = Self::accum(grads, protos, n * c);
                    for ni in 0..n {
                        let wslice = &wdata[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let mut acc = R::zero();
                            for (yx, &wv) in wslice.iter().enumerate() {
                                acc = acc + gout[ci * hw + yx] * wv;
                            }
                            g[ni * c + ci] = g[ni * c + ci] + acc;
                        }
                    }
                }
            }
            Op::GatherPixels { feats, coords } => {
                let feats = *feats;
                if entries[feats.0].needs_grad {
                    let fshape = &entries[feats.0].value.shape;
                    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
                    let coords = coords.clone();
                    let g = Self::accum(grads, feats, c * h * w);
                    for (mi, &(y, x)) in coords.iter().enumerate() {
                        for ci in 0..c {
                            let ii = (ci * h + y) * w + x;
                            g[ii] = g[ii] + gout[mi * c + ci];
                        }
                    }
                }
            }
            Op::MaskedMean { feats, weights, denom } => {
                let (feats, denom) = (*feats, *denom);
                if entries[feats.0].needs_grad {
                    let fshape = &entries[feats.0].value.shape;
                    let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
                    let hw = h * w;
                    let weights = weights.clone();
                    let g = Self::accum(grads, feats, c * hw);
                    for ci in 0..c {
                        let go = gout[ci] / denom;
                        for (yx, &wv) in weights.iter().enumerate() {
                            g[ci * hw + yx] = g[ci * hw + yx] + go * wv;
                        }
                    }
                }
            }
            Op::Stack(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for id in parts {
                    let len = entries[id.0].value.data.len();
                    if entries[id.0].needs_grad {
                        let g = Self::accum(grads, id, len);
                        for (gi, &go) in g.iter_mut().zip(&gout[off..off + len]) {
                            *gi = *gi + go;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceChannel { input, channel } => {
                let (input, channel) = (*input, *channel);
                if entries[input.0].needs_grad {
                    let len = entries[input.0].value.data.len();
                    let rest = gout.len();
                    let g = Self::accum(grads, input, len);
                    let base = channel * rest;
                    for (gi, &go) in g[base..base + rest].iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if entries[a.0].needs_grad {
                    let g = Self::accum(grads, a, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
            }
            Op::EdgeMagnitude { gx, gy } => {
                let (gx, gy) = (*gx, *gy);
                let ydata = &entries[idx].value.data;
                for &(id, other) in &[(gx, false), (gy, true)] {
                    if !entries[id.0].needs_grad {
                        continue;
                    }
                    let xdata = if other {
                        &entries[gy.0].value.data
                    } else {
                        &entries[gx.0].value.data
                    };
                    let g = Self::accum(grads, id, gout.len());
                    for i in 0..gout.len() {
                        g[i] = g[i] + gout[i] * xdata[i] / ydata[i];
                    }
                }
            }
        }
    }
}

/// Output extent of a padded strided convolution along one axis.
fn conv_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = extent as isize + 2 * pad as isize - k as isize;
    if span < 0 {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {k} exceeds padded extent {}",
            extent + 2 * pad
        )));
    }
    Ok(span as usize / stride + 1)
}

/// Valid output range `[lo, hi]` for one kernel tap so the corresponding
/// input index stays inside `[0, extent)`.
fn tap_range(kd: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if pad > kd { (pad - kd + stride - 1) / stride } else { 0 };
    let top = extent as isize - 1 + pad as isize - kd as isize;
    if top < 0 {
        return (1, 0);
    }
    let hi = (top as usize / stride).min(out.saturating_sub(1));
    (lo, hi)
}

/// For each output index along one axis: the low source index and the
/// fractional weight toward the next one. Computed in f64 so f32 and f64
/// tapes sample identical positions.
fn resize_axis_map<R: Real>(in_extent: usize, out_extent: usize) -> Vec<(usize, R)> {
    let scale = (in_extent as f64 - 1.0) / out_extent as f64;
    (0..out_extent)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale;
            let low = src.floor();
            let frac = src - low;
            (low as usize, real::<R>(frac as f32))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, normwise_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    /// Check the tape gradient of `scalar = build(tape, leaf)` against a
    /// central-difference estimate, in both precisions.
    fn fd_check(
        shape: &[usize],
        xs: &[f32],
        build_f32: impl Fn(&mut Tape<f32>, TensorId) -> TensorId,
        build_f64: impl Fn(&mut Tape<f64>, TensorId) -> TensorId,
    ) {
        fd_check_tol(shape, xs, build_f32, build_f64, 1e-3, 1e-5);
    }

    fn fd_check_tol(
        shape: &[usize],
        xs: &[f32],
        build_f32: impl Fn(&mut Tape<f32>, TensorId) -> TensorId,
        build_f64: impl Fn(&mut Tape<f64>, TensorId) -> TensorId,
        tol32: f64,
        tol64: f64,
    ) {
        let xs64: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let eval64 = |v: &[f64]| -> f64 {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(shape.to_vec(), v.to_vec()).unwrap());
            let root = build_f64(&mut t, x);
            t.value(root).item()
        };
        // f64 lane: small step, tight tolerance.
        {
            let fd = central_diff(eval64, &xs64, 1e-5);
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new(shape.to_vec(), xs64.clone()).unwrap());
            let root = build_f64(&mut t, x);
            t.backward(root).unwrap();
            let got = t.grad(x).expect("leaf gradient missing");
            let err = normwise_rel_err(&got.data, &fd);
            assert!(err < tol64, "f64 gradient off by {err:.3e}\nfd={fd:?}\ngot={:?}", got.data);
        }
        // f32 lane: compare the single-precision backward pass against an
        // accurately evaluated h=1e-3 central difference, so the check
        // measures tape arithmetic rather than oracle rounding.
        {
            let fd = central_diff(eval64, &xs64, 1e-3);
            let mut t = Tape::<f32>::new();
            let x = t.leaf(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
            let root = build_f32(&mut t, x);
            t.backward(root).unwrap();
            let got: Vec<f64> = t.grad(x).expect("leaf gradient missing").to_f64().data;
            let err = normwise_rel_err(&got, &fd);
            assert!(err < tol32, "f32 gradient off by {err:.3e}\nfd={fd:?}\ngot={got:?}");
        }
    }

    /// Weight the op output by fixed pseudo-random constants before summing
    /// so the check exercises non-uniform upstream gradients.
    macro_rules! weighted_sum {
        ($tape:expr, $out:expr, $seed:expr) => {{
            let t = $tape;
            let out = $out;
            let n = t.value(out).data.len();
            let mut rng = ChaCha8Rng::seed_from_u64($seed);
            let wv: Vec<f32> = (0..n).map(|_| rng.gen_range(0.25f32..1.75)).collect();
            let shape = t.shape(out).to_vec();
            let w = t.constant(Tensor::from_f32(shape, &wv).unwrap());
            let prod = t.mul(out, w).unwrap();
            t.sum(prod)
        }};
    }

    #[test]
    fn add_forward_and_grad() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(Tensor::from_f32(vec![2], &[1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::from_f32(vec![2], &[10.0, 20.0]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![11.0, 22.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data, vec![1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn mul_div_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = rand_vec(&mut rng, 6, 0.5, 2.0);
        let other = rand_vec(&mut rng, 6, 0.5, 2.0);
        let o32 = other.clone();
        let o64 = other.clone();
        fd_check(
            &[6],
            &xs,
            move |t, x| {
                let c = t.constant(Tensor::from_f32(vec![6], &o32).unwrap());
                let m = t.mul(x, c).unwrap();
                let d = t.div(m, c).unwrap();
                let m2 = t.mul(d, m).unwrap();
                weighted_sum!(t, m2, 5)
            },
            move |t, x| {
                let c = t.constant(Tensor::from_f32(vec![6], &o64).unwrap());
                let m = t.mul(x, c).unwrap();
                let d = t.div(m, c).unwrap();
                let m2 = t.mul(d, m).unwrap();
                weighted_sum!(t, m2, 5)
            },
        );
    }

    #[test]
    fn div_denominator_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = rand_vec(&mut rng, 5, 0.8, 2.5);
        let num = rand_vec(&mut rng, 5, 0.5, 2.0);
        let n32 = num.clone();
        let n64 = num;
        fd_check(
            &[5],
            &xs,
            move |t, x| {
                let c = t.constant(Tensor::from_f32(vec![5], &n32).unwrap());
                let d = t.div(c, x).unwrap();
                weighted_sum!(t, d, 6)
            },
            move |t, x| {
                let c = t.constant(Tensor::from_f32(vec![5], &n64).unwrap());
                let d = t.div(c, x).unwrap();
                weighted_sum!(t, d, 6)
            },
        );
    }

    #[test]
    fn scale_offset_ln_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = rand_vec(&mut rng, 8, 0.3, 1.5);
        fd_check(
            &[8],
            &xs,
            |t, x| {
                let a = t.scale(x, 2.5);
                let b = t.offset(a, 0.75);
                let c = t.ln_clamped(b, 1e-8);
                weighted_sum!(t, c, 7)
            },
            |t, x| {
                let a = t.scale(x, 2.5);
                let b = t.offset(a, 0.75);
                let c = t.ln_clamped(b, 1e-8);
                weighted_sum!(t, c, 7)
            },
        );
    }

    #[test]
    fn ln_clamped_floor_region_has_zero_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f32(vec![3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = t.ln_clamped(x, 1e-8);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap().data;
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relu_grads_match_fd_away_from_kink() {
        // Keep all activations at least 0.05 from zero so the finite
        // difference never straddles the kink.
        let xs = vec![0.5, -0.7, 1.2, -0.1, 0.9, 2.0, -1.5, 0.3];
        fd_check(
            &[8],
            &xs,
            |t, x| {
                let r = t.relu(x);
                weighted_sum!(t, r, 8)
            },
            |t, x| {
                let r = t.relu(x);
                weighted_sum!(t, r, 8)
            },
        );
    }

    #[test]
    fn conv2d_forward_matches_hand_computation() {
        // 1x1 input channel, 3x3 identity-ish kernel picking the centre.
        let mut t = Tape::<f32>::new();
        let img = t.constant(
            Tensor::from_f32(vec![1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
                .unwrap(),
        );
        let mut kv = vec![0.0f32; 9];
        kv[4] = 1.0;
        let ker = t.constant(Tensor::from_f32(vec![1, 1, 3, 3], &kv).unwrap());
        let out = t.conv2d(img, ker, None, 1, 1).unwrap();
        assert_eq!(t.shape(out), &[1, 3, 3]);
        assert_eq!(t.value(out).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn conv2d_stride2_extent_is_floored() {
        let mut t = Tape::<f32>::new();
        let img = t.constant(Tensor::zeros(&[1, 64, 64]));
        let ker = t.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let out = t.conv2d(img, ker, None, 2, 1).unwrap();
        assert_eq!(t.shape(out), &[4, 32, 32]);
        let img5 = t.constant(Tensor::zeros(&[1, 5, 5]));
        let ker5 = t.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let out5 = t.conv2d(img5, ker5, None, 2, 1).unwrap();
        assert_eq!(t.shape(out5), &[2, 3, 3]);
    }

    #[test]
    fn conv2d_input_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs = rand_vec(&mut rng, 2 * 6 * 5, -1.0, 1.0);
        let kv = rand_vec(&mut rng, 3 * 2 * 9, -0.5, 0.5);
        let bv = rand_vec(&mut rng, 3, -0.2, 0.2);
        let (k32, b32) = (kv.clone(), bv.clone());
        let (k64, b64) = (kv, bv);
        fd_check(
            &[2, 6, 5],
            &xs,
            move |t, x| {
                let k = t.constant(Tensor::from_f32(vec![3, 2, 3, 3], &k32).unwrap());
                let b = t.constant(Tensor::from_f32(vec![3], &b32).unwrap());
                let c = t.conv2d(x, k, Some(b), 2, 1).unwrap();
                weighted_sum!(t, c, 9)
            },
            move |t, x| {
                let k = t.constant(Tensor::from_f32(vec![3, 2, 3, 3], &k64).unwrap());
                let b = t.constant(Tensor::from_f32(vec![3], &b64).unwrap());
                let c = t.conv2d(x, k, Some(b), 2, 1).unwrap();
                weighted_sum!(t, c, 9)
            },
        );
    }

    #[test]
    fn conv2d_kernel_and_bias_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let iv = rand_vec(&mut rng, 2 * 5 * 5, -1.0, 1.0);
        let kxs = rand_vec(&mut rng, 2 * 2 * 9 + 2, -0.5, 0.5);
        let (i32v, i64v) = (iv.clone(), iv);
        // Leaf holds kernel weights then bias, packed flat.
        fd_check(
            &[2 * 2 * 9 + 2],
            &kxs,
            move |t, x| {
                let img = t.constant(Tensor::from_f32(vec![2, 5, 5], &i32v).unwrap());
                let kflat = t.reshape(x, &[2 * 2 * 9 + 2]).unwrap();
                let _ = kflat;
                let k = {
                    let data = t.value(x).data[..36].to_vec();
                    let kc = t.constant(Tensor::new(vec![2, 2, 3, 3], data).unwrap());
                    let _ = kc;
                    // Route gradients through slice ops instead: rebuild via
                    // reshape of two slices.
                    let kpart = t.narrow_for_test(x, 0, 36);
                    t.reshape(kpart, &[2, 2, 3, 3]).unwrap()
                };
                let b = t.narrow_for_test(x, 36, 2);
                let c = t.conv2d(img, k, Some(b), 1, 1).unwrap();
                weighted_sum!(t, c, 10)
            },
            move |t, x| {
                let img = t.constant(Tensor::from_f32(vec![2, 5, 5], &i64v).unwrap());
                let kpart = t.narrow_for_test(x, 0, 36);
                let k = t.reshape(kpart, &[2, 2, 3, 3]).unwrap();
                let b = t.narrow_for_test(x, 36, 2);
                let c = t.conv2d(img, k, Some(b), 1, 1).unwrap();
                weighted_sum!(t, c, 10)
            },
        );
    }

    #[test]
    fn avg_pool_forward_and_grad() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(
            Tensor::from_f32(vec![1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(),
        );
        let p = t.avg_pool(x, 2).unwrap();
        assert_eq!(t.shape(p), &[1, 1, 2]);
        assert_eq!(t.value(p).data, vec![3.5, 5.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let xs = rand_vec(&mut rng, 2 * 4 * 4, -1.0, 1.0);
        fd_check(
            &[2, 4, 4],
            &xs,
            |t, x| {
                let p = t.avg_pool(x, 2).unwrap();
                weighted_sum!(t, p, 11)
            },
            |t, x| {
                let p = t.avg_pool(x, 2).unwrap();
                weighted_sum!(t, p, 11)
            },
        );
    }

    #[test]
    fn resize_bilinear_matches_worked_example() {
        // Upsampling a 1x2 row [0, 1] to 1x4 samples source x-coordinates
        // (dst+0.5)*1/4 = 0.125, 0.375, 0.625, 0.875.
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_f32(vec![1, 1, 2], &[0.0, 1.0]).unwrap());
        let r = t.resize_bilinear(x, 1, 4).unwrap();
        let got = &t.value(r).data;
        let want = [0.125, 0.375, 0.625, 0.875];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn resize_bilinear_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let xs = rand_vec(&mut rng, 2 * 3 * 4, -1.0, 1.0);
        fd_check(
            &[2, 3, 4],
            &xs,
            |t, x| {
                let r = t.resize_bilinear(x, 7, 9).unwrap();
                weighted_sum!(t, r, 12)
            },
            |t, x| {
                let r = t.resize_bilinear(x, 7, 9).unwrap();
                weighted_sum!(t, r, 12)
            },
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_match_fd() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f32(vec![2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = t.softmax(x, 1).unwrap();
        let d = &t.value(s).data;
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let xs = rand_vec(&mut rng, 2 * 3 * 4, -2.0, 2.0);
        for axis in 0..3 {
            fd_check(
                &[2, 3, 4],
                &xs,
                move |t, x| {
                    let s = t.softmax(x, axis).unwrap();
                    weighted_sum!(t, s, 13)
                },
                move |t, x| {
                    let s = t.softmax(x, axis).unwrap();
                    weighted_sum!(t, s, 13)
                },
            );
        }
    }

    #[test]
    fn softmax_is_invariant_to_lane_shift() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::from_f32(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let b = t.constant(Tensor::from_f32(vec![3], &[101.0, 102.0, 103.0]).unwrap());
        let sa = t.softmax(a, 0).unwrap();
        let sb = t.softmax(b, 0).unwrap();
        for (x, y) in t.value(sa).data.iter().zip(&t.value(sb).data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_scores_forward_bounds_and_grads() {
        let mut t = Tape::<f32>::new();
        let f = t.constant(Tensor::from_f32(vec![2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = t.constant(Tensor::from_f32(vec![2, 2], &[1.0, 0.0, 1.0, 1.0]).unwrap());
        let s = t.cosine_scores(f, p, 1e-8).unwrap();
        assert_eq!(t.shape(s), &[2, 1, 2]);
        let d = &t.value(s).data;
        // Pixel 0 = e_x, pixel 1 = e_y; proto 0 = e_x, proto 1 = (1,1)/√2.
        assert!((d[0] - 1.0).abs() < 1e-5);
        assert!(d[1].abs() < 1e-5);
        let inv_sqrt2 = 1.0 / 2.0f32.sqrt();
        assert!((d[2] - inv_sqrt2).abs() < 1e-5);
        assert!((d[3] - inv_sqrt2).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let xs = rand_vec(&mut rng, 3 * 2 * 2, 0.2, 1.5);
        let pv = rand_vec(&mut rng, 2 * 3, 0.2, 1.5);
        let (p32, p64) = (pv.clone(), pv);
        fd_check(
            &[3, 2, 2],
            &xs,
            move |t, x| {
                let p = t.constant(Tensor::from_f32(vec![2, 3], &p32).unwrap());
                let s = t.cosine_scores(x, p, 1e-8).unwrap();
                weighted_sum!(t, s, 14)
            },
            move |t, x| {
                let p = t.constant(Tensor::from_f32(vec![2, 3], &p64).unwrap());
                let s = t.cosine_scores(x, p, 1e-8).unwrap();
                weighted_sum!(t, s, 14)
            },
        );
    }

    #[test]
    fn cosine_scores_proto_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let fv = rand_vec(&mut rng, 3 * 2 * 2, 0.2, 1.5);
        let xs = rand_vec(&mut rng, 2 * 3, 0.2, 1.5);
        let (f32v, f64v) = (fv.clone(), fv);
        fd_check(
            &[2, 3],
            &xs,
            move |t, x| {
                let f = t.constant(Tensor::from_f32(vec![3, 2, 2], &f32v).unwrap());
                let s = t.cosine_scores(f, x, 1e-8).unwrap();
                weighted_sum!(t, s, 15)
            },
            move |t, x| {
                let f = t.constant(Tensor::from_f32(vec![3, 2, 2], &f64v).unwrap());
                let s = t.cosine_scores(f, x, 1e-8).unwrap();
                weighted_sum!(t, s, 15)
            },
        );
    }

    #[test]
    fn cosine_fields_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let xs = rand_vec(&mut rng, 3 * 2 * 3, 0.2, 1.5);
        let bv = rand_vec(&mut rng, 3 * 2 * 3, 0.2, 1.5);
        let (b32, b64) = (bv.clone(), bv);
        fd_check(
            &[3, 2, 3],
            &xs,
            move |t, x| {
                let b = t.constant(Tensor::from_f32(vec![3, 2, 3], &b32).unwrap());
                let s = t.cosine_fields(x, b, 1e-8).unwrap();
                weighted_sum!(t, s, 16)
            },
            move |t, x| {
                let b = t.constant(Tensor::from_f32(vec![3, 2, 3], &b64).unwrap());
                let s = t.cosine_fields(x, b, 1e-8).unwrap();
                weighted_sum!(t, s, 16)
            },
        );
    }

    #[test]
    fn combine_protos_both_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let wv = rand_vec(&mut rng, 2 * 2 * 3, 0.1, 1.0);
        let xs = rand_vec(&mut rng, 2 * 4, -1.0, 1.0);
        let (w32, w64) = (wv.clone(), wv);
        fd_check(
            &[2, 4],
            &xs,
            move |t, x| {
                let w = t.constant(Tensor::from_f32(vec![2, 2, 3], &w32).unwrap());
                let c = t.combine_protos(w, x).unwrap();
                weighted_sum!(t, c, 17)
            },
            move |t, x| {
                let w = t.constant(Tensor::from_f32(vec![2, 2, 3], &w64).unwrap());
                let c = t.combine_protos(w, x).unwrap();
                weighted_sum!(t, c, 17)
            },
        );
        let pv = rand_vec(&mut rng, 2 * 4, -1.0, 1.0);
        let xs2 = rand_vec(&mut rng, 2 * 2 * 3, 0.1, 1.0);
        let (p32, p64) = (pv.clone(), pv);
        fd_check(
            &[2, 2, 3],
            &xs2,
            move |t, x| {
                let p = t.constant(Tensor::from_f32(vec![2, 4], &p32).unwrap());
                let c = t.combine_protos(x, p).unwrap();
                weighted_sum!(t, c, 18)
            },
            move |t, x| {
                let p = t.constant(Tensor::from_f32(vec![2, 4], &p64).unwrap());
                let c = t.combine_protos(x, p).unwrap();
                weighted_sum!(t, c, 18)
            },
        );
    }

    #[test]
    fn gather_pixels_accumulates_duplicate_coords() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_f32(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = t.gather_pixels(x, vec![(0, 1), (0, 1), (1, 0)]).unwrap();
        assert_eq!(t.value(g).data, vec![2.0, 2.0, 3.0]);
        let s = t.sum(g);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![0.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_mean_forward_and_grad() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_f32(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = t.masked_mean(x, &[1.0, 0.0, 0.0, 1.0], 1e-8).unwrap();
        let v = t.value(m).data[0];
        assert!((v - 2.5).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let xs = rand_vec(&mut rng, 3 * 2 * 2, -1.0, 1.0);
        let wv = vec![1.0f32, 0.0, 1.0, 1.0];
        let w64: Vec<f64> = wv.iter().map(|&v| v as f64).collect();
        let w32 = wv;
        fd_check(
            &[3, 2, 2],
            &xs,
            move |t, x| {
                let m = t.masked_mean(x, &w32, 1e-8).unwrap();
                weighted_sum!(t, m, 19)
            },
            move |t, x| {
                let m = t.masked_mean(x, &w64, 1e-8).unwrap();
                weighted_sum!(t, m, 19)
            },
        );
    }

    #[test]
    fn stack_slice_reshape_round_trip_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs = rand_vec(&mut rng, 6, -1.0, 1.0);
        fd_check(
            &[2, 3],
            &xs,
            |t, x| {
                let a = t.slice_channel(x, 0).unwrap();
                let b = t.slice_channel(x, 1).unwrap();
                let st = t.stack(&[b, a]).unwrap();
                let r = t.reshape(st, &[6]).unwrap();
                weighted_sum!(t, r, 20)
            },
            |t, x| {
                let a = t.slice_channel(x, 0).unwrap();
                let b = t.slice_channel(x, 1).unwrap();
                let st = t.stack(&[b, a]).unwrap();
                let r = t.reshape(st, &[6]).unwrap();
                weighted_sum!(t, r, 20)
            },
        );
    }

    #[test]
    fn edge_magnitude_forward_and_grad() {
        let mut t = Tape::<f32>::new();
        let gx = t.constant(Tensor::from_f32(vec![1, 1, 1], &[3.0]).unwrap());
        let gy = t.constant(Tensor::from_f32(vec![1, 1, 1], &[4.0]).unwrap());
        let m = t.edge_magnitude(gx, gy, 0.0).unwrap();
        assert!((t.value(m).data[0] - 5.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let xs = rand_vec(&mut rng, 2 * 8, -1.0, 1.0);
        fd_check(
            &[2, 2, 4],
            &xs,
            |t, x| {
                let gx = t.slice_channel(x, 0).unwrap();
                let gy = t.slice_channel(x, 1).unwrap();
                let gx3 = t.reshape(gx, &[1, 2, 4]).unwrap();
                let gy3 = t.reshape(gy, &[1, 2, 4]).unwrap();
                let m = t.edge_magnitude(gx3, gy3, 1e-12).unwrap();
                weighted_sum!(t, m, 21)
            },
            |t, x| {
                let gx = t.slice_channel(x, 0).unwrap();
                let gy = t.slice_channel(x, 1).unwrap();
                let gx3 = t.reshape(gx, &[1, 2, 4]).unwrap();
                let gy3 = t.reshape(gy, &[1, 2, 4]).unwrap();
                let m = t.edge_magnitude(gx3, gy3, 1e-12).unwrap();
                weighted_sum!(t, m, 21)
            },
        );
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_f32(vec![2], &[1.0, 2.0]).unwrap());
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::from_f32(vec![2], &[1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::from_f32(vec![2], &[3.0, 4.0]).unwrap());
        let m = t.mul(x, c).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data, vec![3.0, 4.0]);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // s = sum(x*x) via sharing the same node twice: ds/dx = 2x.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f32(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let m = t.mul(x, x).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap().data;
        assert_eq!(g, vec![2.0, -4.0, 1.0]);
    }
}

#[cfg(test)]
impl<R: Real> Tape<R> {
    /// Test-only contiguous narrow along a flat leaf, built from the public
    /// slice/stack/reshape ops so its gradient is already covered.
    fn narrow_for_test(&mut self, input: TensorId, start: usize, len: usize) -> TensorId {
        let total = self.value(input).data.len();
        let flat = self.reshape(input, &[total]).unwrap();
        // Reshape to [total, 1], slice rows, restack.
        let cols = self.reshape(flat, &[total, 1]).unwrap();
        let mut rows = Vec::with_capacity(len);
        for i in start..start + len {
            rows.push(self.slice_channel(cols, i).unwrap());
        }
        let st = self.stack(&rows).unwrap();
        self.reshape(st, &[len]).unwrap()
    }
}
