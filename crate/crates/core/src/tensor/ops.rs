use super::{gemm, Backward, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise plumbing

struct AddBackward;

impl<T: Element> Backward<T> for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, upstream: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(upstream.to_vec()), Some(upstream.to_vec())]
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        AddBackward,
    ))
}

struct ScaleBackward<T>(T);

impl<T: Element> Backward<T> for ScaleBackward<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, upstream: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(upstream.iter().map(|g| *g * self.0).collect())]
    }
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let c = T::from_f64_lossy(factor);
    let data = x.data().iter().map(|v| *v * c).collect();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], ScaleBackward(c))
}

struct SumBackward;

impl<T: Element> Backward<T> for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![upstream[0]; parents[0].numel()])]
    }
}

pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(vec![1], vec![x.sum_all()], vec![x.clone()], SumBackward)
}

struct ReshapeBackward;

impl<T: Element> Backward<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, upstream: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(upstream.to_vec())]
    }
}

pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    super::check_shape(shape, x.numel())?;
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.data().to_vec(),
        vec![x.clone()],
        ReshapeBackward,
    ))
}

struct ReluBackward;

impl<T: Element> Backward<T> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let grad = parents[0]
            .data()
            .iter()
            .zip(upstream)
            .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
            .collect();
        vec![Some(grad)]
    }
}

/// `max(x, 0)`; the subgradient at exactly zero is zero.
pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| v.max(T::zero())).collect();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], ReluBackward)
}

struct MeanBackward {
    n: usize,
}

impl<T: Element> Backward<T> for MeanBackward {
    fn name(&self) -> &'static str {
        "elementwise_mean"
    }

    fn backward(&self, upstream: &[T], _: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let n = T::from_usize(self.n).unwrap();
        let share: Vec<T> = upstream.iter().map(|g| *g / n).collect();
        vec![Some(share); self.n]
    }
}

/// Element-wise mean of same-shape tensors: `out[z] = (Σ_i x_i[z]) / n`.
pub fn elementwise_mean<T: Element>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("elementwise_mean needs at least one input"))?;
    for other in &inputs[1..] {
        same_shape("elementwise_mean", first, other)?;
    }
    let mut acc = first.data().to_vec();
    for other in &inputs[1..] {
        acc.iter_mut().zip(other.data()).for_each(|(a, v)| *a = *a + *v);
    }
    let n = T::from_usize(inputs.len()).unwrap();
    acc.iter_mut().for_each(|a| *a = *a / n);
    Ok(Tensor::from_op(
        first.shape().to_vec(),
        acc,
        inputs.to_vec(),
        MeanBackward { n: inputs.len() },
    ))
}

struct MseBackward;

impl<T: Element> Backward<T> for MseBackward {
    fn name(&self) -> &'static str {
        "mse_loss"
    }

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (pred, target) = (&parents[0], &parents[1]);
        let k = T::from_f64_lossy(2.0) * upstream[0] / T::from_usize(pred.numel()).unwrap();
        let grad: Vec<T> = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| k * (*p - *t))
            .collect();
        let target_grad = target
            .requires_grad()
            .then(|| grad.iter().map(|g| -*g).collect());
        vec![pred.requires_grad().then_some(grad), target_grad]
    }
}

/// Mean of squared differences over every element.
pub fn mse_loss<T: Element>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mse_loss", prediction, target)?;
    let total: T = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (*p - *t) * (*p - *t))
        .sum();
    let value = total / T::from_usize(prediction.numel()).unwrap();
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![prediction.clone(), target.clone()],
        MseBackward,
    ))
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps the spatial extents (extra row/column goes
    /// bottom/right for even kernels).
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Unfolds one image into a `(in_ch·kh·kw) × (out_h·out_w)` matrix.
    fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let src = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy + i) as isize - self.pad_top as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox + j) as isize - self.pad_left as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): folds column gradients back into
    /// an image gradient, accumulating overlaps.
    fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_ch {
            let dst = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy + i) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox + j) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geom: ConvGeometry,
}

impl<T: Element> Backward<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
        let image_len = g.in_ch * g.h * g.w;
        let out_len = g.out_ch * g.out_plane();
        let patch = g.patch_len();

        let mut d_input = input.requires_grad().then(|| vec![T::zero(); input.numel()]);
        let mut d_weight = weight.requires_grad().then(|| vec![T::zero(); weight.numel()]);
        let mut d_bias = bias.requires_grad().then(|| vec![T::zero(); bias.numel()]);

        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * g.out_plane()]
        };
        let mut d_cols = vec![T::zero(); patch * g.out_plane()];

        for n in 0..g.batch {
            let up = &upstream[n * out_len..(n + 1) * out_len];
            let image = &input.data()[n * image_len..(n + 1) * image_len];

            if let Some(db) = d_bias.as_mut() {
                for (o, acc) in db.iter_mut().enumerate() {
                    *acc = *acc + up[o * g.out_plane()..(o + 1) * g.out_plane()].iter().copied().sum();
                }
            }
            if let Some(dw) = d_weight.as_mut() {
                let cols_ref: &[T] = if g.is_pointwise() {
                    image
                } else {
                    g.im2col(image, &mut cols);
                    &cols
                };
                gemm(g.out_ch, g.out_plane(), patch, up, false, cols_ref, true, dw, true);
            }
            if let Some(dx) = d_input.as_mut() {
                let dx = &mut dx[n * image_len..(n + 1) * image_len];
                if g.is_pointwise() {
                    gemm(patch, g.out_ch, g.out_plane(), weight.data(), true, up, false, dx, true);
                } else {
                    gemm(patch, g.out_ch, g.out_plane(), weight.data(), true, up, false, &mut d_cols, false);
                    g.col2im(&d_cols, dx);
                }
            }
        }
        vec![d_input, d_weight, d_bias]
    }
}

/// 2-D cross-correlation over NCHW input with `(out_ch, in_ch, kh, kw)`
/// weights and a per-output-channel bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (batch, in_ch, h, w) = input.dims4()?;
    let (out_ch, w_in, kh, kw) = weight
        .dims4()
        .map_err(|_| Error::shape(format!("conv2d weight must be (out, in, kh, kw), got {:?}", weight.shape())))?;
    if w_in != in_ch {
        return Err(Error::shape(format!(
            "conv2d: input has {in_ch} channels but weight expects {w_in}"
        )));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?} does not match {out_ch} output channels",
            bias.shape()
        )));
    }
    let (pad_top, pad_left, out_h, out_w) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(format!(
                    "conv2d: {kh}x{kw} kernel does not fit a {h}x{w} input without padding"
                )));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    let geom = ConvGeometry {
        batch,
        in_ch,
        out_ch,
        h,
        w,
        kh,
        kw,
        pad_top,
        pad_left,
        out_h,
        out_w,
    };

    let plane = geom.out_plane();
    let image_len = in_ch * h * w;
    let out_len = out_ch * plane;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); geom.patch_len() * plane]
    };
    for n in 0..batch {
        let image = &input.data()[n * image_len..(n + 1) * image_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (o, b) in bias.data().iter().enumerate() {
            dst[o * plane..(o + 1) * plane].fill(*b);
        }
        let cols_ref: &[T] = if geom.is_pointwise() {
            image
        } else {
            geom.im2col(image, &mut cols);
            &cols
        };
        gemm(out_ch, geom.patch_len(), plane, weight.data(), false, cols_ref, false, dst, true);
    }
    Ok(Tensor::from_op(
        vec![batch, out_ch, out_h, out_w],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Conv2dBackward { geom },
    ))
}

// ---------------------------------------------------------------------------
// Bilinear resize

/// Corner-aligned sampling table for one axis: source index pair and the
/// weight of the second sample.
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let step = if dst > 1 {
        (src - 1) as f64 / (dst - 1) as f64
    } else {
        0.0
    };
    (0..dst)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

struct ResizeBackward {
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl<T: Element> Backward<T> for ResizeBackward {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w) = parents[0].dims4().expect("checked in forward");
        let (th, tw) = (self.rows.len(), self.cols.len());
        let mut grad = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let up = &upstream[plane * th * tw..(plane + 1) * th * tw];
            let dst = &mut grad[plane * h * w..(plane + 1) * h * w];
            for (i, &(y0, y1, wy)) in self.rows.iter().enumerate() {
                let wy = T::from_f64_lossy(wy);
                for (j, &(x0, x1, wx)) in self.cols.iter().enumerate() {
                    let wx = T::from_f64_lossy(wx);
                    let g = up[i * tw + j];
                    let top = g * (T::one() - wy);
                    let bot = g * wy;
                    dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - wx);
                    dst[y0 * w + x1] = dst[y0 * w + x1] + top * wx;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - wx);
                    dst[y1 * w + x1] = dst[y1 * w + x1] + bot * wx;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Bilinear interpolation of every NCHW plane to `target_h × target_w`,
/// sampling with corners aligned (output corner pixels coincide with input
/// corner pixels). Resizing to the current extents is an exact copy.
pub fn bilinear_resize<T: Element>(
    input: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid(format!(
            "bilinear_resize target {target_h}x{target_w} must be at least 1x1"
        )));
    }
    if (target_h, target_w) == (h, w) {
        return reshape(input, input.shape());
    }
    let rows = axis_table(h, target_h);
    let cols = axis_table(w, target_w);
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, wy) in &rows {
            let wy = T::from_f64_lossy(wy);
            for &(x0, x1, wx) in &cols {
                let wx = T::from_f64_lossy(wx);
                let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let (p, q) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                // Lerp form keeps constant regions exactly constant.
                let top = a + wx * (b - a);
                let bot = p + wx * (q - p);
                out.push(top + wy * (bot - top));
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, target_h, target_w],
        out,
        vec![input.clone()],
        ResizeBackward { rows, cols },
    ))
}
