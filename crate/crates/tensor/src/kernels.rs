//! Forward and backward kernels for the spatial operators.
//!
//! Every output element of a kernel depends only on its own receptive field,
//! and the accumulation order per element is fixed. Two runs that differ only
//! outside a region therefore produce bit-identical values away from it.

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, geo: ConvGeometry) -> usize {
    assert!(input + 2 * geo.pad >= kernel, "kernel {kernel} larger than padded input {input}");
    (input + 2 * geo.pad - kernel) / geo.stride + 1
}

fn is_pointwise(k: usize, geo: ConvGeometry) -> bool {
    k == 1 && geo.stride == 1 && geo.pad == 0
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` columns.
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    cols: &mut [T],
) {
    let ho = conv_out_size(h, k, geo);
    let wo = conv_out_size(w, k, geo);
    let npix = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    x: &mut [T],
) {
    let ho = conv_out_size(h, k, geo);
    let wo = conv_out_size(w, k, geo);
    let npix = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let (o, ci, k, k2) = weight.dims4();
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let ho = conv_out_size(h, k, geo);
    let wo = conv_out_size(w, k, geo);
    let npix = ho * wo;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); b * o * npix];
    let mut cols = if is_pointwise(k, geo) { Vec::new() } else { vec![T::zero(); ckk * npix] };
    for bi in 0..b {
        let xb = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
        let ob = &mut out[bi * o * npix..(bi + 1) * o * npix];
        if let Some(bias) = bias {
            for (oc, plane) in ob.chunks_mut(npix).enumerate() {
                plane.fill(bias.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if is_pointwise(k, geo) {
            pointwise_forward(o, c, npix, weight.data(), xb, beta, ob);
        } else {
            im2col(xb, c, h, w, k, geo, &mut cols);
            gemm(o, ckk, npix, weight.data(), false, &cols, false, beta, ob);
        }
    }
    Tensor::new(&[b, o, ho, wo], out)
}

/// `out = W x + beta * out` for a 1x1 convolution. Inputs that are zero at
/// most sites (style offsets confined to a mask) only pay for the nonzero ones.
fn pointwise_forward<T: Scalar>(o: usize, c: usize, npix: usize, w: &[T], x: &[T], beta: T, out: &mut [T]) {
    let mut live = vec![false; npix];
    for plane in x.chunks(npix) {
        for (l, &v) in live.iter_mut().zip(plane) {
            *l |= v != T::zero();
        }
    }
    let active: Vec<usize> = (0..npix).filter(|&p| live[p]).collect();
    if active.len() * 2 > npix {
        gemm(o, c, npix, w, false, x, false, beta, out);
        return;
    }
    if beta == T::zero() {
        out.fill(T::zero());
    }
    if active.is_empty() {
        return;
    }
    let n = active.len();
    let mut cols = vec![T::zero(); c * n];
    for ch in 0..c {
        for (j, &p) in active.iter().enumerate() {
            cols[ch * n + j] = x[ch * npix + p];
        }
    }
    let mut packed = vec![T::zero(); o * n];
    gemm(o, c, n, w, false, &cols, false, T::zero(), &mut packed);
    for oc in 0..o {
        for (j, &p) in active.iter().enumerate() {
            out[oc * npix + p] = beta * out[oc * npix + p] + packed[oc * n + j];
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geo: ConvGeometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (b, c, h, w) = x.dims4();
    let (o, _, k, _) = weight.dims4();
    let (_, _, ho, wo) = grad_out.dims4();
    let npix = ho * wo;
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, geo);

    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * npix }];
    let mut dcols = vec![T::zero(); if need_input && !pointwise { ckk * npix } else { 0 }];

    for bi in 0..b {
        let xb = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
        let gb = &grad_out.data()[bi * o * npix..(bi + 1) * o * npix];
        if let Some(dw) = dw.as_mut() {
            if pointwise {
                gemm(o, npix, ckk, gb, false, xb, true, T::one(), dw);
            } else {
                im2col(xb, c, h, w, k, geo, &mut cols);
                gemm(o, npix, ckk, gb, false, &cols, true, T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
            if pointwise {
                gemm(ckk, o, npix, weight.data(), true, gb, false, T::one(), dxb);
            } else {
                gemm(ckk, o, npix, weight.data(), true, gb, false, T::zero(), &mut dcols);
                col2im(&dcols, c, h, w, k, geo, dxb);
            }
        }
    }

    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); o];
        for bi in 0..b {
            for (oc, acc) in db.iter_mut().enumerate() {
                let plane = &grad_out.data()[(bi * o + oc) * npix..(bi * o + oc + 1) * npix];
                *acc += plane.iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[o], db)
    });

    ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape(), d)),
        weight: dw.map(|d| Tensor::new(weight.shape(), d)),
        bias: db,
    }
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (b, c, oh, ow) = grad.dims4();
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); b * c * h * w];
    for (plane, dst) in grad.data().chunks(oh * ow).zip(out.chunks_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += plane[oy * ow + ox];
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Axis-aligned crop of one batch entry, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub batch: usize,
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

/// Bilinear sample positions along one axis: (low index, high index, high weight).
fn bilinear_taps(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (start + lo, start + hi, src - lo as f64)
        })
        .collect()
}

/// Crops each box and resamples it bilinearly to `size x size`; output `[boxes, C, size, size]`.
pub fn crop_resize<T: Scalar>(x: &Tensor<T>, boxes: &[CropBox], size: usize) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    let mut out = Vec::with_capacity(boxes.len() * c * size * size);
    for bx in boxes {
        assert!(bx.y0 + bx.height <= h && bx.x0 + bx.width <= w, "crop box {bx:?} outside {h}x{w}");
        let ty = bilinear_taps(bx.y0, bx.height, size);
        let tx = bilinear_taps(bx.x0, bx.width, size);
        for ci in 0..c {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    let v00 = x.get4(bx.batch, ci, y0, x0);
                    let v01 = x.get4(bx.batch, ci, y0, x1);
                    let v10 = x.get4(bx.batch, ci, y1, x0);
                    let v11 = x.get4(bx.batch, ci, y1, x1);
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out.push(top + (bot - top) * fy);
                }
            }
        }
    }
    Tensor::new(&[boxes.len(), c, size, size], out)
}

pub fn crop_resize_backward<T: Scalar>(
    input_shape: &[usize],
    boxes: &[CropBox],
    size: usize,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let (_, c, _, _) = dx.dims4();
    let mut gi = grad.data().iter();
    for bx in boxes {
        let ty = bilinear_taps(bx.y0, bx.height, size);
        let tx = bilinear_taps(bx.x0, bx.width, size);
        for ci in 0..c {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let g = *gi.next().expect("grad size");
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    let one = T::one();
                    for (yy, xx, wgt) in [
                        (y0, x0, (one - fy) * (one - fx)),
                        (y0, x1, (one - fy) * fx),
                        (y1, x0, fy * (one - fx)),
                        (y1, x1, fy * fx),
                    ] {
                        let o = dx.offset4(bx.batch, ci, yy, xx);
                        dx.data_mut()[o] += g * wgt;
                    }
                }
            }
        }
    }
    dx
}
