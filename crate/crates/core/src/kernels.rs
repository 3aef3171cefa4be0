//! Forward and backward kernels on plain tensors.
//!
//! These are tape-free; `autograd` wires them into the gradient tape. All
//! loops run in a fixed order so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric zero padding, in pixels per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub h: usize,
    pub w: usize,
}

impl Padding {
    pub fn same(kernel: usize) -> Self {
        Padding {
            h: kernel / 2,
            w: kernel / 2,
        }
    }
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: Padding,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, pad: Padding) -> Result<Self> {
        let [b, cin, h, w] = input.dims4()?;
        let [cout, kcin, kh, kw] = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if h + 2 * pad.h < kh || w + 2 * pad.w < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        Ok(ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: h + 2 * pad.h - kh + 1,
            ow: w + 2 * pad.w - kw + 1,
            pad,
        })
    }

    /// Output row `o` reads input row `o + k - pad`; returns the valid input row.
    fn src_row(&self, o: usize, k: usize) -> Option<usize> {
        let i = o as isize + k as isize - self.pad.h as isize;
        (i >= 0 && (i as usize) < self.h).then_some(i as usize)
    }

    /// Range of output columns whose source column `o + k - pad` is in bounds.
    fn col_range(&self, k: usize) -> (usize, usize) {
        let lo = self.pad.w.saturating_sub(k);
        let hi = (self.w + self.pad.w).saturating_sub(k).min(self.ow);
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == Padding::default()
    }

    /// Unfold one sample `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let n = self.col_cols();
        for ci in 0..self.cin {
            let x_plane = &x[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[((ci * self.kh + ki) * self.kw + kj) * n..][..n];
                    row.fill(0.0);
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.oh {
                        let Some(iy) = self.src_row(oy, ki) else { continue };
                        row[oy * self.ow + lo..][..hi - lo]
                            .copy_from_slice(&x_plane[iy * self.w + lo + kj - self.pad.w..][..hi - lo]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns back.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let n = self.col_cols();
        for ci in 0..self.cin {
            let dx_plane = &mut dx[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[((ci * self.kh + ki) * self.kw + kj) * n..][..n];
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.oh {
                        let Some(iy) = self.src_row(oy, ki) else { continue };
                        let dst = &mut dx_plane[iy * self.w + lo + kj - self.pad.w..][..hi - lo];
                        for (d, s) in dst.iter_mut().zip(&row[oy * self.ow + lo..][..hi - lo]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    /// View of the transpose of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n);
    // SAFETY: the assertions above keep every strided access of `a`, `b`
    // and the dense `m x n` output inside their slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, pad: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries, expected {}",
                b.numel(),
                g.cout
            )));
        }
    }
    let x = input.data();
    let (r, n) = (g.col_rows(), g.col_cols());
    let plane_in = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.b * g.cout * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; r * n] };
    for bi in 0..g.b {
        let xs = &x[bi * plane_in..][..plane_in];
        let o = &mut out[bi * g.cout * n..][..g.cout * n];
        if let Some(b) = bias {
            for (co, plane) in o.chunks_mut(n).enumerate() {
                plane.fill(b.data()[co]);
            }
        }
        let cols = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        gemm(g.cout, r, n, Mat::row_major(kernel.data(), r), Mat::row_major(cols, n), 1.0, o);
    }
    Ok(Tensor::from_parts_unchecked(vec![g.b, g.cout, g.oh, g.ow], out))
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
///
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    pad: Padding,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, pad)?;
    if grad_out.shape() != [g.b, g.cout, g.oh, g.ow] {
        return Err(Error::shape("conv2d backward: gradient shape mismatch"));
    }
    let x = input.data();
    let dy = grad_out.data();
    let (r, n) = (g.col_rows(), g.col_cols());
    let plane_in = g.cin * g.h * g.w;
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut dk = vec![0.0; kernel.numel()];
    let mut db = vec![0.0; g.cout];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; r * n] };
    let mut dcol = vec![0.0; if need_input && !g.is_pointwise() { r * n } else { 0 }];
    for bi in 0..g.b {
        let xs = &x[bi * plane_in..][..plane_in];
        let dys = &dy[bi * g.cout * n..][..g.cout * n];
        for (co, plane) in dys.chunks(n).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        let cols = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        gemm(g.cout, n, r, Mat::row_major(dys, n), Mat::transposed(cols, n), 1.0, &mut dk);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[bi * plane_in..][..plane_in];
            let wt = Mat::transposed(kernel.data(), r);
            if g.is_pointwise() {
                gemm(r, g.cout, n, wt, Mat::row_major(dys, n), 0.0, dxs);
            } else {
                gemm(r, g.cout, n, wt, Mat::row_major(dys, n), 0.0, &mut dcol);
                g.col2im(&dcol, dxs);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts_unchecked(input.shape().to_vec(), d)),
        Tensor::from_parts_unchecked(kernel.shape().to_vec(), dk),
        Tensor::from_parts_unchecked(vec![g.cout], db),
    ))
}

fn check_transpose_shapes(input: &Tensor, kernel: &Tensor) -> Result<([usize; 4], usize)> {
    let dims = input.dims4()?;
    let [kcin, cout, kh, kw] = kernel.dims4()?;
    if kcin != dims[1] {
        return Err(Error::shape(format!(
            "conv_transpose2d: input has {} channels, kernel expects {kcin}",
            dims[1]
        )));
    }
    if (kh, kw) != (2, 2) {
        return Err(Error::shape(format!(
            "conv_transpose2d: only 2x2 kernels with stride 2 are supported, got {kh}x{kw}"
        )));
    }
    Ok((dims, cout))
}

/// Stride-2 2x2 transposed convolution; doubles the spatial extents.
pub fn conv_transpose2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let ([b, cin, h, w], cout) = check_transpose_shapes(input, kernel)?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for ci in 0..cin {
            let x_plane = &x[(bi * cin + ci) * h * w..][..h * w];
            for co in 0..cout {
                let kk = &k[(ci * cout + co) * 4..][..4];
                let o_plane = &mut out[(bi * cout + co) * oh * ow..][..oh * ow];
                for y in 0..h {
                    for i in 0..2 {
                        let row = &mut o_plane[(2 * y + i) * ow..][..ow];
                        let (k0, k1) = (kk[2 * i], kk[2 * i + 1]);
                        for (xx, &v) in x_plane[y * w..][..w].iter().enumerate() {
                            row[2 * xx] += v * k0;
                            row[2 * xx + 1] += v * k1;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, cout, oh, ow], out))
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let ([b, cin, h, w], cout) = check_transpose_shapes(input, kernel)?;
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape() != [b, cout, oh, ow] {
        return Err(Error::shape("conv_transpose2d backward: gradient shape mismatch"));
    }
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut dk = vec![0.0; k.len()];
    for bi in 0..b {
        for ci in 0..cin {
            let x_off = (bi * cin + ci) * h * w;
            for co in 0..cout {
                let kbase = (ci * cout + co) * 4;
                let dy_plane = &dy[(bi * cout + co) * oh * ow..][..oh * ow];
                for y in 0..h {
                    for i in 0..2 {
                        let row = &dy_plane[(2 * y + i) * ow..][..ow];
                        let (k0, k1) = (k[kbase + 2 * i], k[kbase + 2 * i + 1]);
                        let mut a0 = 0.0;
                        let mut a1 = 0.0;
                        for xx in 0..w {
                            let v = x[x_off + y * w + xx];
                            a0 += v * row[2 * xx];
                            a1 += v * row[2 * xx + 1];
                            if let Some(dx) = dx.as_mut() {
                                dx[x_off + y * w + xx] += k0 * row[2 * xx] + k1 * row[2 * xx + 1];
                            }
                        }
                        dk[kbase + 2 * i] += a0;
                        dk[kbase + 2 * i + 1] += a1;
                    }
                }
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts_unchecked(input.shape().to_vec(), d)),
        Tensor::from_parts_unchecked(kernel.shape().to_vec(), dk),
    ))
}

/// 2x2 max-pooling. Returns the pooled map and, per output cell, the
/// row-major index (0..4) of the winning element inside its window. Ties go
/// to the lowest index.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    let [b, c, h, w] = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let xp = &x[plane * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let window = [xp[base], xp[base + 1], xp[base + w], xp[base + w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if window[i] > window[best] {
                        best = i;
                    }
                }
                out.push(window[best]);
                arg.push(best as u8);
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![b, c, oh, ow], out), arg))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[u8], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; input_shape.iter().product()];
    let dy = grad_out.data();
    for plane in 0..input_shape[0] * input_shape[1] {
        for y in 0..oh {
            for xx in 0..ow {
                let o = plane * oh * ow + y * ow + xx;
                let a = argmax[o] as usize;
                let (dy_, dx_) = (a / 2, a % 2);
                dx[plane * h * w + (2 * y + dy_) * w + 2 * xx + dx_] += dy[o];
            }
        }
    }
    Tensor::from_parts_unchecked(input_shape.to_vec(), dx)
}

/// Truncation radius used for a Gaussian of width `sigma`.
pub fn gaussian_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized 1-D Gaussian weights of length `2r + 1`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = gaussian_radius(sigma) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any offset and any extent.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Per output position, the source index of each kernel tap.
fn tap_table(n: usize, r: usize) -> Vec<usize> {
    let mut table = Vec::with_capacity(n * (2 * r + 1));
    for i in 0..n {
        for k in 0..=2 * r {
            table.push(reflect_index(i as isize + k as isize - r as isize, n));
        }
    }
    table
}

/// Center weight implied by the off-center taps, `1 - sum(w_k, k != 0)`.
///
/// The blur is evaluated as `x_i + sum_k w_k (x_{i+k} - x_i)`, which is the
/// same linear map with this center weight and reproduces constant planes
/// exactly.
fn effective_center(weights: &[f64]) -> f64 {
    let r = weights.len() / 2;
    1.0 - weights
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != r)
        .map(|(_, w)| w)
        .sum::<f64>()
}

/// Separable Gaussian blur with reflected borders, applied to every
/// `H x W` plane of a 4-d tensor.
pub fn gaussian_blur2d(input: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let [b, c, h, w] = input.dims4()?;
    let r = weights.len() / 2;
    let rows = tap_table(h, r);
    let taps = 2 * r + 1;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; h * w];
    let mut padded = vec![0.0; w + 2 * r];
    let pad_src: Vec<usize> = (0..w + 2 * r).map(|j| reflect_index(j as isize - r as isize, w)).collect();
    for plane in 0..b * c {
        let xp = &x[plane * h * w..][..h * w];
        for y in 0..h {
            let src = &xp[y * w..][..w];
            for (p, &i) in padded.iter_mut().zip(&pad_src) {
                *p = src[i];
            }
            let dst = &mut tmp[y * w..][..w];
            dst.fill(0.0);
            for (k, &wt) in weights.iter().enumerate() {
                if k == r {
                    continue;
                }
                for ((d, s), c) in dst.iter_mut().zip(&padded[k..k + w]).zip(src) {
                    *d += wt * (s - c);
                }
            }
            for (d, c) in dst.iter_mut().zip(src) {
                *d += c;
            }
        }
        let op = &mut out[plane * h * w..][..h * w];
        for y in 0..h {
            let idx = &rows[y * taps..][..taps];
            let dst = &mut op[y * w..][..w];
            let centre = &tmp[y * w..][..w];
            for (k, (&sy, &wt)) in idx.iter().zip(weights).enumerate() {
                if k == r {
                    continue;
                }
                for ((d, s), c) in dst.iter_mut().zip(&tmp[sy * w..][..w]).zip(centre) {
                    *d += wt * (s - c);
                }
            }
            for (d, c) in dst.iter_mut().zip(centre) {
                *d += c;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), out))
}

/// Adjoint of [`gaussian_blur2d`] (the blur is linear, so this is its
/// input gradient).
pub fn gaussian_blur2d_backward(grad_out: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let [b, c, h, w] = grad_out.dims4()?;
    let r = weights.len() / 2;
    let mut weights = weights.to_vec();
    weights[r] = effective_center(&weights);
    let weights = &weights[..];
    let rows = tap_table(h, r);
    let taps = 2 * r + 1;
    let dy = grad_out.data();
    let mut dx = vec![0.0; dy.len()];
    let mut tmp = vec![0.0; h * w];
    let mut padded = vec![0.0; w + 2 * r];
    let pad_src: Vec<usize> = (0..w + 2 * r).map(|j| reflect_index(j as isize - r as isize, w)).collect();
    for plane in 0..b * c {
        let gp = &dy[plane * h * w..][..h * w];
        tmp.fill(0.0);
        for y in 0..h {
            let idx = &rows[y * taps..][..taps];
            let src = &gp[y * w..][..w];
            for (&sy, &wt) in idx.iter().zip(weights) {
                for (d, s) in tmp[sy * w..][..w].iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        let dp = &mut dx[plane * h * w..][..h * w];
        for y in 0..h {
            let src = &tmp[y * w..][..w];
            padded.fill(0.0);
            for (k, &wt) in weights.iter().enumerate() {
                for (p, g) in padded[k..k + w].iter_mut().zip(src) {
                    *p += wt * g;
                }
            }
            let dst = &mut dp[y * w..][..w];
            for (&i, p) in pad_src.iter().zip(&padded) {
                dst[i] += p;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(grad_out.shape().to_vec(), dx))
}

/// Concatenate 4-d tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .dims4()?;
    let mut channels = 0;
    for p in parts {
        let d = p.dims4()?;
        if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
            return Err(Error::shape(format!(
                "concat_channels: {:?} incompatible with {:?}",
                p.shape(),
                first
            )));
        }
        channels += d[1];
    }
    let plane = first[2] * first[3];
    let mut out = Vec::with_capacity(first[0] * channels * plane);
    for bi in 0..first[0] {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[bi * c * plane..][..c * plane]);
        }
    }
    Ok(Tensor::from_parts_unchecked(
        vec![first[0], channels, first[2], first[3]],
        out,
    ))
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let s = grad.shape();
    let (b, total, plane) = (s[0], s[1], s[2] * s[3]);
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|c| Vec::with_capacity(b * c * plane)).collect();
    for bi in 0..b {
        let mut off = bi * total * plane;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[off..][..c * plane]);
            off += c * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_parts_unchecked(vec![b, c, s[2], s[3]], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_and_sum() {
        let y = conv2d(&t(&[1, 1, 1, 1], &[5.0]), &t(&[1, 1, 1, 1], &[1.0]), Some(&t(&[1], &[0.0])), Padding::default()).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let y = conv2d(&Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::full(&[1, 1, 2, 2], 1.0), None, Padding::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_same_padding_preserves_extent() {
        let x = Tensor::full(&[2, 3, 5, 7], 1.0);
        let k = Tensor::full(&[4, 3, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, Padding::same(3)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 7]);
        // corner sees a 2x2 patch in each of 3 channels
        assert_eq!(y.data()[0], 12.0);
        // interior sees the full 3x3 patch
        assert_eq!(y.data()[7 + 1], 27.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, None, Padding::same(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_single_tap_spread() {
        let y = conv_transpose2d(&t(&[1, 1, 1, 1], &[1.0]), &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
        let z = conv_transpose2d(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::full(&[2, 3, 2, 2], 0.7)).unwrap();
        assert_eq!(z.shape(), &[1, 3, 6, 6]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_window_and_ties() {
        let (y, idx) = maxpool2x2(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let (y, idx) = maxpool2x2(&Tensor::full(&[1, 2, 4, 4], 2.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert!(idx.iter().all(|&i| i == 0));
        assert!(maxpool2x2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn gaussian_weights() {
        let w = gaussian_kernel(1.0).unwrap();
        assert_eq!(w.len(), 7);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
        // sigma = 0.5: radius 2, weights proportional to exp(-i^2 / 0.5)
        let w = gaussian_kernel(0.5).unwrap();
        let raw: Vec<f64> = (-2i32..=2).map(|i| (-(i * i) as f64 / 0.5).exp()).collect();
        let total: f64 = raw.iter().sum();
        assert_eq!(w.len(), 5);
        assert!((w[2] - 1.0 / total).abs() < 1e-15);
        assert!((w[2] - 0.786_570_725_887_342_2).abs() < 1e-15);
    }

    #[test]
    fn reflect_covers_small_extents() {
        assert_eq!(reflect_index(-1, 4), 0);
        assert_eq!(reflect_index(-2, 4), 1);
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(5, 4), 2);
        for i in -20..20 {
            assert_eq!(reflect_index(i, 1), 0);
            assert!(reflect_index(i, 2) < 2);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        for sigma in [0.3, 0.5, 1.0, 2.0, 4.0] {
            let w = gaussian_kernel(sigma).unwrap();
            for (h, wd) in [(1, 1), (2, 3), (8, 8), (5, 13)] {
                let x = Tensor::full(&[1, 2, h, wd], 3.25);
                let y = gaussian_blur2d(&x, &w).unwrap();
                assert_eq!(y, x);
            }
        }
    }

    #[test]
    fn blur_backward_is_adjoint() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = gaussian_kernel(2.0).unwrap();
        let x = Tensor::randn(&[2, 1, 5, 9], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 1, 5, 9], 1.0, &mut rng);
        let lhs = gaussian_blur2d(&x, &w).unwrap().dot(&y);
        let rhs = x.dot(&gaussian_blur2d_backward(&y, &w).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::full(&[2, 2, 3, 3], 1.0);
        let b = Tensor::full(&[2, 3, 3, 3], 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3, 3]);
        let parts = split_channels(&c, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
