//! Forward and adjoint kernels for the structured tensor operations.
//!
//! All loops run in a fixed order so every result is bitwise reproducible.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = T::zero();
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index geometry shared by the convolution forward and adjoint passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        padding: (usize, usize),
    ) -> Result<Self, TensorError> {
        let [batch, in_channels, height, width] = input.dims4("conv2d")?;
        let [out_channels, kc, kh, kw] = kernel.dims4("conv2d")?;
        if kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        if bias.shape() != [out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: kernel.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::contract(
                "conv2d",
                format!("kernel extent {kh}x{kw} must be odd"),
            ));
        }
        let (ph, pw) = padding;
        if height + 2 * ph < kh || width + 2 * pw < kw {
            return Err(TensorError::contract(
                "conv2d",
                format!("padded input {height}x{width} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kh,
            kw,
            ph,
            pw,
            out_h: height + 2 * ph - kh + 1,
            out_w: width + 2 * pw - kw + 1,
        })
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    #[inline]
    fn col_range(&self, kx: usize) -> Option<(usize, usize)> {
        let lo = self.pw.saturating_sub(kx);
        let hi = (self.width + self.pw).saturating_sub(kx).min(self.out_w);
        (lo < hi).then_some((lo, hi))
    }

    /// Input row read by output row `oy` at tap `ky`.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.ph)?;
        (iy < self.height).then_some(iy)
    }

    /// 3x3 kernel with one pixel of padding on an image at least 2 wide:
    /// the case the fused kernels below handle.
    fn is_same_3x3(&self) -> bool {
        (self.kh, self.kw, self.ph, self.pw) == (3, 3, 1, 1) && self.width >= 2
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Cross-correlation with zero padding plus a per-channel bias.
pub(crate) fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    if geo.is_same_3x3() {
        conv3x3_forward(geo, input, kernel, bias)
    } else {
        conv_forward_general(geo, input, kernel, bias)
    }
}

/// Gradients of `conv2d_forward` with respect to input, kernel and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    if geo.is_same_3x3() {
        conv3x3_backward(geo, input, kernel, grad_out)
    } else {
        conv_backward_general(geo, input, kernel, grad_out)
    }
}

/// Any odd kernel and padding: one shifted row update per tap.
fn conv_forward_general<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let g = geo;
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let kplane = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.out_channels * out_plane];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let obase = (b * g.out_channels + o) * out_plane;
            let oplane = &mut out[obase..obase + out_plane];
            oplane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.in_channels {
                let iplane = &input[(b * g.in_channels + c) * in_plane..][..in_plane];
                let kbase = (o * g.in_channels + c) * kplane;
                for ky in 0..g.kh {
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let orow = &mut oplane[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &iplane[iy * g.width..(iy + 1) * g.width];
                        for kx in 0..g.kw {
                            let Some((lo, hi)) = g.col_range(kx) else { continue };
                            let w = kernel[kbase + ky * g.kw + kx];
                            let ilo = lo + kx - g.pw;
                            axpy(&mut orow[lo..hi], w, &irow[ilo..ilo + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_general<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let g = geo;
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let kplane = g.kh * g.kw;
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_k = vec![T::zero(); kernel.len()];
    let mut grad_b = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let gplane = &grad_out[(b * g.out_channels + o) * out_plane..][..out_plane];
            grad_b[o] += gplane.iter().copied().sum::<T>();
            for c in 0..g.in_channels {
                let ibase = (b * g.in_channels + c) * in_plane;
                let kbase = (o * g.in_channels + c) * kplane;
                for ky in 0..g.kh {
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        let rbase = ibase + iy * g.width;
                        for kx in 0..g.kw {
                            let Some((lo, hi)) = g.col_range(kx) else { continue };
                            let ilo = rbase + lo + kx - g.pw;
                            let len = hi - lo;
                            let kidx = kbase + ky * g.kw + kx;
                            grad_k[kidx] += dot(&grow[lo..hi], &input[ilo..ilo + len]);
                            axpy(&mut grad_in[ilo..ilo + len], kernel[kidx], &grow[lo..hi]);
                        }
                    }
                }
            }
        }
    }
    (grad_in, grad_k, grad_b)
}

/// `out += k (*) x` for one 3x3 kernel on one `h x w` plane with one pixel of
/// zero padding. The three taps of a kernel row are applied in one pass.
fn accumulate_3x3<T: Scalar>(out: &mut [T], x: &[T], k: &[T], h: usize, w: usize) {
    let n = w - 2;
    for oy in 0..h {
        let orow = &mut out[oy * w..(oy + 1) * w];
        if oy >= 1 && oy + 1 < h {
            // All three input rows exist: one pass over the row for all nine taps.
            let r0 = &x[(oy - 1) * w..oy * w];
            let r1 = &x[oy * w..(oy + 1) * w];
            let r2 = &x[(oy + 1) * w..(oy + 2) * w];
            let kk: [T; 9] = std::array::from_fn(|i| k[i]);
            let (a0, b0, c0) = (&r0[..n], &r0[1..n + 1], &r0[2..n + 2]);
            let (a1, b1, c1) = (&r1[..n], &r1[1..n + 1], &r1[2..n + 2]);
            let (a2, b2, c2) = (&r2[..n], &r2[1..n + 1], &r2[2..n + 2]);
            let o = &mut orow[1..n + 1];
            for i in 0..n {
                let t0 = kk[0] * a0[i] + kk[1] * b0[i] + kk[2] * c0[i];
                let t1 = kk[3] * a1[i] + kk[4] * b1[i] + kk[5] * c1[i];
                let t2 = kk[6] * a2[i] + kk[7] * b2[i] + kk[8] * c2[i];
                o[i] += t0 + t1 + t2;
            }
            orow[0] += (k[1] * r0[0] + k[2] * r0[1]) + (k[4] * r1[0] + k[5] * r1[1]) + (k[7] * r2[0] + k[8] * r2[1]);
            orow[w - 1] += (k[0] * r0[w - 2] + k[1] * r0[w - 1])
                + (k[3] * r1[w - 2] + k[4] * r1[w - 1])
                + (k[6] * r2[w - 2] + k[7] * r2[w - 1]);
            continue;
        }
        for ky in 0..3 {
            let Some(iy) = (oy + ky).checked_sub(1).filter(|&iy| iy < h) else { continue };
            let r = &x[iy * w..(iy + 1) * w];
            let (a, b, c) = (k[3 * ky], k[3 * ky + 1], k[3 * ky + 2]);
            let (left, mid, right) = (&r[..n], &r[1..n + 1], &r[2..]);
            for (((o, &l), &m), &rr) in orow[1..n + 1].iter_mut().zip(left).zip(mid).zip(right) {
                *o += a * l + b * m + c * rr;
            }
            orow[0] += b * r[0] + c * r[1];
            orow[w - 1] += a * r[w - 2] + b * r[w - 1];
        }
    }
}

fn conv3x3_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let oplane = &mut out[(b * g.out_channels + o) * plane..][..plane];
            oplane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.in_channels {
                let iplane = &input[(b * g.in_channels + c) * plane..][..plane];
                let k = &kernel[(o * g.in_channels + c) * 9..][..9];
                accumulate_3x3(oplane, iplane, k, g.height, g.width);
            }
        }
    }
    out
}

fn conv3x3_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (h, w) = (g.height, g.width);
    let plane = h * w;
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_k = vec![T::zero(); kernel.len()];
    let mut grad_b = vec![T::zero(); g.out_channels];
    // Per-tap, per-column partial products; summed once per kernel entry.
    let mut acc = vec![T::zero(); 9 * w];
    for o in 0..g.out_channels {
        for c in 0..g.in_channels {
            let kidx = (o * g.in_channels + c) * 9;
            // The adjoint of a cross-correlation is one with the kernel flipped.
            let k = &kernel[kidx..kidx + 9];
            let flipped: Vec<T> = (0..9).map(|i| k[8 - i]).collect();
            acc.iter_mut().for_each(|v| *v = T::zero());
            for b in 0..g.batch {
                let gplane = &grad_out[(b * g.out_channels + o) * plane..][..plane];
                let ibase = (b * g.in_channels + c) * plane;
                accumulate_3x3(&mut grad_in[ibase..ibase + plane], gplane, &flipped, h, w);
                let iplane = &input[ibase..ibase + plane];
                for oy in 0..h {
                    let grow = &gplane[oy * w..(oy + 1) * w];
                    for ky in 0..3 {
                        let Some(iy) = (oy + ky).checked_sub(1).filter(|&iy| iy < h) else { continue };
                        let r = &iplane[iy * w..(iy + 1) * w];
                        let t = &mut acc[3 * ky * w..(3 * ky + 3) * w];
                        let (t0, rest) = t.split_at_mut(w);
                        let (t1, t2) = rest.split_at_mut(w);
                        // kx = 0 reads column x - 1, kx = 2 reads x + 1.
                        for ((a, &gv), &rv) in t0[1..].iter_mut().zip(&grow[1..]).zip(&r[..w - 1]) {
                            *a += gv * rv;
                        }
                        for ((a, &gv), &rv) in t1.iter_mut().zip(grow).zip(r) {
                            *a += gv * rv;
                        }
                        for ((a, &gv), &rv) in t2[..w - 1].iter_mut().zip(&grow[..w - 1]).zip(&r[1..]) {
                            *a += gv * rv;
                        }
                    }
                }
            }
            for (tap, gk) in grad_k[kidx..kidx + 9].iter_mut().enumerate() {
                *gk = acc[tap * w..(tap + 1) * w].iter().copied().sum();
            }
        }
    }
    for b in 0..g.batch {
        for (o, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out[(b * g.out_channels + o) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    (grad_in, grad_k, grad_b)
}

/// Separable per-channel filtering that keeps only fully covered positions.
pub(crate) fn filter_valid_forward<T: Scalar>(
    dims: [usize; 4],
    taps: &[T],
    input: &[T],
) -> Vec<T> {
    let [b, c, h, w] = dims;
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![T::zero(); b * c * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..b * c {
        let plane = &input[p * h * w..(p + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let trow = &mut tmp[y * ow..(y + 1) * ow];
            for (t, &tap) in taps.iter().enumerate() {
                axpy(trow, tap, &row[t..t + ow]);
            }
        }
        let oplane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let orow = &mut oplane[y * ow..(y + 1) * ow];
            for (t, &tap) in taps.iter().enumerate() {
                axpy(orow, tap, &tmp[(y + t) * ow..(y + t + 1) * ow]);
            }
        }
    }
    out
}

pub(crate) fn filter_valid_backward<T: Scalar>(
    dims: [usize; 4],
    taps: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let [b, c, h, w] = dims;
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut grad_in = vec![T::zero(); b * c * h * w];
    let mut gtmp = vec![T::zero(); h * ow];
    for p in 0..b * c {
        let gplane = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        gtmp.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..oh {
            let grow = &gplane[y * ow..(y + 1) * ow];
            for (t, &tap) in taps.iter().enumerate() {
                axpy(&mut gtmp[(y + t) * ow..(y + t + 1) * ow], tap, grow);
            }
        }
        let iplane = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let trow = &gtmp[y * ow..(y + 1) * ow];
            let irow = &mut iplane[y * w..(y + 1) * w];
            for (t, &tap) in taps.iter().enumerate() {
                axpy(&mut irow[t..t + ow], tap, trow);
            }
        }
    }
    grad_in
}

/// Source index in the unsqueezed layout for every element of the squeezed
/// layout. Output channel `4c + q` holds the `q`-th entry of each 2x2 patch of
/// input channel `c`, with `q` ordered top-left, top-right, bottom-left,
/// bottom-right.
pub(crate) fn squeeze_index(dims: [usize; 4]) -> Vec<usize> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                for y in 0..oh {
                    for x in 0..ow {
                        idx.push(((bi * c + ci) * h + 2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 0.618).sin()).collect()
    }

    #[test]
    fn fused_3x3_matches_general_kernel() {
        for (b, ci, co, h, w) in [(2, 3, 4, 5, 7), (1, 1, 2, 1, 2), (1, 2, 1, 6, 3)] {
            let input = Tensor::new(vec![b, ci, h, w], pseudo(b * ci * h * w, 0.1)).unwrap();
            let kernel = Tensor::new(vec![co, ci, 3, 3], pseudo(co * ci * 9, 0.7)).unwrap();
            let bias = Tensor::new(vec![co], pseudo(co, 1.3)).unwrap();
            let geo = ConvGeometry::new(&input, &kernel, &bias, (1, 1)).unwrap();
            assert!(geo.is_same_3x3());
            let fast = conv3x3_forward(&geo, input.data(), kernel.data(), bias.data());
            let slow = conv_forward_general(&geo, input.data(), kernel.data(), bias.data());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            let go = pseudo(fast.len(), 2.9);
            let f = conv3x3_backward(&geo, input.data(), kernel.data(), &go);
            let s = conv_backward_general(&geo, input.data(), kernel.data(), &go);
            for (x, y) in [(&f.0, &s.0), (&f.1, &s.1), (&f.2, &s.2)] {
                assert_eq!(x.len(), y.len());
                for (a, b) in x.iter().zip(y) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn squeeze_index_is_a_permutation() {
        let idx = squeeze_index([2, 3, 4, 6]);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..idx.len()).collect::<Vec<_>>());
    }
}
