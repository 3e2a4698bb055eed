//! 2-D convolution (cross-correlation) and its transpose, lowered to GEMM
//! through im2col. Work is split per batch item; weight gradients are
//! reduced over the batch in index order so results do not depend on
//! scheduling.

use super::{Backward, Element, Result, Tensor, TensorError};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns on the bottom/right of a transposed convolution's
    /// output. Ignored by `conv2d`.
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding, output_padding: 0 }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

/// `floor((input + 2 pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = input + 2 * spec.padding;
    if spec.stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

/// `(input - 1) stride - 2 pad + kernel + output_padding`.
pub fn conv_transpose_output_extent(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    if input == 0 || spec.stride == 0 {
        return None;
    }
    let full = (input - 1) * spec.stride + kernel + spec.output_padding;
    full.checked_sub(2 * spec.padding).filter(|&e| e > 0)
}

/// Geometry of one im2col lowering: a `channels x height x width` image
/// sampled at `out_h x out_w` window positions.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    #[inline]
    fn x_range(&self, kj: usize) -> (usize, usize) {
        // need 0 <= ox * s + kj - pad < width
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(self.stride) };
        let hi = if self.width + self.pad > kj {
            ((self.width + self.pad - kj - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Element>(&self, img: &[T], col: &mut [T]) {
        let p = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = self.x_range(kj);
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if self.stride == 1 {
                            let ix0 = lo + kj - self.pad;
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[(ox + lo) * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters `col` back, adding into `img`.
    fn col2im<T: Element>(&self, col: &[T], img: &mut [T]) {
        let p = self.cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.x_range(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in lo..hi {
                            let ix = ox * self.stride + kj - self.pad;
                            dst[ix] = dst[ix] + line[ox];
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 only: calls `f(weight column, input offset, output offset,
    /// len)` for every contiguous run where a kernel tap meets the image.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        debug_assert_eq!(self.stride, 1);
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let col = (c * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.x_range(kj);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let input = c * plane + iy as usize * self.width + lo + kj - self.pad;
                        f(col, input, oy * self.out_w + lo, hi - lo);
                    }
                }
            }
        }
    }

    /// Direct stride-1 convolution for few output channels, where a GEMM
    /// would be a memory-bound matrix-vector product over a huge im2col.
    fn direct_forward<T: Element>(&self, w: &[T], outs: usize, img: &[T], out: &mut [T]) {
        let (k, p) = (self.rows(), self.cols());
        self.for_each_run(|col, i, o, len| {
            for oc in 0..outs {
                let wv = w[oc * k + col];
                let dst = &mut out[oc * p + o..oc * p + o + len];
                dst.iter_mut().zip(&img[i..i + len]).for_each(|(d, &v)| *d = *d + wv * v);
            }
        });
    }

    fn direct_input_grad<T: Element>(&self, w: &[T], outs: usize, grad: &[T], gx: &mut [T]) {
        let (k, p) = (self.rows(), self.cols());
        self.for_each_run(|col, i, o, len| {
            for oc in 0..outs {
                let wv = w[oc * k + col];
                let src = &grad[oc * p + o..oc * p + o + len];
                gx[i..i + len].iter_mut().zip(src).for_each(|(d, &g)| *d = *d + wv * g);
            }
        });
    }

    fn direct_weight_grad<T: Element>(&self, outs: usize, img: &[T], grad: &[T], gw: &mut [T]) {
        let (k, p) = (self.rows(), self.cols());
        self.for_each_run(|col, i, o, len| {
            for oc in 0..outs {
                let src = &grad[oc * p + o..oc * p + o + len];
                let dot: T = src.iter().zip(&img[i..i + len]).map(|(&g, &v)| g * v).sum();
                gw[oc * k + col] = gw[oc * k + col] + dot;
            }
        });
    }

    /// im2col into a fresh buffer, or a borrowed view when the lowering is
    /// the identity (1x1, stride 1, no padding).
    fn lower<'a, T: Element>(&self, img: &'a [T], scratch: &'a mut Vec<T>) -> &'a [T] {
        if self.is_identity() {
            img
        } else {
            scratch.resize(self.rows() * self.cols(), T::zero());
            self.im2col(img, scratch);
            scratch
        }
    }
}

fn sum_partials<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
    }
    total
}

/// Per-output-channel sum of an (N, C, P) gradient, reduced in index order.
fn bias_grad<T: Element>(grad: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in g.iter_mut().enumerate() {
            let s: T = grad[(b * c + ch) * p..(b * c + ch + 1) * p].iter().copied().sum();
            *acc = *acc + s;
        }
    }
    g
}

fn shape_err(op: &'static str, reason: String) -> TensorError {
    TensorError::InvalidShape { op, reason }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch { op, lhs: vec![channels], rhs: b.shape().to_vec() });
        }
    }
    Ok(())
}

/// Below this many output channels stride-1 convolutions skip im2col.
const DIRECT_MAX_OUT: usize = 4;

struct Conv2dOp {
    n: usize,
    out_channels: usize,
    lowering: Lowering,
    direct: bool,
}

impl<T: Element> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&parents[0], &parents[1]);
        let l = self.lowering;
        let (o, k, p) = (self.out_channels, l.rows(), l.cols());
        let in_len = l.channels * l.height * l.width;
        let (xg, wg) = (x.data(), w.data());
        let (xd, wd): (&[T], &[T]) = (&xg, &wg);

        let grad_w = w.requires_grad().then(|| {
            let partials = parallel::map_indexed(self.n, |b| {
                let (x_b, g_b) = (&xd[b * in_len..(b + 1) * in_len], &grad[b * o * p..(b + 1) * o * p]);
                let mut gw = vec![T::zero(); o * k];
                if self.direct {
                    l.direct_weight_grad(o, x_b, g_b, &mut gw);
                } else {
                    let mut scratch = Vec::new();
                    let col = l.lower(x_b, &mut scratch);
                    T::gemm(o, p, k, T::one(), g_b, p as isize, 1, col, 1, p as isize, T::zero(), &mut gw, k as isize, 1);
                }
                gw
            });
            sum_partials(partials, o * k)
        });

        let grad_x = x.requires_grad().then(|| {
            let mut gx = vec![T::zero(); self.n * in_len];
            parallel::for_each_chunk_mut(&mut gx, in_len, |b, gx_b| {
                let g_b = &grad[b * o * p..(b + 1) * o * p];
                if self.direct {
                    l.direct_input_grad(wd, o, g_b, gx_b);
                } else if l.is_identity() {
                    T::gemm(k, o, p, T::one(), wd, 1, k as isize, g_b, p as isize, 1, T::zero(), gx_b, p as isize, 1);
                } else {
                    let mut col = vec![T::zero(); k * p];
                    T::gemm(k, o, p, T::one(), wd, 1, k as isize, g_b, p as isize, 1, T::zero(), &mut col, p as isize, 1);
                    l.col2im(&col, gx_b);
                }
            });
            gx
        });

        let mut out = vec![grad_x, grad_w];
        if let Some(bias) = parents.get(2) {
            out.push(bias.requires_grad().then(|| bias_grad(grad, self.n, o, p)));
        }
        out
    }
}

/// Cross-correlation of `x` (N, C, H, W) with `w` (O, C, kh, kw) plus an
/// optional per-channel `bias` (O), with zero padding.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (n, c, h, wd) = x.nchw().ok_or_else(|| shape_err(OP, format!("input must be rank 4, got {:?}", x.shape())))?;
    let (o, wc, kh, kw) = w.nchw().ok_or_else(|| shape_err(OP, format!("weight must be rank 4, got {:?}", w.shape())))?;
    if wc != c {
        return Err(TensorError::ShapeMismatch { op: OP, lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
    }
    check_bias(OP, bias, o)?;
    let (oh, ow) = match (conv_output_extent(h, kh, spec), conv_output_extent(wd, kw, spec)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err(OP, format!("kernel {kh}x{kw} does not fit input {:?} with {spec:?}", x.shape()))),
    };
    let l = Lowering { channels: c, height: h, width: wd, kh, kw, stride: spec.stride, pad: spec.padding, out_h: oh, out_w: ow };
    let (k, p) = (l.rows(), l.cols());
    let in_len = c * h * wd;
    let direct = spec.stride == 1 && o < DIRECT_MAX_OUT && !l.is_identity();
    let mut out = vec![T::zero(); n * o * p];
    {
        let (xg, wg) = (x.data(), w.data());
        let (xd, wdat): (&[T], &[T]) = (&xg, &wg);
        let bg = bias.map(|b| b.data());
        let bd: Option<&[T]> = bg.as_deref().map(|v| v.as_slice());
        parallel::for_each_chunk_mut(&mut out, o * p, |b, out_b| {
            let x_b = &xd[b * in_len..(b + 1) * in_len];
            if direct {
                l.direct_forward(wdat, o, x_b, out_b);
            } else {
                let mut scratch = Vec::new();
                let col = l.lower(x_b, &mut scratch);
                T::gemm(o, k, p, T::one(), wdat, k as isize, 1, col, p as isize, 1, T::zero(), out_b, p as isize, 1);
            }
            if let Some(bd) = bd {
                for (row, &bv) in out_b.chunks_exact_mut(p).zip(bd.iter()) {
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    }
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    Tensor::from_op(out, vec![n, o, oh, ow], parents, Conv2dOp { n, out_channels: o, lowering: l, direct })
}

struct ConvTransposeOp {
    n: usize,
    in_channels: usize,
    /// Lowering of the *output* image onto the input grid.
    lowering: Lowering,
}

impl<T: Element> Backward<T> for ConvTransposeOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&parents[0], &parents[1]);
        let l = self.lowering;
        let (ci, k, p) = (self.in_channels, l.rows(), l.cols());
        let out_len = l.channels * l.height * l.width;
        let (xg, wg) = (x.data(), w.data());
        let (xd, wd): (&[T], &[T]) = (&xg, &wg);

        // im2col of each item's output gradient: (Cout kk) x (H W)
        let lowered: Vec<Vec<T>> = parallel::map_indexed(self.n, |b| {
            let mut col = vec![T::zero(); k * p];
            l.im2col(&grad[b * out_len..(b + 1) * out_len], &mut col);
            col
        });

        let grad_x = x.requires_grad().then(|| {
            let mut gx = vec![T::zero(); self.n * ci * p];
            parallel::for_each_chunk_mut(&mut gx, ci * p, |b, gx_b| {
                T::gemm(ci, k, p, T::one(), wd, k as isize, 1, &lowered[b], p as isize, 1, T::zero(), gx_b, p as isize, 1);
            });
            gx
        });

        let grad_w = w.requires_grad().then(|| {
            let partials = parallel::map_indexed(self.n, |b| {
                let mut gw = vec![T::zero(); ci * k];
                let x_b = &xd[b * ci * p..(b + 1) * ci * p];
                T::gemm(ci, p, k, T::one(), x_b, p as isize, 1, &lowered[b], 1, p as isize, T::zero(), &mut gw, k as isize, 1);
                gw
            });
            sum_partials(partials, ci * k)
        });

        let mut out = vec![grad_x, grad_w];
        if let Some(bias) = parents.get(2) {
            out.push(bias.requires_grad().then(|| bias_grad(grad, self.n, l.channels, l.height * l.width)));
        }
        out
    }
}

/// Transposed convolution of `x` (N, Cin, H, W) with `w` (Cin, Cout, kh,
/// kw). Its forward pass is the input-gradient of [`conv2d`] with the same
/// weights.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let (n, ci, h, wd) = x.nchw().ok_or_else(|| shape_err(OP, format!("input must be rank 4, got {:?}", x.shape())))?;
    let (wci, co, kh, kw) = w.nchw().ok_or_else(|| shape_err(OP, format!("weight must be rank 4, got {:?}", w.shape())))?;
    if wci != ci {
        return Err(TensorError::ShapeMismatch { op: OP, lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
    }
    check_bias(OP, bias, co)?;
    if spec.output_padding >= spec.stride {
        return Err(shape_err(OP, format!("output padding {} must be below stride {}", spec.output_padding, spec.stride)));
    }
    let (oh, ow) = match (conv_transpose_output_extent(h, kh, spec), conv_transpose_output_extent(wd, kw, spec)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err(OP, format!("no valid output for input {:?} with {spec:?}", x.shape()))),
    };
    let l = Lowering { channels: co, height: oh, width: ow, kh, kw, stride: spec.stride, pad: spec.padding, out_h: h, out_w: wd };
    debug_assert_eq!(conv_output_extent(oh, kh, spec), Some(h));
    let (k, p) = (l.rows(), l.cols());
    let out_len = co * oh * ow;
    let mut out = vec![T::zero(); n * out_len];
    {
        let (xg, wg) = (x.data(), w.data());
        let (xd, wdat): (&[T], &[T]) = (&xg, &wg);
        let bg = bias.map(|b| b.data());
        let bd: Option<&[T]> = bg.as_deref().map(|v| v.as_slice());
        parallel::for_each_chunk_mut(&mut out, out_len, |b, out_b| {
            let mut col = vec![T::zero(); k * p];
            let x_b = &xd[b * ci * p..(b + 1) * ci * p];
            T::gemm(k, ci, p, T::one(), wdat, 1, k as isize, x_b, p as isize, 1, T::zero(), &mut col, p as isize, 1);
            l.col2im(&col, out_b);
            if let Some(bd) = bd {
                for (plane, &bv) in out_b.chunks_exact_mut(oh * ow).zip(bd.iter()) {
                    plane.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    }
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    Tensor::from_op(out, vec![n, co, oh, ow], parents, ConvTransposeOp { n, in_channels: ci, lowering: l })
}

#[cfg(test)]
mod tests {
    use super::super::test_util::{max_rel_error, random};
    use super::super::{mul, sum};
    use super::*;

    /// Direct nested-loop cross-correlation, the reference for the GEMM path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = x.nchw().unwrap();
        let (o, _, kh, kw) = w.nchw().unwrap();
        let oh = (h + 2 * pad - kh) / s + 1;
        let ow = (wd + 2 * pad - kw) / s + 1;
        let (xd, wdat) = (x.data(), w.data());
        let mut out = vec![0.0; n * o * oh * ow];
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - pad as isize;
                                    let ix = (ox * s + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += xd[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * wdat[((oc * c + ic) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        // one output channel takes the direct path, five the GEMM path
        for (s, pad, k, o) in [(1, 0, 3, 5), (1, 1, 3, 1), (1, 1, 3, 5), (2, 1, 3, 5), (1, 3, 7, 1), (1, 3, 7, 5), (2, 0, 1, 1), (1, 0, 1, 1), (2, 2, 5, 5)] {
            let x = random(&[2, 3, 9, 8], 1, -1.0, 1.0, false);
            let w = random(&[o, 3, k, k], 2, -1.0, 1.0, false);
            let b = random(&[o], 3, -1.0, 1.0, false);
            let got = conv2d(&x, &w, Some(&b), ConvSpec::new(s, pad)).unwrap();
            let want = naive_conv(&x, &w, &b.to_vec(), s, pad);
            for (g, e) in got.data().iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "s={s} p={pad} k={k}");
            }
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random(&[1, 1, 5, 6], 4, -1.0, 1.0, false);
        let w = Tensor::new(vec![1.0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &w, None, ConvSpec::new(1, 0)).unwrap().to_vec(), x.to_vec());
        assert_eq!(conv_transpose2d(&x, &w, None, ConvSpec::new(1, 0)).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn output_extents() {
        let x = Tensor::<f32>::zeros(&[1, 2, 128, 128]);
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, ConvSpec::new(2, 1)).unwrap().shape(), &[1, 3, 64, 64]);
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let wt = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let spec = ConvSpec::new(2, 1).with_output_padding(1);
        assert_eq!(conv_transpose2d(&x, &wt, None, spec).unwrap().shape(), &[1, 2, 64, 64]);
        assert_eq!(conv_output_extent(4, 7, ConvSpec::new(1, 0)), None);
        assert!(matches!(
            conv2d(&Tensor::<f32>::zeros(&[1, 2, 8, 8]), &Tensor::zeros(&[1, 3, 3, 3]), None, ConvSpec::new(1, 1)),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(conv_transpose2d(&x, &wt, None, ConvSpec::new(2, 1).with_output_padding(2)).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let s = rng.random_range(1..=2);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let pad = rng.random_range(0..=k / 2);
            let h = rng.random_range(k..k + 7);
            // same remainder in both axes so one output padding fits both
            let wd = h + s * rng.random_range(0..3);
            let x = random(&[2, 3, h, wd], trial, -1.0, 1.0, false);
            let w = random(&[4, 3, k, k], trial + 100, -1.0, 1.0, false);
            let cx = conv2d(&x, &w, None, ConvSpec::new(s, pad)).unwrap();
            let (_, _, oh, ow) = cx.nchw().unwrap();
            // output padding recovers the rows the strided conv dropped
            let op = (h + 2 * pad - k) % s;
            let y = random(&[2, 4, oh, ow], trial + 200, -1.0, 1.0, false);
            let ty = conv_transpose2d(&y, &w, None, ConvSpec::new(s, pad).with_output_padding(op)).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs: f64 = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data().iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "trial {trial}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients() {
        for (o, spec) in [1, 6].into_iter().flat_map(|o| [ConvSpec::new(1, 1), ConvSpec::new(2, 1), ConvSpec::new(1, 0)].map(|s| (o, s))) {
            let x = random(&[2, 2, 6, 6], 20, -1.0, 1.0, true);
            let w = random(&[o, 2, 3, 3], 21, -1.0, 1.0, true);
            let b = random(&[o], 22, -1.0, 1.0, true);
            let probe = {
                let out = conv2d(&x, &w, Some(&b), spec).unwrap();
                random(out.shape(), 23, -1.0, 1.0, false)
            };
            let err = max_rel_error(&[x.clone(), w.clone(), b.clone()], 60, 1, |t| {
                sum(&mul(&conv2d(&t[0], &t[1], Some(&t[2]), spec).unwrap(), &probe).unwrap())
            });
            assert!(err < 1e-4, "{o} {spec:?}: {err}");
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        let x = random(&[2, 3, 4, 4], 30, -1.0, 1.0, true);
        let w = random(&[3, 2, 3, 3], 31, -1.0, 1.0, true);
        let b = random(&[2], 32, -1.0, 1.0, true);
        for spec in [ConvSpec::new(2, 1).with_output_padding(1), ConvSpec::new(1, 1), ConvSpec::new(2, 0)] {
            let probe = {
                let out = conv_transpose2d(&x, &w, Some(&b), spec).unwrap();
                random(out.shape(), 33, -1.0, 1.0, false)
            };
            let err = max_rel_error(&[x.clone(), w.clone(), b.clone()], 60, 2, |t| {
                sum(&mul(&conv_transpose2d(&t[0], &t[1], Some(&t[2]), spec).unwrap(), &probe).unwrap())
            });
            assert!(err < 1e-4, "{spec:?}: {err}");
        }
    }
}
