use super::{MetricsError, Result};
use crate::autodiff::{Backward, Element, Tensor, TensorError};

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_WINDOW: usize = 2 * SSIM_RADIUS + 1;
pub const SSIM_SIGMA: f64 = 1.5;

/// Statistics window and stabilizing constants of SSIM for images with
/// dynamic range `dynamic_range` (1 for normalized RAW, 255 for 8-bit).
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    taps: [f64; SSIM_WINDOW],
    c1: f64,
    c2: f64,
    dynamic_range: f64,
}

impl SsimParams {
    pub fn new(dynamic_range: f64) -> Self {
        let mut taps = [0.0; SSIM_WINDOW];
        for (i, t) in taps.iter_mut().enumerate() {
            let d = i as f64 - SSIM_RADIUS as f64;
            *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        SsimParams { taps, c1: (0.01 * dynamic_range).powi(2), c2: (0.03 * dynamic_range).powi(2), dynamic_range }
    }

    pub fn raw() -> Self {
        Self::new(1.0)
    }

    pub fn srgb() -> Self {
        Self::new(255.0)
    }

    pub fn taps(&self) -> &[f64; SSIM_WINDOW] {
        &self.taps
    }

    /// The full 11x11 window, row-major.
    pub fn window(&self) -> Vec<f64> {
        self.taps.iter().flat_map(|a| self.taps.iter().map(move |b| a * b)).collect()
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn dynamic_range(&self) -> f64 {
        self.dynamic_range
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Gaussian filtering of one `w x h` plane with reflected borders.
fn filter(taps: &[f64], src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * row[reflect(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                taps.iter().enumerate().map(|(k, t)| t * tmp[reflect(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters every output back onto the taps that
/// produced it.
fn filter_adjoint(taps: &[f64], grad: &[f64], w: usize, h: usize) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            for (k, t) in taps.iter().enumerate() {
                tmp[reflect(y as isize + k as isize - r, h) * w + x] += t * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (k, t) in taps.iter().enumerate() {
                out[y * w + reflect(x as isize + k as isize - r, w)] += t * g;
            }
        }
    }
    out
}

/// Local statistics of one plane pair. Every expression is written so that
/// swapping `x` and `y` yields bit-identical values.
struct PlaneStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    s: Vec<f64>,
}

fn plane_stats(p: &SsimParams, x: &[f64], y: &[f64], w: usize, h: usize) -> PlaneStats {
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
    let mx = filter(&p.taps, x, w, h);
    let my = filter(&p.taps, y, w, h);
    let sxx = filter(&p.taps, &sq(x), w, h);
    let syy = filter(&p.taps, &sq(y), w, h);
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let sxy = filter(&p.taps, &xy, w, h);
    let n = w * h;
    let mut st = PlaneStats {
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
        s: vec![0.0; n],
        mx,
        my,
    };
    for i in 0..n {
        let (mx, my) = (st.mx[i], st.my[i]);
        let mxy = mx * my;
        let (mxx, myy) = (mx * mx, my * my);
        st.a1[i] = 2.0 * mxy + p.c1;
        st.a2[i] = 2.0 * (sxy[i] - mxy) + p.c2;
        st.b1[i] = (mxx + myy) + p.c1;
        st.b2[i] = ((sxx[i] - mxx) + (syy[i] - myy)) + p.c2;
        st.s[i] = (st.a1[i] * st.a2[i]) / (st.b1[i] * st.b2[i]);
    }
    st
}

fn check_plane(w: usize, h: usize) -> Result<()> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    Ok(())
}

/// Per-pixel SSIM of two `w x h` planes.
pub fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, params: &SsimParams) -> Result<Vec<f64>> {
    check_plane(w, h)?;
    if x.len() != w * h || y.len() != w * h {
        return Err(MetricsError::Length { expected: w * h, lhs: x.len(), rhs: y.len() });
    }
    Ok(plane_stats(params, x, y, w, h).s)
}

/// Mean SSIM over all pixels of two `w x h` planes.
pub fn mean_ssim(x: &[f64], y: &[f64], w: usize, h: usize, params: &SsimParams) -> Result<f64> {
    let s = ssim_plane(x, y, w, h, params)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

struct SsimOp {
    params: SsimParams,
    planes: usize,
    width: usize,
    height: usize,
}

impl SsimOp {
    /// Gradient of `sum(g * S)` with respect to the first argument of the
    /// statistics; the second-argument gradient follows by swapping.
    fn grad_first(&self, x: &[f64], y: &[f64], g: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let st = plane_stats(&self.params, x, y, w, h);
        let n = w * h;
        let (mut da, mut db, mut dc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let s = st.s[i];
            let (mx, my) = (st.mx[i], st.my[i]);
            da[i] = g[i]
                * s
                * (2.0 * my / st.a1[i] - 2.0 * mx / st.b1[i] - 2.0 * my / st.a2[i] + 2.0 * mx / st.b2[i]);
            db[i] = -g[i] * s / st.b2[i];
            dc[i] = g[i] * 2.0 * s / st.a2[i];
        }
        let ta = filter_adjoint(&self.params.taps, &da, w, h);
        let tb = filter_adjoint(&self.params.taps, &db, w, h);
        let tc = filter_adjoint(&self.params.taps, &dc, w, h);
        (0..n).map(|i| ta[i] + 2.0 * x[i] * tb[i] + y[i] * tc[i]).collect()
    }
}

impl<T: Element> Backward<T> for SsimOp {
    fn name(&self) -> &'static str {
        "ssim_map"
    }

    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let plane = self.width * self.height;
        let xd: Vec<f64> = parents[0].data().iter().map(|v| v.as_f64()).collect();
        let yd: Vec<f64> = parents[1].data().iter().map(|v| v.as_f64()).collect();
        let gd: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let side = |first: bool| {
            let mut out = Vec::with_capacity(xd.len());
            for p in 0..self.planes {
                let r = p * plane..(p + 1) * plane;
                let (a, b) = if first { (&xd[r.clone()], &yd[r.clone()]) } else { (&yd[r.clone()], &xd[r.clone()]) };
                out.extend(self.grad_first(a, b, &gd[r]).into_iter().map(T::of));
            }
            out
        };
        vec![parents[0].requires_grad().then(|| side(true)), parents[1].requires_grad().then(|| side(false))]
    }
}

/// Differentiable per-pixel SSIM of two NCHW tensors, computed per plane.
pub fn ssim_map<T: Element>(x: &Tensor<T>, y: &Tensor<T>, params: &SsimParams) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch { op: "ssim_map", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() }.into());
    }
    let (n, c, h, w) = x.nchw().ok_or_else(|| TensorError::InvalidShape {
        op: "ssim_map",
        reason: format!("expected rank 4, got {:?}", x.shape()),
    })?;
    check_plane(w, h)?;
    let plane = w * h;
    let xd: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let yd: Vec<f64> = y.data().iter().map(|v| v.as_f64()).collect();
    let mut out = Vec::with_capacity(xd.len());
    for p in 0..n * c {
        let r = p * plane..(p + 1) * plane;
        out.extend(plane_stats(params, &xd[r.clone()], &yd[r], w, h).s.into_iter().map(T::of));
    }
    let op = SsimOp { params: params.clone(), planes: n * c, width: w, height: h };
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone(), y.clone()], op)?)
}
