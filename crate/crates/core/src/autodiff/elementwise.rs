use super::{Backward, Element, Result, Tensor, TensorError};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

struct AddOp;

impl<T: Element> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        parents.iter().map(|p| p.requires_grad().then(|| grad.to_vec())).collect()
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Tensor::from_op(data, a.shape().to_vec(), vec![a.clone(), b.clone()], AddOp)
}

struct MulOp;

impl<T: Element> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let times = |other: &Tensor<T>| grad.iter().zip(other.data().iter()).map(|(&g, &o)| g * o).collect();
        vec![a.requires_grad().then(|| times(b)), b.requires_grad().then(|| times(a))]
    }
}

/// Element-wise product.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Tensor::from_op(data, a.shape().to_vec(), vec![a.clone(), b.clone()], MulOp)
}

struct ScaleOp<T>(T);

impl<T: Element> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

/// Multiplies every element by the constant `s`.
pub fn scale<T: Element>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| v * s).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], ScaleOp(s))
}

/// Unary ops whose derivative is a function of the output alone.
#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

impl<T: Element> Backward<T> for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
        }
    }
    fn backward(&self, _: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let one = T::one();
        let g = grad
            .iter()
            .zip(out)
            .map(|(&g, &y)| match self {
                Unary::Relu => {
                    if y > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }
                Unary::Sigmoid => g * y * (one - y),
                Unary::Tanh => g * (one - y * y),
            })
            .collect();
        vec![Some(g)]
    }
}

fn unary<T: Element>(x: &Tensor<T>, op: Unary, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], op)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, Unary::Relu, |v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, Unary::Sigmoid, |v| {
        // split on sign so exp never overflows
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn tanh<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, Unary::Tanh, |v| v.tanh())
}

struct ClampOp<T> {
    lo: T,
    hi: T,
}

impl<T: Element> Backward<T> for ClampOp<T> {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        let g = grad
            .iter()
            .zip(x.iter())
            .map(|(&g, &v)| if v >= self.lo && v <= self.hi { g } else { T::zero() })
            .collect();
        vec![Some(g)]
    }
}

/// Clamps into `[lo, hi]`; the gradient passes where the input was inside.
pub fn clamp<T: Element>(x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| v.max(lo).min(hi)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], ClampOp { lo, hi })
}

struct ConcatOp {
    n: usize,
    plane: usize,
    channels: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(parents.len());
        for (p, &c) in parents.iter().zip(&self.channels) {
            if p.requires_grad() {
                let mut g = Vec::with_capacity(self.n * c * self.plane);
                for b in 0..self.n {
                    let start = (b * total + offset) * self.plane;
                    g.extend_from_slice(&grad[start..start + c * self.plane]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .and_then(|t| t.nchw())
        .ok_or_else(|| TensorError::InvalidShape { op: "concat_channels", reason: "needs rank-4 inputs".into() })?;
    let (n, _, h, w) = first;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        match p.nchw() {
            Some((pn, c, ph, pw)) if (pn, ph, pw) == (n, h, w) => channels.push(c),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                })
            }
        }
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&channels) {
            let d = p.data();
            data.extend_from_slice(&d[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let parents = parts.iter().map(|&p| p.clone()).collect();
    Tensor::from_op(data, vec![n, total, h, w], parents, ConcatOp { n, plane, channels })
}

struct SliceOp {
    n: usize,
    plane: usize,
    total: usize,
    start: usize,
    len: usize,
}

impl<T: Element> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.n * self.total * self.plane];
        for b in 0..self.n {
            let dst = (b * self.total + self.start) * self.plane;
            let src = b * self.len * self.plane;
            g[dst..dst + self.len * self.plane].copy_from_slice(&grad[src..src + self.len * self.plane]);
        }
        vec![Some(g)]
    }
}

/// Channels `start..start + len` of an NCHW tensor.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x
        .nchw()
        .ok_or_else(|| TensorError::InvalidShape { op: "slice_channels", reason: "needs a rank-4 input".into() })?;
    if start + len > c || len == 0 {
        return Err(TensorError::InvalidShape {
            op: "slice_channels",
            reason: format!("channels {start}..{} out of 0..{c}", start + len),
        });
    }
    let plane = h * w;
    let d = x.data();
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let s = (b * c + start) * plane;
        data.extend_from_slice(&d[s..s + len * plane]);
    }
    drop(d);
    Tensor::from_op(data, vec![n, len, h, w], vec![x.clone()], SliceOp { n, plane, total: c, start, len })
}

struct ReduceOp<T> {
    factor: T,
}

impl<T: Element> Backward<T> for ReduceOp<T> {
    fn name(&self) -> &'static str {
        "reduce"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0] * self.factor; parents[0].numel()])]
    }
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum();
    Tensor::from_op(vec![s], Vec::new(), vec![x.clone()], ReduceOp { factor: T::one() }).expect("sum of finite values")
}

/// Mean of all elements, as a scalar tensor.
pub fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::of(x.numel() as f64);
    let s: T = x.data().iter().copied().sum();
    Tensor::from_op(vec![s / n], Vec::new(), vec![x.clone()], ReduceOp { factor: T::one() / n })
        .expect("mean of finite values")
}
