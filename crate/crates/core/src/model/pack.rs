use crate::autodiff::{Backward, Element, Result, Tensor, TensorError};
use crate::raw::CfaPattern;

struct PackOp {
    offsets: [(usize, usize); 4],
    n: usize,
    height: usize,
    width: usize,
}

impl PackOp {
    /// For every packed element, the index of its mosaic source.
    fn source_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let (ph, pw) = (self.height / 2, self.width / 2);
        (0..self.n).flat_map(move |b| {
            self.offsets.iter().flat_map(move |&(dx, dy)| {
                (0..ph).flat_map(move |i| (0..pw).map(move |j| (b * self.height + 2 * i + dy) * self.width + 2 * j + dx))
            })
        })
    }
}

impl<T: Element> Backward<T> for PackOp {
    fn name(&self) -> &'static str {
        "pack_mosaic"
    }

    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.n * self.height * self.width];
        for (src, &v) in self.source_indices().zip(grad) {
            g[src] = v;
        }
        vec![Some(g)]
    }
}

/// Rearranges N x 1 x H x W mosaics into N x 4 x H/2 x W/2 planes ordered
/// (R, G0, B, G1) for the given CFA.
pub fn pack_mosaic<T: Element>(x: &Tensor<T>, cfa: CfaPattern) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw().unwrap_or((0, 0, 0, 0));
    if c != 1 || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(TensorError::InvalidShape {
            op: "pack_mosaic",
            reason: format!("expected N x 1 x H x W with even H and W, got {:?}", x.shape()),
        });
    }
    let op = PackOp { offsets: cfa.role_offsets(), n, height: h, width: w };
    let out: Vec<T> = {
        let xd = x.data();
        op.source_indices().map(|i| xd[i]).collect()
    };
    Tensor::from_op(out, vec![n, 4, h / 2, w / 2], vec![x.clone()], op)
}
