use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Numpy-style broadcast of two shapes, `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` viewed at `out` shape; broadcast axes get stride 0.
fn view_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(input);
    let off = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < off || input[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every output position with the matching offsets into both inputs.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // Advance the odometer over the outer axes.
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary_map<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Option<Tensor<T>> {
    if a.shape() == b.shape() {
        return Some(a.zip_map(b, f));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    if b.numel() == 1 && out.as_slice() == a.shape() {
        let bv = bd[0];
        return Some(a.map(|v| f(v, bv)));
    }
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Some(Tensor::new(&out, data))
}

/// Applies `f(grad, a, b)` elementwise at the broadcast shape of `a` and `b`
/// and reduces the result back onto `target` (either `a`'s or `b`'s shape).
pub(crate) fn binary_grad<T: Scalar>(
    grad: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    target: &[usize],
    f: impl Fn(T, T, T) -> T,
) -> Tensor<T> {
    let out = grad.shape();
    if a.shape() == out && b.shape() == out {
        let data = grad
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&g, (&x, &y))| f(g, x, y))
            .collect();
        return Tensor::new(out, data);
    }
    let sa = view_strides(a.shape(), out);
    let sb = view_strides(b.shape(), out);
    let (gd, ad, bd) = (grad.data(), a.data(), b.data());
    let mut full = vec![T::zero(); numel(out)];
    for_each_pair(out, &sa, &sb, |o, ia, ib| full[o] = f(gd[o], ad[ia], bd[ib]));
    sum_to_shape(&Tensor::new(out, full), target)
}

/// Sums `grad` over the axes that were broadcast from `target`.
pub(crate) fn sum_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out = grad.shape();
    let st = view_strides(target, out);
    let mut acc = vec![T::zero(); numel(target)];
    let gd = grad.data();
    for_each_pair(out, &st, &st, |o, it, _| acc[it] = acc[it] + gd[o]);
    Tensor::new(target, acc)
}
