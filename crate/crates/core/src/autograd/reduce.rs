use super::Var;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Splits `shape` around `axis` into (outer, len, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph
            .record(Tensor::scalar(x.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().mul_scalar(n.recip())
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, len, inner) = split(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let out = Tensor::new(&reduced_shape(&shape, axis, keepdim), out);
        self.graph.record(out, &[self], move |g, _| {
            let gd = g.data();
            let mut data = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    data[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, data))]
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'g, T> {
        let n = self.shape()[axis];
        self.sum_axis(axis, keepdim)
            .mul_scalar(T::lit(n as f64).recip())
    }

    /// Numerically stable `log Σ exp` along `axis`.
    pub fn logsumexp(self, axis: usize, keepdim: bool) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, len, inner) = split(&shape, axis);
        let xd = x.data();
        let mut lse = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| xd[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                lse[o * inner + i] = m + s.ln();
            }
        }
        let out = Tensor::new(&reduced_shape(&shape, axis, keepdim), lse.clone());
        self.graph.record(out, &[self], move |g, _| {
            let gd = g.data();
            let mut data = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let k = (o * len + l) * inner + i;
                        data[k] = gd[o * inner + i] * (xd_at(&x, k) - lse[o * inner + i]).exp();
                    }
                }
            }
            vec![Some(Tensor::new(&shape, data))]
        })
    }

    pub fn softmax(self, axis: usize) -> Var<'g, T> {
        let lse = self.logsumexp(axis, true);
        (self - lse).exp()
    }

    pub fn log_softmax(self, axis: usize) -> Var<'g, T> {
        let lse = self.logsumexp(axis, true);
        self - lse
    }
}

#[inline]
fn xd_at<T: Scalar>(x: &Tensor<T>, k: usize) -> T {
    x.data()[k]
}
