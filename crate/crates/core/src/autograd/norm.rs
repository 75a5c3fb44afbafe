use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch statistics (biased variance) of an `[N, C, ...]` tensor.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch norm needs [N, C, ...], got {shape:?}");
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Normalises each channel with statistics over batch and spatial axes.
    pub fn batch_norm_train(self, eps: f64) -> (Var<'g, T>, BatchStats<T>) {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (n, c, inner) = layout(&shape);
        let count = T::lit((n * inner) as f64);
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + xd[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for b in 0..n {
                for &val in &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    v = v + (val - m) * (val - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for (o, &v) in out[r.clone()].iter_mut().zip(&xd[r]) {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let xhat = std::rc::Rc::new(Tensor::new(&shape, out));
        let saved = xhat.clone();
        let var_out = self.graph.record(xhat, &[self], move |g, _| {
            let gd = g.data();
            let hd = saved.data();
            let mut d = vec![T::zero(); gd.len()];
            for ch in 0..c {
                let mut sg = T::zero();
                let mut sgh = T::zero();
                for b in 0..n {
                    let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                    for (&gv, &hv) in gd[r.clone()].iter().zip(&hd[r]) {
                        sg = sg + gv;
                        sgh = sgh + gv * hv;
                    }
                }
                let (mg, mgh) = (sg / count, sgh / count);
                for b in 0..n {
                    let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                    for ((dv, &gv), &hv) in d[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&hd[r]) {
                        *dv = (gv - mg - hv * mgh) * inv_std[ch];
                    }
                }
            }
            vec![Some(Tensor::new(&shape, d))]
        });
        (var_out, BatchStats { mean, var })
    }

    /// `x * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine_const(self, scale: &[T], shift: &[T]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (n, c, inner) = layout(&shape);
        assert!(scale.len() == c && shift.len() == c, "channel_affine_const arity");
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for (o, &v) in out[r.clone()].iter_mut().zip(&x.data()[r]) {
                    *o = v * scale[ch] + shift[ch];
                }
            }
        }
        let scale = scale.to_vec();
        self.graph
            .record(Tensor::new(&shape, out), &[self], move |g, _| {
                let mut d = g.data().to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        d[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                            .iter_mut()
                            .for_each(|v| *v = *v * scale[ch]);
                    }
                }
                vec![Some(Tensor::new(&shape, d))]
            })
    }
}
