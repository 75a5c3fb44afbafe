use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// `c (+)= op(a) · op(b)` where `a` is stored `m×k` (or `k×m` when `ta`) and
/// `b` is stored `k×n` (or `n×k` when `tb`), both row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(
        m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1,
    );
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Matrix product over the last two axes. Supports `[m,k]·[k,n]`,
    /// `[b,m,k]·[b,k,n]` and `[b,m,k]·[k,n]` (shared right operand).
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = sa[sa.len() - 1];
                let rows = numel(&sa[..sa.len() - 1]);
                assert_eq!(k, sb[0], "matmul: {sa:?} · {sb:?}");
                let n = sb[1];
                let mut out = vec![T::zero(); rows * n];
                gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, false);
                let mut oshape = sa[..sa.len() - 1].to_vec();
                oshape.push(n);
                self.graph
                    .record(Tensor::new(&oshape, out), &[self, other], move |g, needs| {
                        let gd = g.data();
                        let ga = needs[0].then(|| {
                            let mut d = vec![T::zero(); rows * k];
                            gemm(rows, n, k, gd, false, b.data(), true, &mut d, false);
                            Tensor::new(&sa, d)
                        });
                        let gb = needs[1].then(|| {
                            let mut d = vec![T::zero(); k * n];
                            gemm(k, rows, n, a.data(), true, gd, false, &mut d, false);
                            Tensor::new(&sb, d)
                        });
                        vec![ga, gb]
                    })
            }
            (3, 3) => {
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                assert!(sb[0] == bs && sb[1] == k, "bmm: {sa:?} · {sb:?}");
                let n = sb[2];
                let mut out = vec![T::zero(); bs * m * n];
                for i in 0..bs {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..],
                        false,
                        &b.data()[i * k * n..],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                self.graph.record(
                    Tensor::new(&[bs, m, n], out),
                    &[self, other],
                    move |g, needs| {
                        let gd = g.data();
                        let ga = needs[0].then(|| {
                            let mut d = vec![T::zero(); bs * m * k];
                            for i in 0..bs {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &gd[i * m * n..],
                                    false,
                                    &b.data()[i * k * n..],
                                    true,
                                    &mut d[i * m * k..(i + 1) * m * k],
                                    false,
                                );
                            }
                            Tensor::new(&sa, d)
                        });
                        let gb = needs[1].then(|| {
                            let mut d = vec![T::zero(); bs * k * n];
                            for i in 0..bs {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &a.data()[i * m * k..],
                                    true,
                                    &gd[i * m * n..],
                                    false,
                                    &mut d[i * k * n..(i + 1) * k * n],
                                    false,
                                );
                            }
                            Tensor::new(&sb, d)
                        });
                        vec![ga, gb]
                    },
                )
            }
            _ => panic!("matmul: unsupported shapes {sa:?} · {sb:?}"),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        assert_eq!(
            numel(shape),
            x.numel(),
            "reshape {old:?} -> {shape:?}"
        );
        let out = Tensor::new(shape, x.data().to_vec());
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(Tensor::new(&old, g.data().to_vec()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Var<'g, T> {
        let nd = self.shape().len();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.graph
            .record(Tensor::new(&oshape, data), &[self], move |g, _| {
                let mut d = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, d))]
            })
    }

    /// Gathers entries `ids` along axis 0 (rows may repeat).
    pub fn index_select(self, ids: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let inner = numel(&shape[1..]);
        let mut data = Vec::with_capacity(ids.len() * inner);
        for &i in ids {
            assert!(i < shape[0], "index_select: {i} >= {}", shape[0]);
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = ids.len();
        let ids = ids.to_vec();
        self.graph
            .record(Tensor::new(&oshape, data), &[self], move |g, _| {
                let mut d = vec![T::zero(); numel(&shape)];
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g.data()[r * inner..(r + 1) * inner];
                    for (a, &b) in d[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
                vec![Some(Tensor::new(&shape, d))]
            })
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let lens: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert!(
                    s.len() == first.len()
                        && s[..axis] == first[..axis]
                        && s[axis + 1..] == first[axis + 1..],
                    "concat: {s:?} vs {first:?}"
                );
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.record(Tensor::new(&oshape, data), parts, move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (i, &l) in lens.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + l * inner]);
                    }
                    grads.push(Some(Tensor::new(&shapes[i], d)));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            grads
        })
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        let reshaped: Vec<_> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect();
        self.concat(&reshaped, 0)
    }
}

pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permute rank");
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let istr = strides(shape);
    let pstr: Vec<usize> = perm.iter().map(|&p| istr[p]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let nd = oshape.len();
    if nd == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let xd = x.data();
    for _ in 0..total {
        out.push(xd[off]);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += pstr[d];
            if idx[d] < oshape[d] {
                break;
            }
            off -= pstr[d] * oshape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&oshape, out)
}
