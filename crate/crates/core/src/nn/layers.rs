use rand::Rng;

use super::{he_normal, xavier, BufferId, Ctx, Mode, ParamId, ParamStore};
use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// `y = x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier(&[in_dim, out_dim], in_dim, out_dim, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(ctx.p(self.weight));
        match self.bias {
            Some(b) => y + ctx.p(b),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[co, ci, k, k], ci * k * k, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[co])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(
            ctx.p(self.weight),
            self.bias.map(|b| ctx.p(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Divides `weight` by its largest singular value, estimated with one step of
/// power iteration per training pass. The left singular vector persists in a
/// buffer.
fn spectral_weight<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    weight: ParamId,
    u_buf: BufferId,
) -> Var<'g, T> {
    let w = ctx.store.get(weight);
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let wd = w.data();
    let mut u = ctx.store.buffer(u_buf).into_data();
    let normalize = |v: &mut Vec<T>| {
        let n = v.iter().map(|&x| x * x).sum::<T>().sqrt() + T::lit(1e-12);
        v.iter_mut().for_each(|x| *x = *x / n);
    };
    let wt_u = |u: &[T]| -> Vec<T> {
        let mut v = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                v[c] = v[c] + wd[r * cols + c] * u[r];
            }
        }
        v
    };
    let mut v = wt_u(&u);
    normalize(&mut v);
    if ctx.mode == Mode::Train {
        let mut nu = vec![T::zero(); rows];
        for r in 0..rows {
            nu[r] = (0..cols).map(|c| wd[r * cols + c] * v[c]).sum();
        }
        normalize(&mut nu);
        u = nu;
        ctx.store.set_buffer(u_buf, Tensor::new(&[rows], u.clone()));
        v = wt_u(&u);
        normalize(&mut v);
    }
    let wv = ctx.p(weight);
    let sigma = ctx
        .g
        .constant(Tensor::new(&[1, rows], u))
        .matmul(wv.reshape(&[rows, cols]).matmul(ctx.g.constant(Tensor::new(&[cols, 1], v))));
    wv / sigma
}

fn init_u<T: Scalar, R: Rng>(rows: usize, rng: &mut R) -> Tensor<T> {
    let t: Tensor<T> = Tensor::randn(&[rows], 1.0, rng);
    let n = t.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    t.map(|x| x / n)
}

/// Spectrally normalised convolution.
#[derive(Clone, Debug)]
pub struct SnConv2d {
    pub conv: Conv2d,
    pub u: BufferId,
}

impl SnConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, name, ci, co, k, stride, pad, rng);
        let u = store.add_buffer(format!("{name}.sn_u"), init_u(co, rng));
        SnConv2d { conv, u }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = spectral_weight(ctx, self.conv.weight, self.u);
        x.conv2d(
            w,
            self.conv.bias.map(|b| ctx.p(b)),
            self.conv.stride,
            self.conv.pad,
        )
    }
}

/// Spectrally normalised linear map.
#[derive(Clone, Debug)]
pub struct SnLinear {
    pub linear: Linear,
    pub u: BufferId,
}

impl SnLinear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(store, name, in_dim, out_dim, bias, rng);
        let u = store.add_buffer(format!("{name}.sn_u"), init_u(in_dim, rng));
        SnLinear { linear, u }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(spectral_weight(ctx, self.linear.weight, self.u));
        match self.linear.bias {
            Some(b) => y + ctx.p(b),
            None => y,
        }
    }

    /// The normalised weight matrix `[in, out]` itself.
    pub fn weight<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>) -> Var<'g, T> {
        spectral_weight(ctx, self.linear.weight, self.u)
    }
}

/// Batch normalisation over `[N, C, ...]` with optional learned affine.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))),
                Some(store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))),
            )
        } else {
            (None, None)
        };
        BatchNorm2d {
            gamma,
            beta,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    /// Normalisation without the affine part.
    pub fn normalize<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        if ctx.mode.batch_stats() {
            let shape = x.shape();
            let (y, stats) = x.batch_norm_train(BN_EPS);
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let m = T::lit(BN_MOMENTUM);
            let rm = ctx.store.buffer(self.running_mean);
            let rv = ctx.store.buffer(self.running_var);
            let nm: Vec<T> = rm
                .data()
                .iter()
                .zip(&stats.mean)
                .map(|(&r, &b)| (T::one() - m) * r + m * b)
                .collect();
            let nv: Vec<T> = rv
                .data()
                .iter()
                .zip(&stats.var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                .collect();
            ctx.store
                .set_buffer(self.running_mean, Tensor::new(&[self.channels], nm));
            ctx.store
                .set_buffer(self.running_var, Tensor::new(&[self.channels], nv));
            y
        } else {
            let rm = ctx.store.buffer(self.running_mean);
            let rv = ctx.store.buffer(self.running_var);
            let scale: Vec<T> = rv
                .data()
                .iter()
                .map(|&v| (v + T::lit(BN_EPS)).sqrt().recip())
                .collect();
            let shift: Vec<T> = rm
                .data()
                .iter()
                .zip(&scale)
                .map(|(&m, &s)| -m * s)
                .collect();
            x.channel_affine_const(&scale, &shift)
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let nd = x.shape().len();
        let y = self.normalize(ctx, x);
        match (self.gamma, self.beta) {
            (Some(gm), Some(bt)) => {
                let mut s = vec![1, self.channels];
                s.extend(std::iter::repeat_n(1, nd - 2));
                y * ctx.p(gm).reshape(&s) + ctx.p(bt).reshape(&s)
            }
            _ => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[vocab, dim], 0.1, rng));
        Embedding { table, vocab, dim }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, ids: &[usize]) -> Var<'g, T> {
        ctx.p(self.table).index_select(ids)
    }
}

/// Single-direction gated recurrent unit.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        Gru {
            w_ih: store.add(
                format!("{name}.w_ih"),
                Tensor::uniform(&[input, 3 * hidden], -a, a, rng),
            ),
            w_hh: store.add(
                format!("{name}.w_hh"),
                Tensor::uniform(&[hidden, 3 * hidden], -a, a, rng),
            ),
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros(&[3 * hidden])),
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros(&[3 * hidden])),
            hidden,
        }
    }

    /// Runs over `x: [B, T, in]`. `mask[b][t]` selects valid steps; invalid
    /// steps carry the previous state through and emit zeros. Returns one
    /// `[B, hidden]` output per time step in input order.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        x: Var<'g, T>,
        mask: &[Vec<bool>],
        reverse: bool,
    ) -> Vec<Var<'g, T>> {
        let s = x.shape();
        let (b, steps, input) = (s[0], s[1], s[2]);
        let h3 = 3 * self.hidden;
        let hd = self.hidden;
        let gi_all = (x.reshape(&[b * steps, input]).matmul(ctx.p(self.w_ih)) + ctx.p(self.b_ih))
            .reshape(&[b, steps, h3]);
        let w_hh = ctx.p(self.w_hh);
        let b_hh = ctx.p(self.b_hh);
        let mut h = ctx.g.constant(Tensor::zeros(&[b, hd]));
        let mut outputs: Vec<Option<Var<'g, T>>> = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let m: Vec<T> = mask
                .iter()
                .map(|row| if row[t] { T::one() } else { T::zero() })
                .collect();
            let m = ctx.g.constant(Tensor::new(&[b, 1], m));
            let gi = gi_all.narrow(1, t, 1).reshape(&[b, h3]);
            let gh = h.matmul(w_hh) + b_hh;
            let r = (gi.narrow(1, 0, hd) + gh.narrow(1, 0, hd)).sigmoid();
            let z = (gi.narrow(1, hd, hd) + gh.narrow(1, hd, hd)).sigmoid();
            let n = (gi.narrow(1, 2 * hd, hd) + r * gh.narrow(1, 2 * hd, hd)).tanh();
            let one = ctx.g.constant(Tensor::scalar(T::one()));
            let cand = (one - z) * n + z * h;
            let inv = ctx.g.constant(Tensor::scalar(T::one())) - m;
            h = m * cand + inv * h;
            outputs[t] = Some(m * h);
        }
        outputs.into_iter().map(|o| o.expect("every step visited")).collect()
    }
}
