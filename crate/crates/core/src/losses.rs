//! Adversarial, matching and reconstruction objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{DtcError, Result};
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub damsm: f64,
    pub mmrfm: f64,
    pub perceptual: f64,
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
            damsm: 1.0,
            mmrfm: 1.0,
            perceptual: 1.0,
            pixel: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.damsm, self.mmrfm, self.perceptual, self.pixel];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DtcError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamsmConfig {
    /// Word-to-location attention sharpness.
    pub gamma1: f64,
    /// Word aggregation sharpness.
    pub gamma2: f64,
    /// Batch softmax temperature.
    pub gamma3: f64,
}

impl Default for DamsmConfig {
    fn default() -> Self {
        DamsmConfig {
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
        }
    }
}

impl DamsmConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.gamma1, self.gamma2, self.gamma3].iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(DtcError::Config("DAMSM gammas must be positive".into()));
        }
        Ok(())
    }
}

fn one<'g, T: Scalar>(v: Var<'g, T>) -> Var<'g, T> {
    v.graph().constant(Tensor::scalar(T::one()))
}

/// Mean over each image's regions, then over images. `counts[b]` regions
/// belong to image `b`, laid out image-major in `v: [N]`.
pub fn region_mean<'g, T: Scalar>(v: Var<'g, T>, counts: &[usize]) -> Result<Var<'g, T>> {
    let n: usize = counts.iter().sum();
    if v.shape() != [n] {
        return Err(DtcError::Shape(format!("{:?} scores for {n} regions", v.shape())));
    }
    if n == 0 || counts.contains(&0) {
        return Err(DtcError::InvalidInput("every image needs at least one region".into()));
    }
    let b = counts.len() as f64;
    let w: Vec<T> = counts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(T::lit(1.0 / (c as f64 * b)), c))
        .collect();
    Ok((v * v.graph().constant(Tensor::new(&[n], w))).sum())
}

/// `mean(max(0, 1 − s_real)) + mean(max(0, 1 + s_fake))`.
pub fn d_hinge_image<'g, T: Scalar>(s_real: Var<'g, T>, s_fake: Var<'g, T>) -> Result<Var<'g, T>> {
    if s_real.value().numel() == 0 || s_fake.value().numel() == 0 {
        return Err(DtcError::InvalidInput("empty score batch".into()));
    }
    Ok((one(s_real) - s_real).relu().mean() + (one(s_fake) + s_fake).relu().mean())
}

/// Triplet hinge over matched-real, matched-fake and mismatched-real region scores.
pub fn d_hinge_region<'g, T: Scalar>(
    real_match: Var<'g, T>,
    fake_match: Var<'g, T>,
    real_mismatch: Var<'g, T>,
    counts: &[usize],
) -> Result<Var<'g, T>> {
    let n = real_match.shape();
    if fake_match.shape() != n || real_mismatch.shape() != n {
        return Err(DtcError::Shape(format!(
            "region score counts differ: {:?} / {:?} / {:?}",
            n,
            fake_match.shape(),
            real_mismatch.shape()
        )));
    }
    let o = one(real_match);
    let per = (o - real_match).relu() + (o + fake_match).relu() + (o + real_mismatch).relu();
    region_mean(per, counts)
}

pub fn d_total<'g, T: Scalar>(l_x: Var<'g, T>, l_r: Var<'g, T>, w: &LossWeights) -> Var<'g, T> {
    l_x.mul_scalar(T::lit(w.lambda1)) + l_r.mul_scalar(T::lit(w.lambda2))
}

/// `−λ1·mean(s_x) − λ2·mean(s_r)`.
pub fn g_adversarial<'g, T: Scalar>(
    s_x_fake: Var<'g, T>,
    s_r_fake: Var<'g, T>,
    counts: &[usize],
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    if s_x_fake.value().numel() == 0 {
        return Err(DtcError::InvalidInput("empty score batch".into()));
    }
    let sr = region_mean(s_r_fake, counts)?;
    Ok((s_x_fake.mean().mul_scalar(T::lit(w.lambda1)) + sr.mul_scalar(T::lit(w.lambda2))).neg())
}

const NORM_EPS: f64 = 1e-12;

/// Unit-normalises along the last axis.
pub fn l2_normalize<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    let nd = x.shape().len();
    x / x.square().sum_axis(nd - 1, true).add_scalar(T::lit(NORM_EPS)).sqrt()
}

/// Region-side DAMSM features.
pub struct ImageSide<'g, T: Scalar> {
    /// `[N, L, D]` local features.
    pub local: Var<'g, T>,
    /// `[N, G]`
    pub global: Var<'g, T>,
}

/// Caption-side DAMSM features.
pub struct TextSide<'g, T: Scalar> {
    /// `[N, T, D]` word features.
    pub words: Var<'g, T>,
    pub lengths: Vec<usize>,
    /// `[N, G]`
    pub sentence: Var<'g, T>,
}

/// Symmetric cross-entropy of a square score matrix with matches on the
/// diagonal, averaged over the batch. Rows index images, columns captions.
fn symmetric_ce<'g, T: Scalar>(scores: Var<'g, T>) -> Var<'g, T> {
    let n = scores.shape()[0];
    let eye: Vec<T> = (0..n * n)
        .map(|k| if k / n == k % n { T::one() } else { T::zero() })
        .collect();
    let eye = scores.graph().constant(Tensor::new(&[n, n], eye));
    let diag = (scores * eye).sum_axis(1, false);
    let by_caption = scores.logsumexp(1, false) - diag;
    let by_image = scores.logsumexp(0, false) - diag;
    (by_caption + by_image).mean()
}

/// Word-level relevance `R(image_i, caption_j)` as an `[N, N]` matrix.
pub fn word_scores<'g, T: Scalar>(img: &ImageSide<'g, T>, text: &TextSide<'g, T>, cfg: &DamsmConfig) -> Result<Var<'g, T>> {
    let (ls, ws) = (img.local.shape(), text.words.shape());
    if ls.len() != 3 || ws.len() != 3 || ls[0] != ws[0] || ls[2] != ws[2] || text.lengths.len() != ws[0] {
        return Err(DtcError::Shape(format!("local {ls:?} vs words {ws:?}")));
    }
    let (n, l, d, t) = (ls[0], ls[1], ls[2], ws[1]);
    let g = img.local.graph();
    let v = l2_normalize(img.local);
    let w = l2_normalize(text.words);
    // sim[(j, s), (i, p)] = cos(word s of caption j, location p of image i)
    let sim = w
        .reshape(&[n * t, d])
        .matmul(v.reshape(&[n * l, d]).t())
        .reshape(&[n * t, n, l]);
    let attn = sim.mul_scalar(T::lit(cfg.gamma1)).softmax(2).permute(&[1, 0, 2]);
    // context[i, (j, s)] = Σ_p attn · v[i, p]
    let context = l2_normalize(attn.matmul(v));
    let rel = (context * w.reshape(&[1, n * t, d])).sum_axis(2, false).reshape(&[n, n, t]);
    let mut bias = vec![T::zero(); n * t];
    for (j, &len) in text.lengths.iter().enumerate() {
        if len == 0 || len > t {
            return Err(DtcError::InvalidInput("caption length out of range".into()));
        }
        for s in len..t {
            bias[j * t + s] = T::lit(-1e30);
        }
    }
    let bias = g.constant(Tensor::new(&[1, n, t], bias));
    let gamma2 = T::lit(cfg.gamma2);
    Ok((rel.mul_scalar(gamma2) + bias)
        .logsumexp(2, false)
        .mul_scalar(gamma2.recip()))
}

/// Sentence-level cosine matrix `[N, N]`.
pub fn sentence_scores<'g, T: Scalar>(img: &ImageSide<'g, T>, text: &TextSide<'g, T>) -> Result<Var<'g, T>> {
    let (a, b) = (img.global.shape(), text.sentence.shape());
    if a.len() != 2 || a != b {
        return Err(DtcError::Shape(format!("global {a:?} vs sentence {b:?}")));
    }
    Ok(l2_normalize(img.global).matmul(l2_normalize(text.sentence).t()))
}

/// Word-level plus sentence-level symmetric cross-entropies over the batch.
pub fn damsm_loss<'g, T: Scalar>(img: &ImageSide<'g, T>, text: &TextSide<'g, T>, cfg: &DamsmConfig) -> Result<Var<'g, T>> {
    if img.local.shape().first().copied().unwrap_or(0) < 1 {
        return Err(DtcError::InvalidInput("DAMSM needs at least one pair".into()));
    }
    let g3 = T::lit(cfg.gamma3);
    let word = symmetric_ce(word_scores(img, text, cfg)?.mul_scalar(g3));
    let sent = symmetric_ce(sentence_scores(img, text)?.mul_scalar(g3));
    Ok(word + sent)
}

/// Mean absolute difference between multimodal region features; the real
/// branch is detached.
pub fn mmrfm_loss<'g, T: Scalar>(f_real: Var<'g, T>, f_fake: Var<'g, T>) -> Result<Var<'g, T>> {
    if f_real.shape() != f_fake.shape() {
        return Err(DtcError::Shape(format!(
            "real {:?} vs fake {:?} region features",
            f_real.shape(),
            f_fake.shape()
        )));
    }
    Ok((f_real.detach() - f_fake).abs().mean())
}

/// Frozen feature extractor used for the perceptual term.
pub trait FeatureNet<T: Scalar> {
    fn features<'g>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>>;
}

/// `(L_perc, L_pixel)`; the real branch is detached.
pub fn reconstruction_losses<'g, T: Scalar, F: FeatureNet<T>>(
    ctx: &Ctx<'g, '_, T>,
    x_real: Var<'g, T>,
    x_fake: Var<'g, T>,
    net: &F,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if x_real.shape() != x_fake.shape() {
        return Err(DtcError::Shape(format!(
            "real {:?} vs fake {:?} images",
            x_real.shape(),
            x_fake.shape()
        )));
    }
    let pixel = (x_real.detach() - x_fake).abs().mean();
    let fr = net.features(ctx, x_real.detach());
    let ff = net.features(ctx, x_fake);
    let mut perc = ctx.g.constant(Tensor::scalar(T::zero()));
    for (a, b) in fr.into_iter().zip(ff) {
        perc = perc + (a.detach() - b).abs().mean();
    }
    Ok((perc, pixel))
}

/// A uniformly random cyclic permutation: never maps an index to itself.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// For each caption, the index of a different caption string. Starts from a
/// derangement and repairs string collisions by swapping targets; positions
/// with no distinct caption anywhere keep their deranged partner.
pub fn mismatch_indices<R: Rng + ?Sized>(captions: &[&str], rng: &mut R) -> Vec<usize> {
    let n = captions.len();
    let mut p = derangement(n, rng);
    for i in 0..n {
        if captions[p[i]] != captions[i] {
            continue;
        }
        let fix = (0..n).find(|&k| {
            k != i && p[k] != i && p[i] != k && captions[p[k]] != captions[i] && captions[p[i]] != captions[k]
        });
        if let Some(k) = fix {
            p.swap(i, k);
        }
    }
    p
}
