//! Attribute oracle, Fréchet feature distance, region attribute accuracy and
//! retrieval precision.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::damsm::{crop_regions, full_boxes};
use crate::error::{DtcError, Result};
use crate::losses::FeatureNet;
use crate::nn::{Adam, AdamConfig, Conv2d, Ctx, Linear, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::scene::{parse_caption, BBox, Color, DatasetManifest, Layout, ManifestRecord, Shape, Size, Split, Texture};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub crop_size: usize,
    pub channels: [usize; 4],
    /// Penultimate feature width.
    pub d_o: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            crop_size: 32,
            channels: [32, 32, 64, 64],
            d_o: 64,
        }
    }
}

/// Ground-truth or predicted attributes of one object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: Color,
    pub shape: Shape,
    pub size: Size,
    pub texture: Texture,
}

pub struct AttributeLogits<'g, T: Scalar> {
    pub color: Var<'g, T>,
    pub shape: Var<'g, T>,
    pub size: Var<'g, T>,
    pub texture: Var<'g, T>,
}

/// Four conv layers with pooling after 1 and 2 and 3, a pooled penultimate
/// vector and one linear head per attribute.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    pub config: OracleConfig,
    convs: Vec<Conv2d>,
    feat: Linear,
    color: Linear,
    shape: Linear,
    size: Linear,
    texture: Linear,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl OracleClassifier {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: OracleConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, &format!("oracle.conv{}", i + 1), cin, c, 3, 1, 1, rng);
                cin = c;
                conv
            })
            .collect();
        let d = config.d_o;
        OracleClassifier {
            convs,
            feat: Linear::new(store, "oracle.feat", cin, d, true, rng),
            color: Linear::new(store, "oracle.color", d, Color::ALL.len(), true, rng),
            shape: Linear::new(store, "oracle.shape", d, Shape::ALL.len(), true, rng),
            size: Linear::new(store, "oracle.size", d, Size::ALL.len(), true, rng),
            texture: Linear::new(store, "oracle.texture", d, Texture::ALL.len(), true, rng),
            config,
        }
    }

    /// Activations after conv layers 2 and 4.
    fn trunk<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let h = self.convs[0].forward(ctx, x).relu().avg_pool2d(2);
        let l2 = self.convs[1].forward(ctx, h).relu();
        let h = self.convs[2].forward(ctx, l2.avg_pool2d(2)).relu().avg_pool2d(2);
        let l4 = self.convs[3].forward(ctx, h).relu();
        (l2, l4)
    }

    /// Penultimate features `[N, d_o]` of crops `[N, 3, s, s]`.
    pub fn features<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, crops: Var<'g, T>) -> Var<'g, T> {
        let (_, l4) = self.trunk(ctx, crops);
        let s = l4.shape();
        let pooled = l4.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2, false);
        self.feat.forward(ctx, pooled).relu()
    }

    pub fn logits<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, crops: Var<'g, T>) -> AttributeLogits<'g, T> {
        let f = self.features(ctx, crops);
        AttributeLogits {
            color: self.color.forward(ctx, f),
            shape: self.shape.forward(ctx, f),
            size: self.size.forward(ctx, f),
            texture: self.texture.forward(ctx, f),
        }
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, crops: &Tensor<T>) -> Vec<Attributes> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Eval);
        let out = self.logits(&ctx, g.constant(crops.clone()));
        let (c, s, z, t) = (out.color.value(), out.shape.value(), out.size.value(), out.texture.value());
        let row = |v: &Tensor<T>, i: usize| {
            let k = v.shape()[1];
            argmax(&v.data()[i * k..(i + 1) * k])
        };
        (0..crops.shape()[0])
            .map(|i| Attributes {
                color: Color::ALL[row(&c, i)],
                shape: Shape::ALL[row(&s, i)],
                size: Size::ALL[row(&z, i)],
                texture: Texture::ALL[row(&t, i)],
            })
            .collect()
    }

    /// Penultimate features in evaluation mode.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, crops: &Tensor<T>) -> Tensor<T> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Eval);
        self.features(&ctx, g.constant(crops.clone())).value().as_ref().clone()
    }
}

impl<T: Scalar> FeatureNet<T> for OracleClassifier {
    fn features<'g>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let (l2, l4) = self.trunk(ctx, x);
        vec![l2, l4]
    }
}

/// A region crop with one object and its true attributes.
#[derive(Clone, Debug)]
pub struct LabeledCrop {
    pub record: usize,
    pub bbox: BBox,
    pub attributes: Attributes,
}

/// Singleton regions of `records` with their ground-truth attributes.
pub fn singleton_crops(records: &[&ManifestRecord]) -> Vec<LabeledCrop> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for reg in &r.regions {
            if let [m] = reg.members[..] {
                let o = &r.objects[m];
                out.push(LabeledCrop {
                    record: i,
                    bbox: reg.bbox,
                    attributes: Attributes {
                        color: o.color,
                        shape: o.shape,
                        size: o.size,
                        texture: o.texture,
                    },
                });
            }
        }
    }
    out
}

/// Crops one box from each listed image: `[N, 3, size, size]`.
pub fn crop_batch<T: Scalar>(images: &[&Tensor<T>], boxes: &[BBox], size: usize) -> Result<Tensor<T>> {
    let stacked = Tensor::stack(&images.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
    let g = Graph::new();
    let layout: Vec<Vec<BBox>> = boxes.iter().map(|b| vec![*b]).collect();
    Ok(crop_regions(g.constant(stacked), &layout, size)?.value().as_ref().clone())
}

/// Every image resized to `size×size`.
pub fn resize_batch<T: Scalar>(images: &[Tensor<T>], size: usize) -> Result<Tensor<T>> {
    let g = Graph::new();
    let stacked = Tensor::stack(images)?;
    Ok(crop_regions(g.constant(stacked), &full_boxes(images.len()), size)?
        .value()
        .as_ref()
        .clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Minimum validation accuracy required of every attribute.
    pub threshold: f64,
    /// Caps the number of training crops (0 = all).
    pub max_crops: usize,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        OracleTrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            threshold: 0.98,
            max_crops: 0,
        }
    }
}

/// Correct/total tallies for one attribute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTallies {
    pub color: Tally,
    pub shape: Tally,
    pub size: Tally,
    pub texture: Tally,
}

impl AttributeTallies {
    pub fn accuracy(&self) -> AttributeAccuracy {
        AttributeAccuracy {
            color: self.color.accuracy(),
            shape: self.shape.accuracy(),
            size: self.size.accuracy(),
            texture: self.texture.accuracy(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub color: f64,
    pub shape: f64,
    pub size: f64,
    pub texture: f64,
}

impl AttributeAccuracy {
    pub fn min(&self) -> f64 {
        self.color.min(self.shape).min(self.size).min(self.texture)
    }
}

pub struct TrainedOracle<T> {
    pub oracle: OracleClassifier,
    pub store: ParamStore<T>,
    pub validation: AttributeAccuracy,
    pub losses: Vec<f64>,
}

fn ce<'g, T: Scalar>(logits: Var<'g, T>, labels: &[usize]) -> Var<'g, T> {
    let k = logits.shape()[1];
    let mut onehot = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let oh = logits.graph().constant(Tensor::new(&[labels.len(), k], onehot));
    (logits.log_softmax(1) * oh).sum_axis(1, false).mean().neg()
}

fn load_tensors<T: Scalar>(manifest: &DatasetManifest, records: &[&ManifestRecord]) -> Result<Vec<Tensor<T>>> {
    records.iter().map(|r| manifest.load_tensor(r)).collect()
}

/// Oracle predictions against ground truth on labelled crops.
pub fn oracle_accuracy<T: Scalar>(
    oracle: &OracleClassifier,
    store: &ParamStore<T>,
    images: &[Tensor<T>],
    crops: &[LabeledCrop],
) -> Result<AttributeTallies> {
    let mut t = AttributeTallies::default();
    for chunk in crops.chunks(64) {
        let imgs: Vec<&Tensor<T>> = chunk.iter().map(|c| &images[c.record]).collect();
        let boxes: Vec<BBox> = chunk.iter().map(|c| c.bbox).collect();
        let x = crop_batch(&imgs, &boxes, oracle.config.crop_size)?;
        for (p, c) in oracle.predict(store, &x).into_iter().zip(chunk) {
            let a = c.attributes;
            t.color.add(p.color == a.color);
            t.shape.add(p.shape == a.shape);
            t.size.add(p.size == a.size);
            t.texture.add(p.texture == a.texture);
        }
    }
    Ok(t)
}

/// Trains the oracle on singleton crops of the training split and measures
/// it on the validation split. Never fails on accuracy; see [`train_oracle`].
pub fn fit_oracle<T: Scalar>(manifest: &DatasetManifest, cfg: &OracleTrainConfig) -> Result<TrainedOracle<T>> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(DtcError::Config("oracle batch size and epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let oracle = OracleClassifier::new(&mut store, OracleConfig::default(), &mut rng);
    let train = manifest.split(Split::Train);
    let val = manifest.split(Split::Val);
    let mut crops = singleton_crops(&train);
    let val_crops = singleton_crops(&val);
    if crops.is_empty() || val_crops.is_empty() {
        return Err(DtcError::Evaluation("no singleton regions to train the oracle on".into()));
    }
    crops.shuffle(&mut rng);
    if cfg.max_crops > 0 {
        crops.truncate(cfg.max_crops);
    }
    let train_imgs = load_tensors::<T>(manifest, &train)?;
    let val_imgs = load_tensors::<T>(manifest, &val)?;
    let mut opt = Adam::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        crops.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in crops.chunks(cfg.batch_size) {
            let imgs: Vec<&Tensor<T>> = chunk.iter().map(|c| &train_imgs[c.record]).collect();
            let boxes: Vec<BBox> = chunk.iter().map(|c| c.bbox).collect();
            let x = crop_batch(&imgs, &boxes, oracle.config.crop_size)?;
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, Mode::Train);
            let out = oracle.logits(&ctx, g.constant(x));
            let labels = |f: fn(&Attributes) -> usize| chunk.iter().map(|c| f(&c.attributes)).collect::<Vec<_>>();
            let loss = ce(out.color, &labels(|a| a.color.index()))
                + ce(out.shape, &labels(|a| a.shape.index()))
                + ce(out.size, &labels(|a| a.size.index()))
                + ce(out.texture, &labels(|a| a.texture.index()));
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(DtcError::NonFinite { term: "oracle".into() });
            }
            let grads = g.backward(loss);
            let grads = store.collect_grads(&grads);
            opt.step(&mut store, &grads);
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("oracle epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
    }
    let validation = oracle_accuracy(&oracle, &store, &val_imgs, &val_crops)?.accuracy();
    Ok(TrainedOracle {
        oracle,
        store,
        validation,
        losses,
    })
}

/// [`fit_oracle`], failing when any attribute misses the threshold.
pub fn train_oracle<T: Scalar>(manifest: &DatasetManifest, cfg: &OracleTrainConfig) -> Result<TrainedOracle<T>> {
    let trained = fit_oracle(manifest, cfg)?;
    let v = trained.validation;
    if !(v.min() >= cfg.threshold) {
        return Err(DtcError::Evaluation(format!(
            "oracle validation accuracy below {}: color {:.3}, shape {:.3}, size {:.3}, texture {:.3}",
            cfg.threshold, v.color, v.shape, v.size, v.texture
        )));
    }
    Ok(trained)
}

/// Accuracy of the oracle on the attributes each singleton caption states.
/// `images[i]` is scored against `layouts[i]`; pair captions are skipped, and
/// texture counts only where the caption mentions it.
pub fn region_attribute_accuracy<T: Scalar>(
    oracle: &OracleClassifier,
    store: &ParamStore<T>,
    images: &[Tensor<T>],
    layouts: &[Layout],
) -> Result<AttributeTallies> {
    if images.is_empty() || images.len() != layouts.len() {
        return Err(DtcError::Evaluation(format!(
            "{} images for {} layouts",
            images.len(),
            layouts.len()
        )));
    }
    let mut jobs = Vec::new();
    for (i, l) in layouts.iter().enumerate() {
        for r in &l.regions {
            if let Ok(p) = parse_caption(&r.caption) {
                if p.second.is_none() {
                    jobs.push((i, r.bbox, p.first));
                }
            }
        }
    }
    let mut t = AttributeTallies::default();
    for chunk in jobs.chunks(64) {
        let imgs: Vec<&Tensor<T>> = chunk.iter().map(|j| &images[j.0]).collect();
        let boxes: Vec<BBox> = chunk.iter().map(|j| j.1).collect();
        let x = crop_batch(&imgs, &boxes, oracle.config.crop_size)?;
        for (p, (_, _, stated)) in oracle.predict(store, &x).into_iter().zip(chunk) {
            t.color.add(p.color == stated.color);
            t.shape.add(p.shape == stated.shape);
            t.size.add(p.size == stated.size);
            if let Some(tex) = stated.texture {
                t.texture.add(p.texture == tex);
            }
        }
    }
    Ok(t)
}

/// Rows of `t: [N, D]` as an `N×D` matrix.
pub fn to_matrix<T: Scalar>(t: &Tensor<T>) -> Result<DMatrix<f64>> {
    if t.ndim() != 2 {
        return Err(DtcError::Shape(format!("expected a feature matrix, got {:?}", t.shape())));
    }
    let (n, d) = (t.shape()[0], t.shape()[1]);
    Ok(DMatrix::from_row_iterator(n, d, t.data().iter().map(|v| v.as_f64())))
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n - 1.0);
    (mu, cov)
}

const EIG_TOL: f64 = 1e-10;

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(s);
    let root = e.eigenvalues.map(|l| if l > EIG_TOL { l.sqrt() } else { 0.0 });
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})` with unbiased covariances.
/// The cross term uses the eigenvalues of the symmetric `√Σ_A Σ_B √Σ_A`,
/// clipped at zero.
pub fn frechet_feature_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(DtcError::Shape(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(DtcError::InvalidInput("need at least two samples per set".into()));
    }
    let d = a.ncols();
    if a.nrows() <= d || b.nrows() <= d {
        log::warn!(
            "Fréchet distance from {} and {} samples of width {d}: covariances are rank deficient",
            a.nrows(),
            b.nrows()
        );
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| if l > EIG_TOL { l.sqrt() } else { 0.0 })
        .sum();
    let dist = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Top-1 retrieval rate: image `i` must score its own description strictly
/// above `n_candidates − 1` distractors drawn from the other rows.
/// `images`, `texts`: `[N, G]` global vectors.
pub fn r_precision<T: Scalar>(images: &Tensor<T>, texts: &Tensor<T>, n_candidates: usize, seed: u64) -> Result<f64> {
    let (a, b) = (to_matrix(images)?, to_matrix(texts)?);
    if a.shape() != b.shape() {
        return Err(DtcError::Shape(format!("image {:?} vs text {:?} features", a.shape(), b.shape())));
    }
    let n = a.nrows();
    if n_candidates < 2 || n < n_candidates {
        return Err(DtcError::Evaluation(format!(
            "split of {n} cannot supply {n_candidates} candidates"
        )));
    }
    let rows = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for i in 0..n {
        let img = rows(&a, i);
        let own = cosine(&img, &rows(&b, i));
        let won = sample(&mut rng, n - 1, n_candidates - 1)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .all(|j| cosine(&img, &rows(&b, j)) < own);
        hits += won as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// Uniform noise images in `[-1, 1]`, `[3, r, r]` each.
pub fn noise_images<T: Scalar>(n: usize, resolution: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::uniform(&[3, resolution, resolution], -1.0, 1.0, &mut rng))
        .collect()
}

/// Oracle features of whole images (resized to the crop size).
pub fn image_features<T: Scalar>(
    oracle: &OracleClassifier,
    store: &ParamStore<T>,
    images: &[Tensor<T>],
) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for chunk in images.chunks(64) {
        let x = resize_batch(chunk, oracle.config.crop_size)?;
        rows.push(to_matrix(&oracle.embed(store, &x))?);
    }
    stack_rows(rows)
}

/// Oracle features of every region crop.
pub fn region_features<T: Scalar>(
    oracle: &OracleClassifier,
    store: &ParamStore<T>,
    images: &[Tensor<T>],
    layouts: &[Layout],
) -> Result<DMatrix<f64>> {
    let jobs: Vec<(usize, BBox)> = layouts
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.regions.iter().map(move |r| (i, r.bbox)))
        .collect();
    let mut rows = Vec::new();
    for chunk in jobs.chunks(64) {
        let imgs: Vec<&Tensor<T>> = chunk.iter().map(|j| &images[j.0]).collect();
        let boxes: Vec<BBox> = chunk.iter().map(|j| j.1).collect();
        let x = crop_batch(&imgs, &boxes, oracle.config.crop_size)?;
        rows.push(to_matrix(&oracle.embed(store, &x))?);
    }
    stack_rows(rows)
}

fn stack_rows(parts: Vec<DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let d = parts.first().map(|m| m.ncols()).ok_or_else(|| DtcError::Evaluation("no samples".into()))?;
    let n: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(&p);
        at += p.nrows();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub images: usize,
    pub regions: usize,
    pub singleton_regions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub frechet_image: f64,
    pub frechet_region: f64,
    /// Fréchet distance of uniform-noise images to the same real set.
    pub frechet_image_noise: f64,
    pub attr_accuracy: AttributeAccuracy,
    /// The same oracle on the real images of the split.
    pub attr_accuracy_real: AttributeAccuracy,
    pub r_precision_top1: f64,
    /// The same retrieval with the real images.
    pub r_precision_top1_real: f64,
    pub n_candidates: usize,
    pub counts: SampleCounts,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attr_accuracy;
        let vals = [
            self.frechet_image,
            self.frechet_region,
            self.frechet_image_noise,
            a.color,
            a.shape,
            a.size,
            a.texture,
            self.r_precision_top1,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DtcError::Evaluation("non-finite metric in report".into()));
        }
        let c = self.counts;
        if c.images == 0 || c.regions == 0 || c.singleton_regions == 0 {
            return Err(DtcError::Evaluation("empty sample counts".into()));
        }
        Ok(())
    }
}

mod run;

pub use run::{evaluate, evaluate_images, generate_split, EvalOptions};

#[cfg(test)]
mod tests;
