use serde::{Deserialize, Serialize};

use super::{
    frechet_feature_distance, image_features, noise_images, r_precision, region_attribute_accuracy,
    region_features, MetricsReport, SampleCounts,
};
use crate::error::{DtcError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::scene::{derive_seed, DatasetManifest, Layout, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    pub seed: u64,
    /// 0 evaluates the whole split.
    pub max_images: usize,
    pub n_candidates: usize,
    /// Refuse an oracle whose recorded validation accuracy is below this.
    pub oracle_threshold: f64,
}

impl EvalOptions {
    pub fn from_config(model_cfg: &crate::trainer::TrainConfig, split: Split, seed: u64) -> Self {
        EvalOptions {
            split,
            seed,
            max_images: model_cfg.eval_max_images,
            n_candidates: model_cfg.n_candidates,
            oracle_threshold: model_cfg.oracle_threshold,
        }
    }
}

/// Generated image for each layout; image `i` uses seeds derived from `(seed, i)`.
pub fn generate_split<T: Scalar>(model: &Model<T>, layouts: &[Layout], seed: u64) -> Result<Vec<Tensor<T>>> {
    layouts
        .iter()
        .enumerate()
        .map(|(i, l)| model.generate_layout(l, derive_seed(seed, i as u64)))
        .collect()
}

/// Scores a trained generator against the real images of one split.
/// Depends only on the checkpoint, the split and the seed.
pub fn evaluate<T: Scalar>(model: &Model<T>, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<MetricsReport> {
    let oracle = model.oracle()?;
    match oracle.validation {
        Some(v) if v.min() >= opts.oracle_threshold => {}
        Some(v) => {
            return Err(DtcError::Evaluation(format!(
                "oracle validation accuracy {:.4} is below {:.4} ({v:?})",
                v.min(),
                opts.oracle_threshold
            )))
        }
        None => return Err(DtcError::Evaluation("oracle has no recorded validation accuracy".into())),
    }
    let mut records = manifest.split(opts.split);
    if opts.max_images > 0 {
        records.truncate(opts.max_images);
    }
    if records.is_empty() {
        return Err(DtcError::Evaluation(format!("split {:?} is empty", opts.split)));
    }
    let real: Vec<Tensor<T>> = records.iter().map(|r| manifest.load_tensor(r)).collect::<Result<_>>()?;
    let layouts: Vec<Layout> = records.iter().map(|r| r.layout()).collect();
    let fake = generate_split(model, &layouts, opts.seed)?;
    evaluate_images(model, &real, &fake, &layouts, opts)
}

/// Metrics of `fake` (one image per layout) against `real`.
pub fn evaluate_images<T: Scalar>(
    model: &Model<T>,
    real: &[Tensor<T>],
    fake: &[Tensor<T>],
    layouts: &[Layout],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let o = model.oracle()?;
    let (ora, st) = (&o.oracle, &o.store);
    let real_img = image_features(ora, st, real)?;
    let fake_img = image_features(ora, st, fake)?;
    let res = real[0].shape()[1];
    let noise = noise_images::<T>(real.len(), res, derive_seed(opts.seed, u64::MAX));
    let noise_img = image_features(ora, st, &noise)?;
    let real_reg = region_features(ora, st, real, layouts)?;
    let fake_reg = region_features(ora, st, fake, layouts)?;
    let acc = region_attribute_accuracy(ora, st, fake, layouts)?;
    let acc_real = region_attribute_accuracy(ora, st, real, layouts)?;
    let texts = model.encoders.embed_scenes(layouts)?;
    let r_fake = r_precision(&model.encoders.embed_images(fake)?, &texts, opts.n_candidates, opts.seed)?;
    let r_real = r_precision(&model.encoders.embed_images(real)?, &texts, opts.n_candidates, opts.seed)?;
    let report = MetricsReport {
        split: opts.split,
        frechet_image: frechet_feature_distance(&fake_img, &real_img)?,
        frechet_region: frechet_feature_distance(&fake_reg, &real_reg)?,
        frechet_image_noise: frechet_feature_distance(&noise_img, &real_img)?,
        attr_accuracy: acc.accuracy(),
        attr_accuracy_real: acc_real.accuracy(),
        r_precision_top1: r_fake,
        r_precision_top1_real: r_real,
        n_candidates: opts.n_candidates,
        counts: SampleCounts {
            images: real.len(),
            regions: real_reg.nrows(),
            singleton_regions: acc.color.total,
        },
        config_hash: model.config.hash(),
        seed: opts.seed,
    };
    report.validate()?;
    Ok(report)
}
