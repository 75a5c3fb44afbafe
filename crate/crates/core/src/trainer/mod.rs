//! DAMSM encoder pretraining and adversarial training.

mod config;

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::damsm::crop_regions;
use crate::error::{DtcError, Result};
use crate::evaluator::fit_oracle;
use crate::generator::EmbeddingMatrix;
use crate::losses::{
    d_hinge_image, d_hinge_region, d_total, damsm_loss, g_adversarial, mismatch_indices, mmrfm_loss,
    reconstruction_losses, sentence_scores, word_scores, ImageSide, TextSide,
};
use crate::model::{scene_description, stream_rng, Encoders, GanNets, Model, OracleNet};
use crate::nn::{Adam, Ctx, Mode};
use crate::scalar::Scalar;
use crate::scene::{BBox, DatasetManifest, Layout, ManifestRecord, Split};
use crate::tensor::Tensor;
use crate::text::{tokenize, TokenSeq, Vocabulary, T_MAX, T_MAX_SCENE};

pub use config::TrainConfig;

/// Vocabulary over every caption and scene description in the manifest.
pub fn build_vocab(manifest: &DatasetManifest) -> Result<Vocabulary> {
    let captions: Vec<&str> = manifest
        .records
        .iter()
        .flat_map(|r| r.regions.iter().map(|g| g.caption.as_str()))
        .collect();
    Vocabulary::build(captions)
}

fn check_finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DtcError::NonFinite { term: term.into() })
    }
}

fn rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    Tensor::stack(&idx.iter().map(|&i| t.index0(i)).collect::<Vec<_>>())
}

/// Shuffled record order for one epoch.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0x6570_0000 + epoch as u64));
    order
}

fn load_split<T: Scalar>(manifest: &DatasetManifest, split: Split) -> Result<(Vec<Tensor<T>>, Vec<Layout>)> {
    let recs: Vec<&ManifestRecord> = manifest.split(split);
    let images = recs.iter().map(|r| manifest.load_tensor(r)).collect::<Result<Vec<_>>>()?;
    Ok((images, recs.iter().map(|r| r.layout()).collect()))
}

/// A crop of one image paired with the caption describing it.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub image: usize,
    pub bbox: BBox,
    pub caption: String,
    /// Whole-scene description (tokenised to the longer length).
    pub scene: bool,
}

/// Region pairs, plus whole-image pairs when `scenes` is set.
pub fn crop_pairs(layouts: &[Layout], scenes: bool) -> Vec<CropPair> {
    let mut out = Vec::new();
    for (i, l) in layouts.iter().enumerate() {
        for r in &l.regions {
            out.push(CropPair {
                image: i,
                bbox: r.bbox,
                caption: r.caption.clone(),
                scene: false,
            });
        }
        if scenes {
            out.push(CropPair {
                image: i,
                bbox: BBox([0.0, 0.0, 1.0, 1.0]),
                caption: scene_description(l),
                scene: true,
            });
        }
    }
    out
}

fn pair_tokens(pairs: &[&CropPair], vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let t = if pairs.iter().any(|p| p.scene) { T_MAX_SCENE } else { T_MAX };
    pairs.iter().map(|p| tokenize(&p.caption, vocab, t)).collect()
}

/// Image and text sides for a batch of pairs on one graph.
fn encode_pairs<'g, T: Scalar>(
    g: &'g Graph<T>,
    enc: &Encoders<T>,
    images: &[Tensor<T>],
    pairs: &[&CropPair],
    mode: Mode,
) -> Result<(ImageSide<'g, T>, TextSide<'g, T>)> {
    let stacked = Tensor::stack(&pairs.iter().map(|p| images[p.image].clone()).collect::<Vec<_>>())?;
    let boxes: Vec<Vec<BBox>> = pairs.iter().map(|p| vec![p.bbox]).collect();
    let crops = crop_regions(g.constant(stacked), &boxes, enc.image.config.crop_size)?;
    let ictx = Ctx::new(g, &enc.image_store, mode);
    let img = enc.image.forward(&ictx, crops)?;
    let tctx = Ctx::new(g, &enc.text_store, mode);
    let tb = enc.text.forward(&tctx, &pair_tokens(pairs, &enc.vocab)?)?;
    Ok((
        img,
        TextSide {
            words: tb.words,
            lengths: tb.lengths,
            sentence: tb.sentence,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamsmStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Encoder pretraining on real (crop, caption) pairs.
pub struct DamsmTrainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub encoders: Encoders<T>,
    opt_text: Adam<T>,
    opt_image: Adam<T>,
    images: Vec<Tensor<T>>,
    /// Per epoch, batches of pair indices.
    pairs: Vec<CropPair>,
    val_images: Vec<Tensor<T>>,
    val_pairs: Vec<CropPair>,
    pub step: usize,
    pub history: Vec<DamsmStep>,
}

impl<T: Scalar> DamsmTrainer<T> {
    pub fn new(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = build_vocab(manifest)?;
        let encoders = Encoders::init(cfg, vocab)?;
        let (images, layouts) = load_split(manifest, Split::Train)?;
        let (val_images, val_layouts) = load_split(manifest, Split::Val)?;
        let pairs = crop_pairs(&layouts, cfg.damsm_scene_pairs);
        let val_pairs = crop_pairs(&val_layouts, false);
        if pairs.iter().filter(|p| !p.scene).count() < cfg.batch_size {
            return Err(DtcError::InvalidInput(format!(
                "{} training regions cannot fill a batch of {}",
                pairs.len(),
                cfg.batch_size
            )));
        }
        if val_pairs.len() < 2 {
            return Err(DtcError::InvalidInput("validation split has fewer than two regions".into()));
        }
        Ok(DamsmTrainer {
            opt_text: Adam::new(&encoders.text_store, cfg.adam(cfg.lr_damsm)),
            opt_image: Adam::new(&encoders.image_store, cfg.adam(cfg.lr_damsm)),
            cfg: cfg.clone(),
            encoders,
            images,
            pairs,
            val_images,
            val_pairs,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a pretraining checkpoint written with the same config.
    pub fn resume(manifest: &DatasetManifest, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        check_resume(cfg, ck, CheckpointKind::Damsm)?;
        let mut t = Self::new(manifest, cfg)?;
        if t.encoders.vocab != ck.header.vocab {
            return Err(DtcError::Checkpoint("vocabulary differs from the dataset's".into()));
        }
        ck.load_store("", &mut t.encoders.text_store)?;
        ck.load_store("", &mut t.encoders.image_store)?;
        ck.load_adam("text", &mut t.opt_text)?;
        ck.load_adam("damsm", &mut t.opt_image)?;
        t.step = ck.header.step;
        Ok(t)
    }

    /// Batches of one epoch: region batches and scene batches never mix.
    fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let b = self.cfg.batch_size;
        let mut rng = stream_rng(self.cfg.seed, 0x6461_0000 + epoch as u64);
        let mut batches = Vec::new();
        for scene in [false, true] {
            let mut idx: Vec<usize> = (0..self.pairs.len()).filter(|&i| self.pairs[i].scene == scene).collect();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks_exact(b).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_batches(0).len()
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.damsm_epochs * self.steps_per_epoch();
        if self.cfg.max_steps > 0 {
            full.min(self.cfg.max_steps)
        } else {
            full
        }
    }

    pub fn train_step(&mut self) -> Result<DamsmStep> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (self.step / spe, self.step % spe);
        let batch = &self.epoch_batches(epoch)[pos];
        let pairs: Vec<&CropPair> = batch.iter().map(|&i| &self.pairs[i]).collect();
        let g = Graph::new();
        let (img, text) = encode_pairs(&g, &self.encoders, &self.images, &pairs, Mode::Train)?;
        let loss = damsm_loss(&img, &text, &self.cfg.damsm())?;
        let value = check_finite("damsm", loss.item().as_f64())?;
        let grads = g.backward(loss);
        let gt = self.encoders.text_store.collect_grads(&grads);
        let gi = self.encoders.image_store.collect_grads(&grads);
        self.opt_text.step(&mut self.encoders.text_store, &gt);
        self.opt_image.step(&mut self.encoders.image_store, &gi);
        let rec = DamsmStep {
            step: self.step,
            epoch,
            loss: value,
        };
        self.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Loss on the first `batch_size` validation regions, evaluation mode.
    pub fn validation_loss(&self) -> Result<f64> {
        let n = self.cfg.batch_size.min(self.val_pairs.len());
        let pairs: Vec<&CropPair> = self.val_pairs[..n].iter().collect();
        let g = Graph::new();
        let (img, text) = encode_pairs(&g, &self.encoders, &self.val_images, &pairs, Mode::Eval)?;
        Ok(damsm_loss(&img, &text, &self.cfg.damsm())?.item().as_f64())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let model = Model {
            config: self.cfg.clone(),
            encoders: self.encoders.clone(),
            gan: None,
            oracle: None,
        };
        let mut ck = model.to_checkpoint(self.step / self.steps_per_epoch().max(1), self.step);
        ck.insert_adam("text", &self.opt_text);
        ck.insert_adam("damsm", &self.opt_image);
        ck
    }

    /// Trains to the configured length, checkpointing into `out` at the cadence.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        let total = self.total_steps();
        while self.step < total {
            let rec = self.train_step()?;
            if rec.step % 50 == 0 {
                log::info!("damsm step {} epoch {}: loss {:.4}", rec.step, rec.epoch, rec.loss);
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint().save(dir.join(format!("damsm_step{}.dtck", self.step)))?;
                }
            }
        }
        Ok(())
    }
}

/// Top-1 region-to-caption retrieval: held-out pairs are shuffled into
/// groups of `n_candidates`; each crop must rank its own caption first
/// (a candidate with an identical caption string counts as correct).
pub fn damsm_retrieval<T: Scalar>(
    enc: &Encoders<T>,
    cfg: &TrainConfig,
    images: &[Tensor<T>],
    layouts: &[Layout],
    n_candidates: usize,
    seed: u64,
) -> Result<f64> {
    let mut pairs = crop_pairs(layouts, false);
    if pairs.len() < n_candidates || n_candidates < 2 {
        return Err(DtcError::Evaluation(format!(
            "{} held-out regions for groups of {n_candidates}",
            pairs.len()
        )));
    }
    pairs.shuffle(&mut stream_rng(seed, 0x7265_7472));
    let (mut hits, mut total) = (0, 0);
    for group in pairs.chunks_exact(n_candidates) {
        let refs: Vec<&CropPair> = group.iter().collect();
        let g = Graph::new();
        let (img, text) = encode_pairs(&g, enc, images, &refs, Mode::Eval)?;
        let scores = word_scores(&img, &text, &cfg.damsm())? + sentence_scores(&img, &text)?;
        let s = scores.value();
        for i in 0..n_candidates {
            let row = &s.data()[i * n_candidates..(i + 1) * n_candidates];
            let best = (0..n_candidates)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite scores"))
                .expect("non-empty group");
            hits += (group[best].caption == group[i].caption) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DamsmReport {
    pub steps: usize,
    pub val_loss_before: f64,
    pub val_loss_after: f64,
    /// `None` when the held-out split cannot fill one candidate group.
    pub retrieval_top1: Option<f64>,
    pub retrieval_candidates: usize,
}

pub struct DamsmOutcome<T: Scalar> {
    pub model: Model<T>,
    pub report: DamsmReport,
    /// The model plus optimizer state, resumable.
    pub checkpoint: Checkpoint,
}

/// Pretrains the encoders, then fits the attribute oracle. The result holds
/// both; the oracle's validation accuracy is recorded, not enforced.
pub fn pretrain_damsm<T: Scalar>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<DamsmOutcome<T>> {
    let mut trainer = match resume {
        Some(ck) => DamsmTrainer::resume(manifest, cfg, ck)?,
        None => DamsmTrainer::new(manifest, cfg)?,
    };
    let before = trainer.validation_loss()?;
    trainer.run(out)?;
    let after = trainer.validation_loss()?;
    let retrieval = damsm_retrieval(
        &trainer.encoders,
        cfg,
        &trainer.val_images,
        &load_split::<T>(manifest, Split::Val)?.1,
        cfg.retrieval_candidates,
        cfg.seed,
    )
    .map_err(|e| log::warn!("retrieval skipped: {e}"))
    .ok();
    let oracle = fit_oracle::<T>(manifest, &cfg.oracle())?;
    log::info!("oracle validation accuracy {:?}", oracle.validation);
    let model = Model {
        config: cfg.clone(),
        encoders: trainer.encoders.clone(),
        gan: None,
        oracle: Some(OracleNet {
            oracle: oracle.oracle,
            store: oracle.store,
            validation: Some(oracle.validation),
        }),
    };
    let report = DamsmReport {
        steps: trainer.step,
        val_loss_before: before,
        val_loss_after: after,
        retrieval_top1: retrieval,
        retrieval_candidates: cfg.retrieval_candidates,
    };
    let spe = trainer.steps_per_epoch().max(1);
    let mut checkpoint = model.to_checkpoint(trainer.step / spe, trainer.step);
    checkpoint.insert_adam("text", &trainer.opt_text);
    checkpoint.insert_adam("damsm", &trainer.opt_image);
    Ok(DamsmOutcome {
        model,
        report,
        checkpoint,
    })
}

fn check_resume(cfg: &TrainConfig, ck: &Checkpoint, kind: CheckpointKind) -> Result<()> {
    if ck.header.kind != kind {
        return Err(DtcError::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", ck.header.kind)));
    }
    let current = cfg.hash();
    if ck.header.config_hash != current {
        return Err(DtcError::ConfigHashMismatch {
            checkpoint: ck.header.config_hash.clone(),
            current,
        });
    }
    Ok(())
}

/// Loss terms of one adversarial step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub epoch: usize,
    pub d_image: f64,
    pub d_region: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub damsm: f64,
    pub mmrfm: f64,
    pub perceptual: f64,
    pub pixel: f64,
    pub g_total: f64,
}

/// One batch after region subselection.
struct Batch<T> {
    real: Tensor<T>,
    boxes: Vec<Vec<BBox>>,
    captions: Vec<String>,
    counts: Vec<usize>,
}

pub struct GanTrainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    images: Vec<Tensor<T>>,
    layouts: Vec<Layout>,
    pub step: usize,
    pub history: Vec<StepLosses>,
}

impl<T: Scalar> GanTrainer<T> {
    /// Starts adversarial training from pretrained encoders (and oracle).
    pub fn new(manifest: &DatasetManifest, cfg: &TrainConfig, pretrained: &Model<T>) -> Result<Self> {
        cfg.validate()?;
        let p = &pretrained.config;
        if p.text() != cfg.text() || p.image_encoder() != cfg.image_encoder() {
            return Err(DtcError::Config("encoder sizes differ from the pretrained checkpoint".into()));
        }
        if cfg.c_perc > 0.0 && pretrained.oracle.is_none() {
            return Err(DtcError::Config("the perceptual term needs the oracle from pretraining".into()));
        }
        let (images, layouts) = load_split(manifest, Split::Train)?;
        if images.len() < cfg.batch_size {
            return Err(DtcError::InvalidInput(format!(
                "{} training images cannot fill a batch of {}",
                images.len(),
                cfg.batch_size
            )));
        }
        if images[0].shape()[1] != cfg.resolution {
            return Err(DtcError::Config(format!(
                "dataset images are {}px but the config trains at {}",
                images[0].shape()[1],
                cfg.resolution
            )));
        }
        let encoders = pretrained.encoders.clone();
        if encoders.vocab != build_vocab(manifest)? {
            return Err(DtcError::Checkpoint("vocabulary differs from the dataset's".into()));
        }
        let gan = GanNets::init(cfg)?;
        let model = Model {
            config: cfg.clone(),
            encoders,
            gan: Some(gan),
            oracle: pretrained.oracle.clone(),
        };
        let gan = model.gan()?;
        Ok(GanTrainer {
            opt_g: Adam::new(&gan.g_store, cfg.adam(cfg.lr_g)),
            opt_d: Adam::new(&gan.d_store, cfg.adam(cfg.lr_d)),
            cfg: cfg.clone(),
            model,
            images,
            layouts,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Restores weights, optimizer moments and the step counter. The config
    /// must hash identically to the one the checkpoint was written with.
    pub fn resume(manifest: &DatasetManifest, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        check_resume(cfg, ck, CheckpointKind::Gan)?;
        let model = Model::from_checkpoint(ck)?;
        let mut t = Self::new(manifest, cfg, &model)?;
        t.model = model;
        let gan = t.model.gan()?;
        t.opt_g = Adam::new(&gan.g_store, cfg.adam(cfg.lr_g));
        t.opt_d = Adam::new(&gan.d_store, cfg.adam(cfg.lr_d));
        ck.load_adam("gen", &mut t.opt_g)?;
        ck.load_adam("disc", &mut t.opt_d)?;
        t.step = ck.header.step;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.images.len() / self.cfg.batch_size
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.gan_epochs * self.steps_per_epoch();
        if self.cfg.max_steps > 0 {
            full.min(self.cfg.max_steps)
        } else {
            full
        }
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch()
    }

    /// Records of step `step`, each with at most `m_max` regions chosen
    /// uniformly (layout order kept).
    fn batch(&self, step: usize) -> Result<Batch<T>> {
        let (spe, b) = (self.steps_per_epoch(), self.cfg.batch_size);
        let order = epoch_order(self.cfg.seed, step / spe, self.images.len());
        let pos = step % spe;
        let mut rng = stream_rng(self.cfg.seed, 0x7265_0000_0000 + step as u64);
        let mut batch = Batch {
            real: Tensor::zeros(&[0]),
            boxes: Vec::with_capacity(b),
            captions: Vec::new(),
            counts: Vec::with_capacity(b),
        };
        let mut imgs = Vec::with_capacity(b);
        for &i in &order[pos * b..(pos + 1) * b] {
            let regions = &self.layouts[i].regions;
            let mut keep: Vec<usize> = if regions.len() > self.cfg.m_max {
                sample(&mut rng, regions.len(), self.cfg.m_max).into_vec()
            } else {
                (0..regions.len()).collect()
            };
            keep.sort_unstable();
            if keep.is_empty() {
                return Err(DtcError::InvalidInput(format!("training image {i} has no regions")));
            }
            batch.boxes.push(keep.iter().map(|&k| regions[k].bbox).collect());
            batch.captions.extend(keep.iter().map(|&k| regions[k].caption.clone()));
            batch.counts.push(keep.len());
            imgs.push(self.images[i].clone());
        }
        batch.real = Tensor::stack(&imgs)?;
        Ok(batch)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let step = self.step;
        let epoch = self.epoch();
        let cfg = self.cfg.clone();
        let w = cfg.loss_weights();
        let batch = self.batch(step)?;
        let n: usize = batch.counts.iter().sum();
        let bsz = batch.counts.len();
        let enc = &self.model.encoders;

        // Frozen caption features.
        let seqs = batch
            .captions
            .iter()
            .map(|c| enc.tokenize(c))
            .collect::<Result<Vec<_>>>()?;
        let (words, lengths, e) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &enc.text_store, Mode::Eval);
            let tb = enc.text.forward(&ctx, &seqs)?;
            (tb.words.value().as_ref().clone(), tb.lengths, tb.sentence.value().as_ref().clone())
        };
        let caps: Vec<&str> = batch.captions.iter().map(String::as_str).collect();
        let mis = mismatch_indices(&caps, &mut stream_rng(cfg.seed, 0x6d69_0000_0000 + step as u64));
        let e_mis = rows(&e, &mis)?;

        // Latents.
        let mut zr = stream_rng(cfg.seed, 0x7a00_0000_0000 + step as u64);
        let z_img = Tensor::<T>::randn(&[bsz, cfg.d_img], 1.0, &mut zr);
        let mut mats = Vec::with_capacity(bsz);
        let mut at = 0;
        for &c in &batch.counts {
            let idx: Vec<usize> = (at..at + c).collect();
            mats.push(EmbeddingMatrix {
                z: Tensor::randn(&[c, cfg.d_z], 1.0, &mut zr),
                e: rows(&e, &idx)?,
            });
            at += c;
        }
        let s = EmbeddingMatrix::batch(&mats, cfg.m_max)?;

        let gan = self.model.gan.as_ref().expect("trainer owns a GAN");
        let gg = Graph::new();
        let gctx = Ctx::new(&gg, &gan.g_store, Mode::Train);
        let fake = gan
            .generator
            .forward(&gctx, gg.constant(z_img), gg.constant(s), &batch.boxes)?
            .image;

        // Discriminator update on real and detached fake images in one pass.
        let (d_image, d_region, d_value, d_grads) = {
            let dg = Graph::new();
            let dctx = Ctx::new(&dg, &gan.d_store, Mode::Train);
            let both = Tensor::stack(&[batch.real.clone(), fake.value().as_ref().clone()])?
                .reshape(&[2 * bsz, 3, cfg.resolution, cfg.resolution])?;
            let boxes2: Vec<Vec<BBox>> = batch.boxes.iter().chain(&batch.boxes).cloned().collect();
            let e2 = dg.constant(Tensor::stack(&[e.clone(), e.clone()])?.reshape(&[2 * n, cfg.d_e])?);
            let d = &gan.discriminator;
            let out = d.discriminate(&dctx, dg.constant(both), &boxes2, e2)?;
            let (s_x_real, s_x_fake) = (out.s_x.narrow(0, 0, bsz), out.s_x.narrow(0, bsz, bsz));
            let s_r_real = out.s_r.narrow(0, 0, n);
            let s_r_fake = out.s_r.narrow(0, n, n);
            let (s_r_mis, _) = d.condition(&dctx, out.phi.narrow(0, 0, n), dg.constant(e_mis))?;
            let l_x = d_hinge_image(s_x_real, s_x_fake)?;
            let l_r = d_hinge_region(s_r_real, s_r_fake, s_r_mis, &batch.counts)?;
            let total = d_total(l_x, l_r, &w);
            let vx = check_finite("d_image", l_x.item().as_f64())?;
            let vr = check_finite("d_region", l_r.item().as_f64())?;
            let vt = check_finite("d_total", total.item().as_f64())?;
            let grads = dg.backward(total);
            (vx, vr, vt, gan.d_store.collect_grads(&grads))
        };
        {
            let gan = self.model.gan.as_mut().expect("trainer owns a GAN");
            self.opt_d.step(&mut gan.d_store, &d_grads);
        }

        // Generator update against the refreshed discriminator.
        let gan = self.model.gan.as_ref().expect("trainer owns a GAN");
        let enc = &self.model.encoders;
        let dctx = Ctx::new(&gg, &gan.d_store, Mode::Eval);
        let real = gg.constant(batch.real.clone());
        let ev = gg.constant(e.clone());
        let d = &gan.discriminator;
        let out_fake = d.discriminate(&dctx, fake, &batch.boxes, ev)?;
        let zero = || gg.constant(Tensor::scalar(T::zero()));
        let g_adv = g_adversarial(out_fake.s_x, out_fake.s_r, &batch.counts, &w)?;
        let damsm = if w.damsm > 0.0 {
            let ictx = Ctx::new(&gg, &enc.image_store, Mode::Eval);
            let img = enc.image.encode_regions(&ictx, fake, &batch.boxes)?;
            let text = TextSide {
                words: gg.constant(words),
                lengths,
                sentence: gg.constant(e.clone()),
            };
            damsm_loss(&img, &text, &cfg.damsm())?
        } else {
            zero()
        };
        let mmrfm = if w.mmrfm > 0.0 {
            let out_real = d.discriminate(&dctx, real, &batch.boxes, ev)?;
            mmrfm_loss(out_real.f, out_fake.f)?
        } else {
            zero()
        };
        let (perc, pixel) = if w.perceptual > 0.0 || w.pixel > 0.0 {
            match &self.model.oracle {
                Some(o) => {
                    let octx = Ctx::new(&gg, &o.store, Mode::Eval);
                    reconstruction_losses(&octx, real, fake, &o.oracle)?
                }
                None if w.perceptual > 0.0 => {
                    return Err(DtcError::Config("the perceptual term needs the oracle".into()))
                }
                None => (zero(), (real - fake).abs().mean()),
            }
        } else {
            (zero(), zero())
        };
        fn scaled<'g, T: Scalar>(v: Var<'g, T>, c: f64) -> Var<'g, T> {
            v.mul_scalar(T::lit(c))
        }
        let g_total = g_adv + scaled(damsm, w.damsm) + scaled(mmrfm, w.mmrfm) + scaled(perc, w.perceptual) + scaled(pixel, w.pixel);
        let rec = StepLosses {
            step,
            epoch,
            d_image,
            d_region,
            d_total: d_value,
            g_adv: check_finite("g_adversarial", g_adv.item().as_f64())?,
            damsm: check_finite("damsm", damsm.item().as_f64())?,
            mmrfm: check_finite("mmrfm", mmrfm.item().as_f64())?,
            perceptual: check_finite("perceptual", perc.item().as_f64())?,
            pixel: check_finite("pixel", pixel.item().as_f64())?,
            g_total: check_finite("g_total", g_total.item().as_f64())?,
        };
        let grads = gg.backward(g_total);
        let g_grads = gan.g_store.collect_grads(&grads);
        drop(grads);
        let gan = self.model.gan.as_mut().expect("trainer owns a GAN");
        self.opt_g.step(&mut gan.g_store, &g_grads);
        if let Some(ema) = gan.ema.as_mut() {
            ema.ema_update(&gan.g_store, cfg.g_ema_decay);
        }
        self.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.epoch(), self.step);
        ck.insert_adam("gen", &self.opt_g);
        ck.insert_adam("disc", &self.opt_d);
        ck
    }

    /// Trains to the configured length. With `out`, writes `gan_step{N}.dtck`
    /// at the cadence and `gan.dtck` at the end.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        let total = self.total_steps();
        while self.step < total {
            let rec = self.train_step()?;
            if rec.step % 20 == 0 {
                log::info!(
                    "gan step {} epoch {}: d {:.4} g {:.4}",
                    rec.step,
                    rec.epoch,
                    rec.d_total,
                    rec.g_total
                );
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint().save(dir.join(format!("gan_step{}.dtck", self.step)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(dir.join("gan.dtck"))?;
        }
        Ok(())
    }
}

/// Adversarial training from a pretraining checkpoint (or a resume point).
pub fn train_gan<T: Scalar>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    damsm: &Model<T>,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<GanTrainer<T>> {
    let mut t = match resume {
        Some(ck) => GanTrainer::resume(manifest, cfg, ck)?,
        None => GanTrainer::new(manifest, cfg, damsm)?,
    };
    t.run(out)?;
    Ok(t)
}

#[cfg(test)]
mod tests;
