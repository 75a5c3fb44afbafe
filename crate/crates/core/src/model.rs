//! Network bundles, their checkpoint mapping and seeded inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind};
use crate::damsm::{full_boxes, ImageEncoder};
use crate::discriminator::Discriminator;
use crate::error::{DtcError, Result};
use crate::evaluator::{AttributeAccuracy, OracleClassifier, OracleConfig};
use crate::generator::{build_embedding_matrix, validate_layout, Generator};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::scene::{derive_seed, BBox, Layout};
use crate::tensor::Tensor;
use crate::text::{tokenize, TextEncoder, TokenSeq, Vocabulary, T_MAX, T_MAX_SCENE};
use crate::trainer::TrainConfig;

/// Independent generator for one purpose (`tag`) under a run seed.
pub fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

const TAG_TEXT: u64 = 0x7465_7874;
const TAG_IMAGE: u64 = 0x696d_6167;
const TAG_GEN: u64 = 0x6765_6e00;
const TAG_DISC: u64 = 0x6469_7363;

/// Text encoder and region-crop image encoder.
#[derive(Clone, Debug)]
pub struct Encoders<T: Scalar> {
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub text_store: ParamStore<T>,
    pub image: ImageEncoder,
    pub image_store: ParamStore<T>,
}

impl<T: Scalar> Encoders<T> {
    pub fn init(cfg: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        let mut text_store = ParamStore::new();
        let text = TextEncoder::new(&mut text_store, vocab.len(), cfg.text(), &mut stream_rng(cfg.seed, TAG_TEXT));
        let mut image_store = ParamStore::new();
        let image = ImageEncoder::new(&mut image_store, cfg.image_encoder(), &mut stream_rng(cfg.seed, TAG_IMAGE))?;
        Ok(Encoders {
            vocab,
            text,
            text_store,
            image,
            image_store,
        })
    }

    pub fn tokenize(&self, caption: &str) -> Result<TokenSeq> {
        tokenize(caption, &self.vocab, T_MAX)
    }

    /// Sentence embeddings `[N, d_e]` of region captions.
    pub fn embed_captions(&self, captions: &[&str]) -> Result<Tensor<T>> {
        let seqs = captions.iter().map(|c| self.tokenize(c)).collect::<Result<Vec<_>>>()?;
        self.text.embed_sentences(&self.text_store, &seqs)
    }

    /// Sentence embeddings of whole-scene descriptions.
    pub fn embed_scenes(&self, layouts: &[Layout]) -> Result<Tensor<T>> {
        let seqs = layouts
            .iter()
            .map(|l| tokenize(&scene_description(l), &self.vocab, T_MAX_SCENE))
            .collect::<Result<Vec<_>>>()?;
        self.text.embed_sentences(&self.text_store, &seqs)
    }

    /// Global image vectors `[B, d_e]` of whole images `[3, H, W]`.
    pub fn embed_images(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let g = crate::autograd::Graph::new();
        let ctx = crate::nn::Ctx::new(&g, &self.image_store, crate::nn::Mode::Eval);
        let x = g.constant(Tensor::stack(images)?);
        let side = self.image.encode_regions(&ctx, x, &full_boxes(images.len()))?;
        Ok(side.global.value().as_ref().clone())
    }
}

/// All region captions of an image, in layout order.
pub fn scene_description(layout: &Layout) -> String {
    layout.captions().join(" ")
}

#[derive(Clone, Debug)]
pub struct GanNets<T: Scalar> {
    pub generator: Generator,
    pub g_store: ParamStore<T>,
    pub discriminator: Discriminator,
    pub d_store: ParamStore<T>,
    /// Moving average of generator weights, when enabled.
    pub ema: Option<ParamStore<T>>,
}

impl<T: Scalar> GanNets<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut g_store = ParamStore::new();
        let generator = Generator::new(&mut g_store, cfg.generator(), &mut stream_rng(cfg.seed, TAG_GEN))?;
        let mut d_store = ParamStore::new();
        let discriminator = Discriminator::new(&mut d_store, cfg.discriminator(), &mut stream_rng(cfg.seed, TAG_DISC))?;
        let ema = cfg.g_ema.then(|| g_store.clone());
        Ok(GanNets {
            generator,
            g_store,
            discriminator,
            d_store,
            ema,
        })
    }

    /// Weights used for inference.
    pub fn inference_store(&self) -> &ParamStore<T> {
        self.ema.as_ref().unwrap_or(&self.g_store)
    }
}

#[derive(Clone, Debug)]
pub struct OracleNet<T: Scalar> {
    pub oracle: OracleClassifier,
    pub store: ParamStore<T>,
    pub validation: Option<AttributeAccuracy>,
}

/// Everything a checkpoint can hold.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: TrainConfig,
    pub encoders: Encoders<T>,
    pub gan: Option<GanNets<T>>,
    pub oracle: Option<OracleNet<T>>,
}

/// One layout region for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionInput {
    pub bbox: BBox,
    pub caption: String,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated<T> {
    /// `[3, H, W]` in [-1, 1].
    pub image: Tensor<T>,
    pub global_seed: u64,
    pub region_seeds: Vec<u64>,
    /// Caption words mapped to UNK, per region.
    pub unknown_tokens: Vec<Vec<String>>,
}

const ORACLE_PROBE: &str = "oracle.feat.weight";

impl<T: Scalar> Model<T> {
    pub fn kind(&self) -> CheckpointKind {
        if self.gan.is_some() {
            CheckpointKind::Gan
        } else {
            CheckpointKind::Damsm
        }
    }

    pub fn to_checkpoint(&self, epoch: usize, step: usize) -> Checkpoint {
        let mut header = CheckpointHeader::new(self.kind(), &self.config, &self.encoders.vocab);
        header.epoch = epoch;
        header.step = step;
        header.oracle_validation = self.oracle.as_ref().and_then(|o| o.validation);
        let mut ck = Checkpoint::new(header);
        ck.insert_store("", &self.encoders.text_store);
        ck.insert_store("", &self.encoders.image_store);
        if let Some(gan) = &self.gan {
            ck.insert_store("", &gan.g_store);
            ck.insert_store("", &gan.d_store);
            if let Some(ema) = &gan.ema {
                ck.insert_store("ema.", ema);
            }
        }
        if let Some(o) = &self.oracle {
            ck.insert_store("", &o.store);
        }
        ck
    }

    /// Rebuilds the networks from the stored configuration and loads their weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.header.config.clone();
        if cfg.hash() != ck.header.config_hash {
            return Err(DtcError::Checkpoint("stored config does not match its hash".into()));
        }
        let mut encoders = Encoders::init(&cfg, ck.header.vocab.clone())?;
        ck.load_store("", &mut encoders.text_store)?;
        ck.load_store("", &mut encoders.image_store)?;
        let gan = match ck.header.kind {
            CheckpointKind::Damsm => None,
            CheckpointKind::Gan => {
                let mut nets = GanNets::init(&cfg)?;
                ck.load_store("", &mut nets.g_store)?;
                ck.load_store("", &mut nets.d_store)?;
                if let Some(ema) = nets.ema.as_mut() {
                    ck.load_store("ema.", ema)?;
                }
                Some(nets)
            }
        };
        let oracle = if ck.contains(ORACLE_PROBE) {
            let mut store = ParamStore::new();
            let oracle = OracleClassifier::new(&mut store, OracleConfig::default(), &mut stream_rng(0, 0));
            ck.load_store("", &mut store)?;
            Some(OracleNet {
                oracle,
                store,
                validation: ck.header.oracle_validation,
            })
        } else {
            None
        };
        Ok(Model {
            config: cfg,
            encoders,
            gan,
            oracle,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn gan(&self) -> Result<&GanNets<T>> {
        self.gan
            .as_ref()
            .ok_or_else(|| DtcError::Checkpoint("checkpoint holds no generator".into()))
    }

    pub fn oracle(&self) -> Result<&OracleNet<T>> {
        self.oracle
            .as_ref()
            .ok_or_else(|| DtcError::Checkpoint("checkpoint holds no oracle classifier".into()))
    }

    /// Generates one image. Missing seeds are drawn from `fresh` and
    /// returned, so repeating the call with them reproduces the image.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        regions: &[RegionInput],
        global_seed: Option<u64>,
        fresh: &mut R,
    ) -> Result<Generated<T>> {
        let gan = self.gan()?;
        let cfg = &gan.generator.config;
        let boxes: Vec<BBox> = regions.iter().map(|r| r.bbox).collect();
        validate_layout(std::slice::from_ref(&boxes), cfg.max_regions)?;
        let global_seed = global_seed.unwrap_or_else(|| fresh.gen());
        let region_seeds: Vec<u64> = regions.iter().map(|r| r.seed.unwrap_or_else(|| fresh.gen())).collect();
        let seqs = regions
            .iter()
            .map(|r| self.encoders.tokenize(&r.caption))
            .collect::<Result<Vec<_>>>()?;
        let e = self.encoders.text.embed_sentences(&self.encoders.text_store, &seqs)?;
        let rows: Vec<Tensor<T>> = (0..regions.len()).map(|i| e.index0(i)).collect();
        let mut z = Vec::with_capacity(regions.len() * cfg.d_z);
        for &s in &region_seeds {
            z.extend(Tensor::<T>::randn(&[cfg.d_z], 1.0, &mut ChaCha8Rng::seed_from_u64(s)).into_data());
        }
        let z = Tensor::from_vec(&[regions.len(), cfg.d_z], z)?;
        let s = build_embedding_matrix(&rows, Some(z), cfg.d_z, fresh)?;
        let z_img = Tensor::randn(&[cfg.d_img], 1.0, &mut ChaCha8Rng::seed_from_u64(global_seed));
        let image = gan.generator.generate(gan.inference_store(), &z_img, &s, &boxes)?;
        Ok(Generated {
            image,
            global_seed,
            region_seeds,
            unknown_tokens: seqs.into_iter().map(|s| s.unknown).collect(),
        })
    }

    /// Generates the image for a dataset layout with seeds derived from `seed`.
    pub fn generate_layout(&self, layout: &Layout, seed: u64) -> Result<Tensor<T>> {
        let regions: Vec<RegionInput> = layout
            .regions
            .iter()
            .enumerate()
            .map(|(i, r)| RegionInput {
                bbox: r.bbox,
                caption: r.caption.clone(),
                seed: Some(derive_seed(seed, i as u64 + 1)),
            })
            .collect();
        let mut unused = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.generate(&regions, Some(derive_seed(seed, 0)), &mut unused)?.image)
    }
}
