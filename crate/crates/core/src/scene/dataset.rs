use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_layout, image_to_tensor, render_scene, sample_scene, Layout, ObjectSpec, Region, SceneConfig, SceneSpec};
use crate::error::{DtcError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HEADER_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DtcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DtcError::InvalidInput(format!("unknown split '{s}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Relative split weights; images are assigned by index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 80,
            val: 10,
            test: 10,
        }
    }
}

impl SplitRatios {
    /// `(train, val, test)` counts for `n` images; test takes the remainder.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = (self.train + self.val + self.test) as usize;
        if total == 0 {
            return Err(DtcError::Config("split weights sum to zero".into()));
        }
        let train = n * self.train as usize / total;
        let val = n * self.val as usize / total;
        Ok((train, val, n - train - val))
    }

    fn split_of(&self, index: usize, n: usize) -> Result<Split> {
        let (train, val, _) = self.counts(n)?;
        Ok(if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        })
    }
}

/// One image's manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub seed: u64,
    pub split: Split,
    pub regions: Vec<RegionRecord>,
    pub objects: Vec<ObjectSpec>,
}

pub type RegionRecord = Region;

impl ManifestRecord {
    pub fn layout(&self) -> Layout {
        Layout {
            regions: self.regions.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub n_images: usize,
    pub counts: SplitCounts,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub header: DatasetHeader,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let header: DatasetHeader = serde_json::from_slice(&fs::read(root.join(HEADER_FILE))?)?;
        if header.format_version != FORMAT_VERSION {
            return Err(DtcError::InvalidInput(format!(
                "dataset format {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let file = fs::File::open(root.join(MANIFEST_FILE))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(DatasetManifest {
            root,
            header,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn scene(&self, record: &ManifestRecord) -> SceneSpec {
        SceneSpec {
            objects: record.objects.clone(),
            canvas: (self.header.scene.height, self.header.scene.width),
            seed: record.seed,
        }
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<RgbImage> {
        Ok(image::open(self.image_path(record))?.to_rgb8())
    }

    /// The record's image as a `[3, H, W]` tensor in `[-1, 1]`.
    pub fn load_tensor<T: Scalar>(&self, record: &ManifestRecord) -> Result<Tensor<T>> {
        Ok(image_to_tensor(&self.load_image(record)?))
    }
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-image seed, independent of build order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(mix(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Scene and layout for one derived seed.
pub fn synthesize(image_seed: u64, cfg: &SceneConfig) -> Result<(SceneSpec, Layout)> {
    let scene = sample_scene(image_seed, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(image_seed ^ 0x4C41_594F_5554));
    let layout = build_layout(&scene, cfg, &mut rng)?;
    Ok((scene, layout))
}

/// Renders `n_images` scenes into `out/images/` and writes the manifest and header.
pub fn build_dataset(
    n_images: usize,
    out: impl AsRef<Path>,
    seed: u64,
    splits: SplitRatios,
    cfg: &SceneConfig,
) -> Result<DatasetManifest> {
    if n_images < 1 {
        return Err(DtcError::InvalidInput("n_images must be at least 1".into()));
    }
    cfg.validate()?;
    let root = out.as_ref().to_path_buf();
    fs::create_dir_all(root.join("images"))?;
    let (train, val, test) = splits.counts(n_images)?;
    let mut records = Vec::with_capacity(n_images);
    for index in 0..n_images {
        let image_seed = derive_seed(seed, index as u64);
        let (scene, layout) = synthesize(image_seed, cfg)?;
        let rel = format!("images/{index:06}.png");
        render_scene(&scene)?.save_with_format(root.join(&rel), image::ImageFormat::Png)?;
        records.push(ManifestRecord {
            image: rel,
            seed: image_seed,
            split: splits.split_of(index, n_images)?,
            regions: layout.regions,
            objects: scene.objects,
        });
    }
    let mut w = BufWriter::new(fs::File::create(root.join(MANIFEST_FILE))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        seed,
        n_images,
        counts: SplitCounts { train, val, test },
        scene: cfg.clone(),
    };
    fs::write(root.join(HEADER_FILE), serde_json::to_vec_pretty(&header)?)?;
    Ok(DatasetManifest {
        root,
        header,
        records,
    })
}
