//! Two-headed discriminator: a global image score and caption-conditioned
//! region scores over RoIAlign features of a shared backbone.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SamplePlan, SamplePoint, Var};
use crate::error::{DtcError, Result};
use crate::nn::{Ctx, ParamStore, SnConv2d, SnLinear};
use crate::scalar::Scalar;
use crate::scene::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub backbone_channels: usize,
    pub region_dim: usize,
    pub bins: usize,
    pub d_e: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 64,
            base_channels: 32,
            backbone_channels: 256,
            region_dim: 256,
            bins: 4,
            d_e: 128,
        }
    }
}

impl DiscriminatorConfig {
    /// Down-sampling blocks that take the input to an 8×8 map.
    pub fn num_down(&self) -> Result<usize> {
        let r = self.resolution;
        if r < 16 || !r.is_power_of_two() {
            return Err(DtcError::Config(format!("resolution {r} must be a power of two >= 16")));
        }
        Ok(r.trailing_zeros() as usize - 3)
    }

    pub fn feature_size(&self) -> usize {
        8
    }
}

/// Residual block with optional 2× average-pool down-sampling.
#[derive(Clone, Debug)]
struct DBlock {
    conv1: SnConv2d,
    conv2: SnConv2d,
    shortcut: SnConv2d,
    down: bool,
    preact: bool,
}

impl DBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        down: bool,
        preact: bool,
        rng: &mut R,
    ) -> Self {
        DBlock {
            conv1: SnConv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            conv2: SnConv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            shortcut: SnConv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, 1, 0, rng),
            down,
            preact,
        }
    }

    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = if self.preact { x.relu() } else { x };
        let h = self.conv2.forward(ctx, self.conv1.forward(ctx, h).relu());
        let sc = self.shortcut.forward(ctx, x);
        if self.down {
            h.avg_pool2d(2) + sc.avg_pool2d(2)
        } else {
            h + sc
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    backbone: Vec<DBlock>,
    image_block: DBlock,
    image_out: SnLinear,
    region_proj: SnLinear,
    psi: SnLinear,
    embed_proj: SnLinear,
}

/// Pooled RoI features `[N, C]` for the regions of a batch, in image-major order.
pub struct RoiFeatures<'g, T: Scalar> {
    pub pooled: Var<'g, T>,
    /// Regions whose box was smaller than a feature cell and got widened.
    pub degenerate: Vec<bool>,
}

pub struct DiscOutput<'g, T: Scalar> {
    /// `[B]`
    pub s_x: Var<'g, T>,
    /// Region features φ, `[N, C_r]`.
    pub phi: Var<'g, T>,
    /// `[N]`
    pub s_r: Var<'g, T>,
    /// φ ⊙ P_e(e), `[N, C_r]`.
    pub f: Var<'g, T>,
    pub degenerate: Vec<bool>,
}

/// Box edges in feature-cell units, widened to at least one cell.
fn roi_extent(lo: f64, hi: f64, n: usize) -> (f64, f64, bool) {
    let (a, b) = (lo * n as f64, hi * n as f64);
    if b - a >= 1.0 {
        return (a, b, false);
    }
    let c = (0.5 * (a + b)).clamp(0.5, n as f64 - 0.5);
    (c - 0.5, c + 0.5, true)
}

/// Samples each box at the centres of a `P×P` bin grid (no coordinate
/// rounding) and averages the bins. `fmap: [B, C, h, w]`; `boxes[b]` lists
/// the regions of image `b`.
pub fn roi_align<'g, T: Scalar>(fmap: Var<'g, T>, boxes: &[Vec<BBox>], bins: usize) -> Result<RoiFeatures<'g, T>> {
    let s = fmap.shape();
    if s.len() != 4 || s[0] != boxes.len() {
        return Err(DtcError::Shape(format!(
            "feature map {s:?} for {} images",
            boxes.len()
        )));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let n: usize = boxes.iter().map(Vec::len).sum();
    if n == 0 || bins == 0 {
        return Err(DtcError::InvalidInput("no regions to pool".into()));
    }
    let mut points = Vec::with_capacity(n * bins * bins);
    let mut degenerate = Vec::with_capacity(n);
    for (bi, regions) in boxes.iter().enumerate() {
        for r in regions {
            let (y1, y2, dy) = roi_extent(r.y1(), r.y2(), h);
            let (x1, x2, dx) = roi_extent(r.x1(), r.x2(), w);
            degenerate.push(dy || dx);
            let (bh, bw) = ((y2 - y1) / bins as f64, (x2 - x1) / bins as f64);
            for i in 0..bins {
                for j in 0..bins {
                    let y = y1 + (i as f64 + 0.5) * bh - 0.5;
                    let x = x1 + (j as f64 + 0.5) * bw - 0.5;
                    points.push(SamplePoint::new(bi, y, x));
                }
            }
        }
    }
    let plan = SamplePlan::new(b, h, w, n, bins * bins, &points);
    let pooled = fmap.bilinear_gather(Rc::new(plan)).mean_axis(2, false);
    Ok(RoiFeatures { pooled, degenerate })
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let downs = config.num_down()?;
        let cb = config.backbone_channels;
        let mut backbone = Vec::new();
        let mut cin = 3;
        for k in 0..downs {
            let cout = (config.base_channels << k).min(cb);
            backbone.push(DBlock::new(store, &format!("disc.block{k}"), cin, cout, true, k > 0, rng));
            cin = cout;
        }
        backbone.push(DBlock::new(store, &format!("disc.block{downs}"), cin, cb, false, true, rng));
        Ok(Discriminator {
            config,
            backbone,
            image_block: DBlock::new(store, "disc.image_block", cb, cb, true, true, rng),
            image_out: SnLinear::new(store, "disc.image_out", cb, 1, true, rng),
            region_proj: SnLinear::new(store, "disc.region_proj", cb, config.region_dim, true, rng),
            psi: SnLinear::new(store, "disc.psi", config.region_dim, 1, true, rng),
            embed_proj: SnLinear::new(store, "disc.embed_proj", config.d_e, config.region_dim, false, rng),
        })
    }

    /// `[B, 3, R, R]` to `[B, C_b, 8, 8]`.
    pub fn backbone<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = image.shape();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(DtcError::Shape(format!("expected [B, 3, {r}, {r}] image, got {s:?}")));
        }
        Ok(self.backbone.iter().fold(image, |h, blk| blk.forward(ctx, h)))
    }

    pub fn image_score<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, features: Var<'g, T>) -> Var<'g, T> {
        let h = self.image_block.forward(ctx, features).relu();
        let s = h.shape();
        let pooled = h.reshape(&[s[0], s[1], s[2] * s[3]]).sum_axis(2, false);
        let out = self.image_out.forward(ctx, pooled);
        out.reshape(&[s[0]])
    }

    /// φ for every region: RoIAlign on the rectified backbone map, then a linear map to C_r.
    pub fn extract_region_features<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        features: Var<'g, T>,
        boxes: &[Vec<BBox>],
    ) -> Result<(Var<'g, T>, Vec<bool>)> {
        let roi = roi_align(features.relu(), boxes, self.config.bins)?;
        Ok((self.region_proj.forward(ctx, roi.pooled), roi.degenerate))
    }

    /// `(s_r, f)` for region features `phi: [N, C_r]` and embeddings `e: [N, d_e]`.
    pub fn condition<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        phi: Var<'g, T>,
        e: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (ps, es) = (phi.shape(), e.shape());
        if ps.len() != 2 || es.len() != 2 || ps[0] != es[0] || es[1] != self.config.d_e || ps[1] != self.config.region_dim {
            return Err(DtcError::Shape(format!("region features {ps:?} vs embeddings {es:?}")));
        }
        let pe = self.embed_proj.forward(ctx, e);
        let f = phi * pe;
        let s_r = self.psi.forward(ctx, phi).reshape(&[ps[0]]) + f.sum_axis(1, false);
        Ok((s_r, f))
    }

    /// One backbone pass feeding both heads. `e` holds one embedding per
    /// region, image-major.
    pub fn discriminate<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        image: Var<'g, T>,
        boxes: &[Vec<BBox>],
        e: Var<'g, T>,
    ) -> Result<DiscOutput<'g, T>> {
        if boxes.iter().any(Vec::is_empty) {
            return Err(DtcError::InvalidInput("every image needs at least one region".into()));
        }
        let n: usize = boxes.iter().map(Vec::len).sum();
        if e.shape().first() != Some(&n) {
            return Err(DtcError::Shape(format!("{n} boxes but embeddings {:?}", e.shape())));
        }
        let feats = self.backbone(ctx, image)?;
        let s_x = self.image_score(ctx, feats);
        let (phi, degenerate) = self.extract_region_features(ctx, feats, boxes)?;
        let (s_r, f) = self.condition(ctx, phi, e)?;
        Ok(DiscOutput {
            s_x,
            phi,
            s_r,
            f,
            degenerate,
        })
    }
}
