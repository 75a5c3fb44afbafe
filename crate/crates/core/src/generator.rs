//! Layout-conditioned generator with mask-weighted, text-sensitive
//! feature modulation.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SamplePlan, SamplePoint, Var};
use crate::error::{DtcError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Linear, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::scene::BBox;
use crate::tensor::Tensor;

/// Lower clamp on the modulation weight denominator.
pub const LATS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub d_img: usize,
    pub d_z: usize,
    pub d_e: usize,
    pub base_channels: usize,
    pub min_channels: usize,
    pub mask_size: usize,
    pub max_regions: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 64,
            d_img: 128,
            d_z: 128,
            d_e: 128,
            base_channels: 256,
            min_channels: 32,
            mask_size: 16,
            max_regions: 6,
        }
    }
}

impl GeneratorConfig {
    pub fn d_s(&self) -> usize {
        self.d_z + self.d_e
    }

    /// Number of doubling blocks from the 4×4 base.
    pub fn num_blocks(&self) -> Result<usize> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(DtcError::Config(format!("resolution {r} must be a power of two >= 8")));
        }
        Ok(r.trailing_zeros() as usize - 2)
    }

    /// Output channels of block `k` (0-based).
    pub fn block_channels(&self, k: usize) -> usize {
        (self.base_channels >> (k + 1)).max(self.min_channels).min(self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.num_blocks()?;
        if self.mask_size < 4 || !self.mask_size.is_power_of_two() {
            return Err(DtcError::Config("mask_size must be a power of two >= 4".into()));
        }
        if self.max_regions == 0 || self.d_img == 0 || self.d_e == 0 || self.base_channels == 0 {
            return Err(DtcError::Config("generator dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Per-region rows `z_i ‖ e_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T> {
    /// `[m, d_z]`
    pub z: Tensor<T>,
    /// `[m, d_e]`
    pub e: Tensor<T>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn m(&self) -> usize {
        self.z.shape()[0]
    }

    /// `S`, shape `[m, d_z + d_e]`.
    pub fn s(&self) -> Tensor<T> {
        let (m, dz, de) = (self.m(), self.z.shape()[1], self.e.shape()[1]);
        let mut out = Vec::with_capacity(m * (dz + de));
        for i in 0..m {
            out.extend_from_slice(&self.z.data()[i * dz..(i + 1) * dz]);
            out.extend_from_slice(&self.e.data()[i * de..(i + 1) * de]);
        }
        Tensor::new(&[m, dz + de], out)
    }

    /// Stacks several matrices into `[B, m_max, d_s]`, zero-padding missing rows.
    pub fn batch(items: &[EmbeddingMatrix<T>], m_max: usize) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| DtcError::InvalidInput("empty batch".into()))?;
        let ds = first.z.shape()[1] + first.e.shape()[1];
        let mut out = vec![T::zero(); items.len() * m_max * ds];
        for (b, it) in items.iter().enumerate() {
            if it.m() > m_max {
                return Err(DtcError::InvalidInput(format!("{} regions exceed m_max {m_max}", it.m())));
            }
            let s = it.s();
            if s.shape()[1] != ds {
                return Err(DtcError::Shape("embedding widths differ across the batch".into()));
            }
            out[b * m_max * ds..b * m_max * ds + s.numel()].copy_from_slice(s.data());
        }
        Ok(Tensor::new(&[items.len(), m_max, ds], out))
    }
}

/// Concatenates region latents with caption embeddings. `z` of `None` draws
/// fresh standard-normal latents of width `d_z`.
pub fn build_embedding_matrix<T: Scalar, R: Rng + ?Sized>(
    e: &[Tensor<T>],
    z: Option<Tensor<T>>,
    d_z: usize,
    rng: &mut R,
) -> Result<EmbeddingMatrix<T>> {
    let m = e.len();
    if m == 0 {
        return Err(DtcError::InvalidInput("embedding matrix needs at least one region".into()));
    }
    let de = e[0].numel();
    if e.iter().any(|t| t.ndim() != 1 || t.numel() != de) {
        return Err(DtcError::Shape("caption embeddings differ in dimension".into()));
    }
    let z = match z {
        Some(z) if z.shape() != [m, d_z] => {
            return Err(DtcError::Shape(format!("Z_r must be [{m}, {d_z}], got {:?}", z.shape())))
        }
        Some(z) => z,
        None => Tensor::randn(&[m, d_z], 1.0, rng),
    };
    let mut ed = Vec::with_capacity(m * de);
    for t in e {
        ed.extend_from_slice(t.data());
    }
    Ok(EmbeddingMatrix {
        z,
        e: Tensor::new(&[m, de], ed),
    })
}

/// Grid cells `(y0..y1, x0..x1)` that overlap `b` with positive area.
pub fn footprint(b: &BBox, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let lo = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n);
    let hi = |v: f64, n: usize| ((v * n as f64).ceil().max(0.0) as usize).min(n);
    let span = |a: f64, z: f64, n: usize| {
        if z > a {
            (lo(a, n), hi(z, n))
        } else {
            (lo(a, n), lo(a, n))
        }
    };
    let (y0, y1) = span(b.y1(), b.y2(), h);
    let (x0, x1) = span(b.x1(), b.x2(), w);
    (y0, y1, x0, x1)
}

/// Sampling plan that resizes each region's `k×k` patch into its box footprint
/// on an `h×w` grid. Regions are laid out `[B, m_max]`; missing ones sample zero.
pub fn mask_plan<T: Scalar>(
    boxes: &[Vec<BBox>],
    m_max: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Result<SamplePlan<T>> {
    let b = boxes.len();
    let mut points = vec![SamplePoint::inactive(); b * m_max * h * w];
    for (bi, regions) in boxes.iter().enumerate() {
        if regions.len() > m_max {
            return Err(DtcError::InvalidInput(format!(
                "{} regions exceed m_max {m_max}",
                regions.len()
            )));
        }
        for (ri, bx) in regions.iter().enumerate() {
            let (y0, y1, x0, x1) = footprint(bx, h, w);
            if y0 >= y1 || x0 >= x1 {
                return Err(DtcError::EmptyFootprint { index: ri, h, w });
            }
            let group = bi * m_max + ri;
            for py in y0..y1 {
                let v = ((py as f64 + 0.5) / h as f64 - bx.y1()) / bx.height() * k as f64 - 0.5;
                for px in x0..x1 {
                    let u = ((px as f64 + 0.5) / w as f64 - bx.x1()) / bx.width() * k as f64 - 0.5;
                    points[group * h * w + py * w + px] = SamplePoint::new(group, v, u);
                }
            }
        }
    }
    Ok(SamplePlan::new(b * m_max, k, k, b * m_max, h * w, &points))
}

/// Places `[B·m_max, 1, k, k]` patches onto the grid, giving `[B, m_max, h, w]`.
pub fn place_masks<'g, T: Scalar>(
    patches: Var<'g, T>,
    plan: Rc<SamplePlan<T>>,
    batch: usize,
    m_max: usize,
    h: usize,
    w: usize,
) -> Var<'g, T> {
    patches.bilinear_gather(plan).reshape(&[batch, m_max, h, w])
}

/// Mask-weighted modulation of normalised features.
///
/// `xhat: [B, C, h, w]`, `gamma`/`beta: [B, M, C]`, `masks: [B, M, h, w]`
/// (already zero outside each box), `gamma_bg`/`beta_bg: [C]`.
pub fn lats_modulate<'g, T: Scalar>(
    xhat: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    masks: Var<'g, T>,
    gamma_bg: Var<'g, T>,
    beta_bg: Var<'g, T>,
) -> Var<'g, T> {
    let g = xhat.graph();
    let xs = xhat.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let m = masks.shape()[1];
    let wts = masks.reshape(&[b, m, h * w]);
    let sum_w = wts.sum_axis(1, true);
    let one = g.constant(Tensor::scalar(T::one()));
    let w_bg = (one - sum_w).relu();
    let eps = T::lit(LATS_EPS);
    let denom = (sum_w + w_bg).add_scalar(-eps).relu().add_scalar(eps);
    let mix = |region: Var<'g, T>, bg: Var<'g, T>| {
        let fg = region.permute(&[0, 2, 1]).matmul(wts);
        (fg + bg.reshape(&[1, c, 1]) * w_bg) / denom
    };
    let gh = mix(gamma, gamma_bg).reshape(&[b, c, h, w]);
    let bh = mix(beta, beta_bg).reshape(&[b, c, h, w]);
    gh * xhat + bh
}

/// Batch normalisation followed by [`lats_modulate`] with `γ_i = 1 + Aγ S_i`,
/// `β_i = Aβ S_i` and learned background parameters.
#[derive(Clone, Debug)]
pub struct LatsNorm {
    bn: BatchNorm2d,
    proj: Linear,
    gamma_bg: ParamId,
    beta_bg: ParamId,
    pub channels: usize,
}

impl LatsNorm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d_s: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), d_s, 2 * channels, true, rng);
        let wgt = store.get_mut(proj.weight);
        *wgt = wgt.scale(T::lit(0.1));
        LatsNorm {
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels, false),
            proj,
            gamma_bg: store.add(format!("{name}.gamma_bg"), Tensor::ones(&[channels])),
            beta_bg: store.add(format!("{name}.beta_bg"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    /// Per-region `(γ, β)`, each `[B, M, C]`.
    pub fn region_params<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, s: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let ss = s.shape();
        let (b, m, ds) = (ss[0], ss[1], ss[2]);
        let c = self.channels;
        let p = self.proj.forward(ctx, s.reshape(&[b * m, ds])).reshape(&[b, m, 2 * c]);
        (p.narrow(2, 0, c).add_scalar(T::one()), p.narrow(2, c, c))
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        x: Var<'g, T>,
        s: Var<'g, T>,
        masks: Var<'g, T>,
    ) -> Var<'g, T> {
        let xhat = self.bn.normalize(ctx, x);
        let (gamma, beta) = self.region_params(ctx, s);
        lats_modulate(xhat, gamma, beta, masks, ctx.p(self.gamma_bg), ctx.p(self.beta_bg))
    }
}

/// Maps each row of `S` to a `k×k` logit patch.
#[derive(Clone, Debug)]
struct MaskNet {
    fc: Linear,
    convs: Vec<Conv2d>,
    out: Conv2d,
    base: usize,
}

const MASK_BASE_CHANNELS: usize = 64;

impl MaskNet {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, d_s: usize, k: usize, rng: &mut R) -> Self {
        let c = MASK_BASE_CHANNELS;
        let ups = k.trailing_zeros() as usize - 2;
        let fc = Linear::new(store, "gen.mask.fc", d_s, c * 16, true, rng);
        let convs = (0..ups)
            .map(|i| Conv2d::new(store, &format!("gen.mask.conv{i}"), c, c, 3, 1, 1, rng))
            .collect();
        let out = Conv2d::new(store, "gen.mask.out", c, 1, 3, 1, 1, rng);
        MaskNet { fc, convs, out, base: c }
    }

    /// Logits `[B·M, 1, k, k]` for `s: [B, M, d_s]`.
    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, s: Var<'g, T>) -> Var<'g, T> {
        let ss = s.shape();
        let n = ss[0] * ss[1];
        let mut h = self
            .fc
            .forward(ctx, s.reshape(&[n, ss[2]]))
            .reshape(&[n, self.base, 4, 4])
            .relu();
        for conv in &self.convs {
            h = conv.forward(ctx, h.upsample_nearest2d(2)).relu();
        }
        self.out.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    norm1: LatsNorm,
    conv1: Conv2d,
    norm2: LatsNorm,
    conv2: Conv2d,
    shortcut: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    fc: Linear,
    masks: MaskNet,
    blocks: Vec<UpBlock>,
    out_bn: BatchNorm2d,
    out_conv: Conv2d,
}

/// Everything the losses need from one generator pass.
pub struct GenOutput<'g, T: Scalar> {
    /// `[B, 3, H, W]` in [-1, 1].
    pub image: Var<'g, T>,
    /// Sigmoid mask patches `[B·M, 1, k, k]`.
    pub mask_patches: Var<'g, T>,
}

/// Checks the per-item region count and box geometry.
pub fn validate_layout(boxes: &[Vec<BBox>], m_max: usize) -> Result<()> {
    if boxes.is_empty() {
        return Err(DtcError::InvalidInput("empty batch".into()));
    }
    for regions in boxes {
        if regions.is_empty() {
            return Err(DtcError::InvalidInput("layout has no regions".into()));
        }
        if regions.len() > m_max {
            return Err(DtcError::InvalidInput(format!(
                "layout has {} regions, m_max is {m_max}",
                regions.len()
            )));
        }
        for (i, b) in regions.iter().enumerate() {
            let v = b.0;
            if v.iter().any(|x| !x.is_finite()) || v[0] < 0.0 || v[1] < 0.0 || v[2] > 1.0 || v[3] > 1.0 {
                return Err(DtcError::InvalidInput(format!("region {i} box outside [0, 1]")));
            }
            if v[0] >= v[2] || v[1] >= v[3] {
                return Err(DtcError::InvalidInput(format!("region {i} box has no area")));
            }
        }
    }
    Ok(())
}

impl Generator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d_s = config.d_s();
        let c0 = config.base_channels;
        let fc = Linear::new(store, "gen.fc", config.d_img, c0 * 16, true, rng);
        let masks = MaskNet::new(store, d_s, config.mask_size, rng);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for k in 0..config.num_blocks()? {
            let cout = config.block_channels(k);
            let n = format!("gen.block{k}");
            blocks.push(UpBlock {
                norm1: LatsNorm::new(store, &format!("{n}.norm1"), cin, d_s, rng),
                conv1: Conv2d::new(store, &format!("{n}.conv1"), cin, cout, 3, 1, 1, rng),
                norm2: LatsNorm::new(store, &format!("{n}.norm2"), cout, d_s, rng),
                conv2: Conv2d::new(store, &format!("{n}.conv2"), cout, cout, 3, 1, 1, rng),
                shortcut: Conv2d::new(store, &format!("{n}.shortcut"), cin, cout, 1, 1, 0, rng),
            });
            cin = cout;
        }
        Ok(Generator {
            config,
            fc,
            masks,
            out_bn: BatchNorm2d::new(store, "gen.out_bn", cin, true),
            out_conv: Conv2d::new(store, "gen.out_conv", cin, 3, 3, 1, 1, rng),
            blocks,
        })
    }

    /// Sigmoid mask patches `[B·M, 1, k, k]`.
    pub fn mask_patches<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, s: Var<'g, T>) -> Var<'g, T> {
        self.masks.forward(ctx, s).sigmoid()
    }

    /// Region masks `[B, M, h, w]` on a `res×res` grid.
    pub fn predict_masks<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        s: Var<'g, T>,
        boxes: &[Vec<BBox>],
        res: usize,
    ) -> Result<Var<'g, T>> {
        let patches = self.mask_patches(ctx, s);
        let m = self.config.max_regions;
        let plan = mask_plan(boxes, m, self.config.mask_size, res, res)?;
        Ok(place_masks(patches, Rc::new(plan), boxes.len(), m, res, res))
    }

    /// `z_img: [B, d_img]`, `s: [B, m_max, d_s]` (zero rows past each item's regions).
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        z_img: Var<'g, T>,
        s: Var<'g, T>,
        boxes: &[Vec<BBox>],
    ) -> Result<GenOutput<'g, T>> {
        let cfg = &self.config;
        let m = cfg.max_regions;
        validate_layout(boxes, m)?;
        let b = boxes.len();
        if z_img.shape() != [b, cfg.d_img] || s.shape() != [b, m, cfg.d_s()] {
            return Err(DtcError::Shape(format!(
                "generator inputs z {:?}, S {:?} for batch {b}",
                z_img.shape(),
                s.shape()
            )));
        }
        let patches = self.mask_patches(ctx, s);
        let mut grids: HashMap<usize, Var<'g, T>> = HashMap::new();
        let mut masks_at = |res: usize| -> Result<Var<'g, T>> {
            if let Some(v) = grids.get(&res) {
                return Ok(*v);
            }
            let plan = mask_plan(boxes, m, cfg.mask_size, res, res)?;
            let v = place_masks(patches, Rc::new(plan), b, m, res, res);
            grids.insert(res, v);
            Ok(v)
        };
        let mut h = self
            .fc
            .forward(ctx, z_img)
            .reshape(&[b, cfg.base_channels, 4, 4]);
        let mut res = 4;
        for blk in &self.blocks {
            let m_in = masks_at(res)?;
            let m_out = masks_at(res * 2)?;
            let y = blk.norm1.forward(ctx, h, s, m_in).relu().upsample_nearest2d(2);
            let y = blk.conv1.forward(ctx, y);
            let y = blk.norm2.forward(ctx, y, s, m_out).relu();
            let y = blk.conv2.forward(ctx, y);
            h = y + blk.shortcut.forward(ctx, h.upsample_nearest2d(2));
            res *= 2;
        }
        let image = self
            .out_conv
            .forward(ctx, self.out_bn.forward(ctx, h).relu())
            .tanh();
        Ok(GenOutput {
            image,
            mask_patches: patches,
        })
    }

    /// One image `[3, H, W]` in evaluation mode.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_img: &Tensor<T>,
        s: &EmbeddingMatrix<T>,
        boxes: &[BBox],
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, Mode::Eval);
        if s.m() != boxes.len() {
            return Err(DtcError::InvalidInput("one embedding row per box required".into()));
        }
        let z = g.constant(z_img.clone().reshape(&[1, self.config.d_img])?);
        let sb = g.constant(EmbeddingMatrix::batch(std::slice::from_ref(s), self.config.max_regions)?);
        let out = self.forward(&ctx, z, sb, &[boxes.to_vec()])?;
        Ok(out.image.value().index0(0))
    }
}
