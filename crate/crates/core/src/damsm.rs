//! Region-crop image encoder for the attentional matching model.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SamplePlan, SamplePoint, Var};
use crate::error::{DtcError, Result};
use crate::losses::ImageSide;
use crate::nn::{Conv2d, Ctx, Linear};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::scene::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    /// Side of the square crop fed to the encoder.
    pub crop_size: usize,
    pub channels: usize,
    /// Local feature width; must equal the text encoder's word width.
    pub word_dim: usize,
    pub d_e: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            crop_size: 32,
            channels: 32,
            word_dim: 128,
            d_e: 128,
        }
    }
}

impl ImageEncoderConfig {
    /// Side of the local feature grid.
    pub fn grid(&self) -> usize {
        self.crop_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 8 || !self.crop_size.is_multiple_of(4) {
            return Err(DtcError::Config(format!(
                "crop size {} must be a multiple of 4 and at least 8",
                self.crop_size
            )));
        }
        if self.channels == 0 || self.word_dim == 0 || self.d_e == 0 {
            return Err(DtcError::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Resamples each box of each image to a `size×size` crop, `[N, 3, size, size]`
/// in image-major region order. Differentiable in the images.
pub fn crop_regions<'g, T: Scalar>(images: Var<'g, T>, boxes: &[Vec<BBox>], size: usize) -> Result<Var<'g, T>> {
    let s = images.shape();
    if s.len() != 4 || s[0] != boxes.len() {
        return Err(DtcError::Shape(format!("images {s:?} for {} layouts", boxes.len())));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let n: usize = boxes.iter().map(Vec::len).sum();
    if n == 0 || size == 0 {
        return Err(DtcError::InvalidInput("no regions to crop".into()));
    }
    let mut points = Vec::with_capacity(n * size * size);
    for (bi, regions) in boxes.iter().enumerate() {
        for r in regions {
            let (y0, x0) = (r.y1() * h as f64, r.x1() * w as f64);
            let (sy, sx) = (r.height() * h as f64 / size as f64, r.width() * w as f64 / size as f64);
            for i in 0..size {
                for j in 0..size {
                    let y = y0 + (i as f64 + 0.5) * sy - 0.5;
                    let x = x0 + (j as f64 + 0.5) * sx - 0.5;
                    points.push(SamplePoint::new(bi, y, x));
                }
            }
        }
    }
    let plan = SamplePlan::new(b, h, w, n, size * size, &points);
    Ok(images.bilinear_gather(Rc::new(plan)).reshape(&[n, c, size, size]))
}

/// The whole canvas as a single box per image.
pub fn full_boxes(batch: usize) -> Vec<Vec<BBox>> {
    vec![vec![BBox([0.0, 0.0, 1.0, 1.0])]; batch]
}

/// Two conv stages with 2× pooling give the local grid; its rectified mean,
/// projected, is the global vector.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    local: Conv2d,
    global: Linear,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: ImageEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(ImageEncoder {
            conv1: Conv2d::new(store, "damsm.conv1", 3, c, 3, 1, 1, rng),
            conv2: Conv2d::new(store, "damsm.conv2", c, 2 * c, 3, 1, 1, rng),
            conv3: Conv2d::new(store, "damsm.conv3", 2 * c, 4 * c, 3, 1, 1, rng),
            local: Conv2d::new(store, "damsm.local", 4 * c, config.word_dim, 1, 1, 0, rng),
            global: Linear::new(store, "damsm.global", 4 * c, config.d_e, true, rng),
            config,
        })
    }

    /// `crops: [N, 3, s, s]` to local `[N, L, d_w]` and global `[N, d_e]`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, '_, T>, crops: Var<'g, T>) -> Result<ImageSide<'g, T>> {
        let s = crops.shape();
        let cs = self.config.crop_size;
        if s.len() != 4 || s[1] != 3 || s[2] != cs || s[3] != cs {
            return Err(DtcError::Shape(format!("expected [N, 3, {cs}, {cs}] crops, got {s:?}")));
        }
        let n = s[0];
        let h = self.conv1.forward(ctx, crops).leaky_relu(0.2).avg_pool2d(2);
        let h = self.conv2.forward(ctx, h).leaky_relu(0.2).avg_pool2d(2);
        let h = self.conv3.forward(ctx, h).leaky_relu(0.2);
        let g = self.config.grid();
        let local = self
            .local
            .forward(ctx, h)
            .reshape(&[n, self.config.word_dim, g * g])
            .permute(&[0, 2, 1]);
        let pooled = h.reshape(&[n, 4 * self.config.channels, g * g]).mean_axis(2, false);
        Ok(ImageSide {
            local,
            global: self.global.forward(ctx, pooled),
        })
    }

    /// Crops the boxes out of `images` and encodes them.
    pub fn encode_regions<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        images: Var<'g, T>,
        boxes: &[Vec<BBox>],
    ) -> Result<ImageSide<'g, T>> {
        self.forward(ctx, crop_regions(images, boxes, self.config.crop_size)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use crate::testutil::{grad_rel_error, probe, randn, rng};

    #[test]
    fn full_box_crop_at_native_size_is_identity() {
        let g = Graph::new();
        let x = randn(&[2, 3, 8, 8], 0);
        let c = crop_regions(g.constant(x.clone()), &full_boxes(2), 8).unwrap();
        assert!(c.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn crop_picks_the_box_pixels() {
        let g = Graph::new();
        let x = randn(&[1, 3, 8, 8], 1);
        // The top-right 4×4 quadrant at native scale.
        let c = crop_regions(g.constant(x.clone()), &[vec![BBox([0.5, 0.0, 1.0, 0.5])]], 4).unwrap();
        let v = c.value();
        for ch in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = x.data()[ch * 64 + i * 8 + j + 4];
                    assert!((v.data()[ch * 16 + i * 4 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn crop_gradient() {
        let boxes = vec![vec![BBox([0.1, 0.2, 0.7, 0.9]), BBox([0.0, 0.0, 0.5, 0.5])]];
        let e = grad_rel_error(&randn(&[1, 2, 4, 4], 2), |g, x| probe(g, crop_regions(x, &boxes, 3).unwrap()));
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn encoder_shapes() {
        let mut store = ParamStore::<f32>::new();
        let cfg = ImageEncoderConfig::default();
        let enc = ImageEncoder::new(&mut store, cfg, &mut rng(0)).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let img = g.constant(Tensor::<f32>::randn(&[2, 3, 64, 64], 1.0, &mut rng(1)));
        let boxes = vec![vec![BBox([0.1, 0.1, 0.4, 0.5])], vec![BBox([0.0, 0.5, 1.0, 1.0]), BBox([0.2, 0.2, 0.3, 0.3])]];
        let out = enc.encode_regions(&ctx, img, &boxes).unwrap();
        assert_eq!(out.local.shape(), vec![3, 64, 128]);
        assert_eq!(out.global.shape(), vec![3, 128]);
        assert!(enc.forward(&ctx, g.constant(Tensor::zeros(&[1, 3, 16, 16]))).is_err());
    }
}
