use image::RgbImage;

use super::{ObjectSpec, SceneSpec, Shape, Texture};
use crate::error::{DtcError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mid-gray canvas colour.
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

const SUPERSAMPLE: usize = 4;
/// Inner radius of an outlined shape relative to its outer radius.
const OUTLINE_INNER: f64 = 0.6;
/// Half-side of a square relative to the object radius.
const SQUARE_HALF: f64 = 0.8;

fn inside_shape(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs().max(dy.abs()) <= r * SQUARE_HALF,
        Shape::Triangle => {
            // Upward equilateral triangle inscribed in the circle of radius r.
            if dy < -r || dy > r * 0.5 {
                return false;
            }
            let half_base = r * 3f64.sqrt() / 2.0;
            dx.abs() <= (dy + r) / (1.5 * r) * half_base
        }
    }
}

fn covers(obj: &ObjectSpec, dx: f64, dy: f64, scale: f64) -> bool {
    let r = obj.radius * scale;
    match obj.texture {
        Texture::Solid => inside_shape(obj.shape, dx, dy, r),
        Texture::Outlined => {
            inside_shape(obj.shape, dx, dy, r) && !inside_shape(obj.shape, dx, dy, r * OUTLINE_INNER)
        }
    }
}

/// Rasterises objects in order onto the gray canvas with 4×4 supersampled
/// coverage. Fully covered pixels take the exact object colour.
pub fn render_scene(scene: &SceneSpec) -> Result<RgbImage> {
    let (h, w) = scene.canvas;
    if h == 0 || w == 0 {
        return Err(DtcError::InvalidInput("empty canvas".into()));
    }
    let scale = h.min(w) as f64;
    let mut acc: Vec<[f64; 3]> = vec![BACKGROUND.map(f64::from); h * w];
    let n2 = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for obj in &scene.objects {
        let color = obj.color.rgb().map(f64::from);
        let (cx, cy) = (obj.center[0] * w as f64, obj.center[1] * h as f64);
        let reach = obj.radius * scale + 1.0;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        if covers(obj, x - cx, y - cy, scale) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / n2;
                    let p = &mut acc[py * w + px];
                    for c in 0..3 {
                        p[c] = a * color[c] + (1.0 - a) * p[c];
                    }
                }
            }
        }
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0 = acc[i].map(|v| v.round().clamp(0.0, 255.0) as u8);
    }
    Ok(img)
}

/// `[3, H, W]` tensor with values in [-1, 1].
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::lit(px.0[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Inverse of [`image_to_tensor`], clamping to [-1, 1].
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DtcError::Shape(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            let v = d[c * h * w + i].as_f64();
            let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
            px.0[c] = ((v + 1.0) * 127.5).round() as u8;
        }
    }
    Ok(img)
}
