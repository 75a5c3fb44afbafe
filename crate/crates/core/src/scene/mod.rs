//! Procedural 2-D scenes of attributed shapes with region captions.
//!
//! Every scene is a pure function of `(seed, SceneConfig)`: object count,
//! attributes and placement come from one seeded ChaCha stream, rendering is
//! a fixed 4×4 supersampled rasteriser, and layouts draw from a second
//! stream derived from the same seed.

mod caption;
mod dataset;
mod layout;
mod render;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DtcError, Result};

pub use caption::{describe_object, describe_region, parse_caption, ParsedCaption, ParsedObject};
pub use dataset::{
    build_dataset, derive_seed, synthesize, DatasetHeader, DatasetManifest, ManifestRecord,
    RegionRecord, Split, SplitCounts, SplitRatios, FORMAT_VERSION, HEADER_FILE, MANIFEST_FILE,
};
pub use layout::{build_layout, padded_box, BBox, Layout, Region};
pub use render::{image_to_tensor, render_scene, tensor_to_image, BACKGROUND};

macro_rules! word_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed variant")
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

word_enum!(
    /// Eight object colours; background gray is deliberately absent.
    Color {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        Cyan => "cyan",
        Purple => "purple",
        Brown => "brown",
        White => "white",
    }
);

word_enum!(Size {
    Small => "small",
    Large => "large",
});

word_enum!(Texture {
    Solid => "solid",
    Outlined => "outlined",
});

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [235, 215, 40],
            Color::Cyan => [40, 210, 215],
            Color::Purple => [150, 50, 190],
            Color::Brown => [130, 80, 35],
            Color::White => [245, 245, 245],
        }
    }
}

/// Planar relation between the first and second object of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: &'static [Relation] = &[
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Relation along the dominant axis of displacement from `a` to `b`
    /// (image y grows downwards).
    pub fn between(a: &ObjectSpec, b: &ObjectSpec) -> Relation {
        let dx = b.center[0] - a.center[0];
        let dy = b.center[1] - a.center[1];
        if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dy > 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }

    /// Whether `a <relation> b` holds geometrically.
    pub fn holds(self, a: &ObjectSpec, b: &ObjectSpec) -> bool {
        match self {
            Relation::LeftOf => a.center[0] < b.center[0],
            Relation::RightOf => a.center[0] > b.center[0],
            Relation::Above => a.center[1] < b.center[1],
            Relation::Below => a.center[1] > b.center[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub texture: Texture,
    /// `[x, y]`, normalised to the canvas.
    pub center: [f64; 2],
    pub radius: f64,
}

impl ObjectSpec {
    /// Tight extent `[x1, y1, x2, y2]`.
    pub fn extent(&self) -> [f64; 4] {
        let [x, y] = self.center;
        let r = self.radius;
        [x - r, y - r, x + r, y + r]
    }

    pub fn distance(&self, other: &ObjectSpec) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_separation: f64,
    pub small_radius: f64,
    pub large_radius: f64,
    pub max_retries: usize,
    /// Padding added to every region box, as a fraction of the canvas.
    pub box_padding: f64,
    pub group_threshold: f64,
    pub group_probability: f64,
    /// Probability that a caption mentions an object's texture.
    pub texture_probability: f64,
    /// Maximum regions per layout.
    pub max_regions: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_objects: 3,
            max_objects: 8,
            min_separation: 0.2,
            small_radius: 0.07,
            large_radius: 0.12,
            max_retries: 500,
            box_padding: 0.06,
            group_threshold: 0.35,
            group_probability: 0.5,
            texture_probability: 0.5,
            max_regions: 6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DtcError::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty");
        }
        if !(1..=self.max_objects).contains(&self.min_objects) {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(0.0 < self.small_radius && self.small_radius < self.large_radius && self.large_radius < 0.5) {
            return bad("need 0 < small_radius < large_radius < 0.5");
        }
        if self.max_regions == 0 {
            return bad("max_regions must be positive");
        }
        for p in [self.group_probability, self.texture_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn radius(&self, size: Size) -> f64 {
        match size {
            Size::Small => self.small_radius,
            Size::Large => self.large_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    /// `(height, width)` in pixels.
    pub canvas: (usize, usize),
    pub seed: u64,
}

impl SceneSpec {
    /// Checks count, bounds and separation invariants against `cfg`.
    pub fn validate(&self, cfg: &SceneConfig) -> Result<()> {
        let n = self.objects.len();
        if n < cfg.min_objects || n > cfg.max_objects {
            return Err(DtcError::InvalidInput(format!(
                "scene has {n} objects, expected {}..={}",
                cfg.min_objects, cfg.max_objects
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let [x1, y1, x2, y2] = o.extent();
            if o.radius <= 0.0 || x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0 {
                return Err(DtcError::InvalidInput(format!("object {i} leaves the canvas")));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                if o.distance(p) < cfg.min_separation {
                    return Err(DtcError::InvalidInput(format!(
                        "objects {i} and {j} closer than min separation"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws a scene: uniform object count, uniform attributes, rejection-sampled
/// centres honouring the minimum separation.
pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = *Shape::ALL.choose(&mut rng).expect("non-empty");
        let color = *Color::ALL.choose(&mut rng).expect("non-empty");
        let size = *Size::ALL.choose(&mut rng).expect("non-empty");
        let texture = *Texture::ALL.choose(&mut rng).expect("non-empty");
        let radius = cfg.radius(size);
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let c = [
                rng.gen_range(radius..=1.0 - radius),
                rng.gen_range(radius..=1.0 - radius),
            ];
            let ok = objects.iter().all(|o| {
                let dx = o.center[0] - c[0];
                let dy = o.center[1] - c[1];
                (dx * dx + dy * dy).sqrt() >= cfg.min_separation
            });
            if ok {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or(DtcError::Placement {
            retries: cfg.max_retries,
            min_separation: cfg.min_separation,
        })?;
        objects.push(ObjectSpec {
            shape,
            color,
            size,
            texture,
            center,
            radius,
        });
    }
    Ok(SceneSpec {
        objects,
        canvas: (cfg.height, cfg.width),
        seed,
    })
}

#[cfg(test)]
mod tests;
