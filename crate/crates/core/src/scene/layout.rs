use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{describe_region, ObjectSpec, SceneConfig, SceneSpec};
use crate::error::{DtcError, Result};

/// Normalised `[x1, y1, x2, y2]` box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox([x1, y1, x2, y2]);
        if [x1, y1, x2, y2].iter().any(|v| !v.is_finite()) || x1 > x2 || y1 > y2 {
            return Err(DtcError::InvalidInput(format!("malformed box {:?}", b.0)));
        }
        Ok(b)
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    pub fn y1(&self) -> f64 {
        self.0[1]
    }
    pub fn x2(&self) -> f64 {
        self.0[2]
    }
    pub fn y2(&self) -> f64 {
        self.0[3]
    }

    pub fn width(&self) -> f64 {
        self.0[2] - self.0[0]
    }

    pub fn height(&self) -> f64 {
        self.0[3] - self.0[1]
    }

    pub fn contains(&self, other: &[f64; 4]) -> bool {
        self.0[0] <= other[0] && self.0[1] <= other[1] && self.0[2] >= other[2] && self.0[3] >= other[3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption: String,
    /// Indices into the scene's objects, one or two of them.
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub regions: Vec<Region>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.regions.iter().map(|r| r.caption.as_str()).collect()
    }
}

/// Union of the members' tight extents grown by `padding`, clipped to the canvas.
pub fn padded_box(members: &[&ObjectSpec], padding: f64) -> BBox {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for o in members {
        let e = o.extent();
        b[0] = b[0].min(e[0]);
        b[1] = b[1].min(e[1]);
        b[2] = b[2].max(e[2]);
        b[3] = b[3].max(e[3]);
    }
    BBox([
        (b[0] - padding).max(0.0),
        (b[1] - padding).max(0.0),
        (b[2] + padding).min(1.0),
        (b[3] + padding).min(1.0),
    ])
}

/// Groups objects into singleton and pair regions and captions each one.
///
/// Objects are visited in a random order; each unpaired object is paired
/// with its nearest unpaired neighbour within the grouping threshold with
/// probability `group_probability`. If that leaves more than `max_regions`
/// regions, the closest remaining singletons are merged until it fits.
pub fn build_layout<R: Rng + ?Sized>(scene: &SceneSpec, cfg: &SceneConfig, rng: &mut R) -> Result<Layout> {
    let objs = &scene.objects;
    let n = objs.len();
    if n == 0 {
        return Ok(Layout::default());
    }
    if n > 2 * cfg.max_regions {
        return Err(DtcError::InvalidInput(format!(
            "{n} objects cannot fit in {} regions",
            cfg.max_regions
        )));
    }
    let mut partner: Vec<Option<usize>> = vec![None; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in &order {
        if partner[i].is_some() {
            continue;
        }
        let nearest = (0..n)
            .filter(|&j| j != i && partner[j].is_none())
            .map(|j| (j, objs[i].distance(&objs[j])))
            .filter(|&(_, d)| d < cfg.group_threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = nearest {
            if rng.gen_bool(cfg.group_probability) {
                partner[i] = Some(j);
                partner[j] = Some(i);
            }
        }
    }
    let count = |p: &[Option<usize>]| p.iter().filter(|q| q.is_none()).count() + p.iter().filter(|q| q.is_some()).count() / 2;
    while count(&partner) > cfg.max_regions {
        let singles: Vec<usize> = (0..n).filter(|&i| partner[i].is_none()).collect();
        let mut best = None;
        for (a, &i) in singles.iter().enumerate() {
            for &j in &singles[a + 1..] {
                let d = objs[i].distance(&objs[j]);
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let (i, j, _) = best.expect("too many regions implies two singletons");
        partner[i] = Some(j);
        partner[j] = Some(i);
    }

    let mut regions = Vec::new();
    for i in 0..n {
        let members = match partner[i] {
            None => vec![i],
            Some(j) if j > i => vec![i, j],
            Some(_) => continue,
        };
        let refs: Vec<&ObjectSpec> = members.iter().map(|&k| &objs[k]).collect();
        let caption = describe_region(&refs, None, cfg.texture_probability, rng)?;
        regions.push(Region {
            bbox: padded_box(&refs, cfg.box_padding),
            caption,
            members,
        });
    }
    Ok(Layout { regions })
}
