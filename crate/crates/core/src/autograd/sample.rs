use std::rc::Rc;

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A bilinear sample location in pixel-index coordinates (pixel `i` has its
/// centre at `i`). Points with `active == false` produce zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub batch: usize,
    pub y: f64,
    pub x: f64,
    pub active: bool,
}

impl SamplePoint {
    pub fn new(batch: usize, y: f64, x: f64) -> Self {
        SamplePoint {
            batch,
            y,
            x,
            active: true,
        }
    }

    pub fn inactive() -> Self {
        SamplePoint {
            batch: 0,
            y: 0.0,
            x: 0.0,
            active: false,
        }
    }
}

/// Precomputed four-tap interpolation weights for a set of sample points,
/// grouped as `groups × per_group`. Coordinates are clamped to the map.
#[derive(Clone, Debug)]
pub struct SamplePlan<T> {
    batch: usize,
    h: usize,
    w: usize,
    groups: usize,
    per_group: usize,
    points: Vec<(usize, [(usize, T); 4])>,
}

impl<T: Scalar> SamplePlan<T> {
    pub fn new(
        batch: usize,
        h: usize,
        w: usize,
        groups: usize,
        per_group: usize,
        points: &[SamplePoint],
    ) -> Self {
        assert_eq!(points.len(), groups * per_group, "sample plan arity");
        let taps = points
            .iter()
            .map(|p| {
                if !p.active {
                    return (0, [(0, T::zero()); 4]);
                }
                assert!(p.batch < batch, "sample batch index out of range");
                let y = p.y.clamp(0.0, (h - 1) as f64);
                let x = p.x.clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ly, lx) = (y - y0 as f64, x - x0 as f64);
                let (hy, hx) = (1.0 - ly, 1.0 - lx);
                (
                    p.batch,
                    [
                        (y0 * w + x0, T::lit(hy * hx)),
                        (y0 * w + x1, T::lit(hy * lx)),
                        (y1 * w + x0, T::lit(ly * hx)),
                        (y1 * w + x1, T::lit(ly * lx)),
                    ],
                )
            })
            .collect();
        SamplePlan {
            batch,
            h,
            w,
            groups,
            per_group,
            points: taps,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Samples an `[B, C, H, W]` map at the plan's points, producing
    /// `[groups, C, per_group]`.
    pub fn bilinear_gather(self, plan: Rc<SamplePlan<T>>) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert!(
            s.len() == 4 && s[0] == plan.batch && s[2] == plan.h && s[3] == plan.w,
            "bilinear_gather: map {s:?} vs plan {}x{}x{}",
            plan.batch,
            plan.h,
            plan.w
        );
        let c = s[1];
        let plane = plan.h * plan.w;
        let (groups, per) = (plan.groups, plan.per_group);
        let xd = x.data();
        let mut out = vec![T::zero(); groups * c * per];
        for gi in 0..groups {
            for pi in 0..per {
                let (b, taps) = &plan.points[gi * per + pi];
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let v = taps
                        .iter()
                        .fold(T::zero(), |acc, &(o, wt)| acc + xd[base + o] * wt);
                    out[(gi * c + ch) * per + pi] = v;
                }
            }
        }
        self.graph
            .record(Tensor::new(&[groups, c, per], out), &[self], move |g, _| {
                let gd = g.data();
                let mut d = vec![T::zero(); s.iter().product()];
                for gi in 0..groups {
                    for pi in 0..per {
                        let (b, taps) = &plan.points[gi * per + pi];
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let gv = gd[(gi * c + ch) * per + pi];
                            for &(o, wt) in taps {
                                d[base + o] = d[base + o] + gv * wt;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&s, d))]
            })
    }
}
