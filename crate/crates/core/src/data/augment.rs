use rand::Rng;
use serde::{Deserialize, Serialize};
use tmc_tensor::Tensor;

use super::{Prompt, Quadrant, Sample};

pub const MAX_ROTATION_DEG: f64 = 20.0;

/// One draw of the training-time geometric pipeline, applied in field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    /// Small rotation about the image centre, in degrees.
    pub theta_deg: f64,
    /// Number of 90 degree counter-clockwise turns.
    pub k: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugParams {
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            theta_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            k: rng.gen_range(0..4),
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.theta_deg == 0.0 && self.k.is_multiple_of(4) && !self.hflip && !self.vflip
    }

    /// Quadrant relabelling of the exact steps; the small rotation keeps
    /// generated regions in their quadrant.
    pub fn map_quadrant(&self, q: Quadrant) -> Quadrant {
        let mut q = q;
        for _ in 0..self.k % 4 {
            q = q.rot90();
        }
        if self.hflip {
            q = q.hflip();
        }
        if self.vflip {
            q = q.vflip();
        }
        q
    }

    /// Applies the pipeline to a `C x S x S` tensor. `nearest` selects
    /// nearest-neighbour sampling for the small rotation (masks); otherwise
    /// bilinear with edge clamping.
    pub fn apply(&self, t: &Tensor, nearest: bool) -> Tensor {
        let mut t = if self.theta_deg != 0.0 {
            rotate(t, self.theta_deg, nearest)
        } else {
            t.clone()
        };
        for _ in 0..self.k % 4 {
            t = permute(&t, |s, y, x| (x, s - 1 - y));
        }
        if self.hflip {
            t = permute(&t, |s, y, x| (y, s - 1 - x));
        }
        if self.vflip {
            t = permute(&t, |s, y, x| (s - 1 - y, x));
        }
        t
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[c, h, w] if h == w => (c, h),
        s => panic!("augmentation expects a square C x S x S tensor, got {s:?}"),
    }
}

/// `out[c, y, x] = in[c, src(y, x)]`.
fn permute(t: &Tensor, src: impl Fn(usize, usize, usize) -> (usize, usize)) -> Tensor {
    let (_, s) = dims(t);
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (c, y, x) = (i / (s * s), (i / s) % s, i % s);
        let (sy, sx) = src(s, y, x);
        d[(c * s + sy) * s + sx]
    })
}

fn rotate(t: &Tensor, deg: f64, nearest: bool) -> Tensor {
    let (_, s) = dims(t);
    let d = t.data();
    let (sin, cos) = deg.to_radians().sin_cos();
    let c0 = (s as f64 - 1.0) / 2.0;
    let last = (s - 1) as f64;
    Tensor::from_fn(t.shape(), |i| {
        let (c, y, x) = (i / (s * s), (i / s) % s, i % s);
        let (dx, dy) = (x as f64 - c0, y as f64 - c0);
        let sx = c0 + cos * dx + sin * dy;
        let sy = c0 - sin * dx + cos * dy;
        let at = |yy: usize, xx: usize| d[(c * s + yy) * s + xx];
        if nearest {
            let (ry, rx) = (sy.round(), sx.round());
            if ry < 0.0 || rx < 0.0 || ry > last || rx > last {
                0.0
            } else {
                at(ry as usize, rx as usize)
            }
        } else {
            let (cy, cx) = (sy.clamp(0.0, last), sx.clamp(0.0, last));
            let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
            let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
        }
    })
}

/// Applies `p` to image and mask and rewrites the prompt's quadrant words.
pub fn apply_augment(s: &Sample, p: AugParams) -> Sample {
    if p.is_identity() {
        return s.clone();
    }
    let mut out = s.clone();
    out.image = p.apply(&s.image, false);
    out.mask = p.apply(&s.mask, true);
    out.meta.named = Prompt::new(s.meta.named.iter().map(|&q| p.map_quadrant(q)).collect()).quadrants;
    out.prompt = Prompt::new(out.meta.named.clone()).to_string();
    out.meta.aug.push(p);
    out
}

/// Draws one pipeline instance and applies it.
pub fn augment<R: Rng>(s: &Sample, rng: &mut R) -> Sample {
    apply_augment(s, AugParams::draw(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::new(&[1, 2, 2], v).unwrap()
    }

    #[test]
    fn exact_steps() {
        // [a b; c d]
        let x = t(vec![1.0, 2.0, 3.0, 4.0]);
        let ccw = AugParams {
            k: 1,
            ..Default::default()
        };
        assert_eq!(ccw.apply(&x, true).data(), &[2.0, 4.0, 1.0, 3.0]);
        let h = AugParams {
            hflip: true,
            ..Default::default()
        };
        assert_eq!(h.apply(&x, true).data(), &[2.0, 1.0, 4.0, 3.0]);
        let v = AugParams {
            vflip: true,
            ..Default::default()
        };
        assert_eq!(v.apply(&x, true).data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn pixel_and_label_maps_agree() {
        // A single lit pixel must land in the quadrant the label map predicts.
        for k in 0..4u8 {
            for hflip in [false, true] {
                for vflip in [false, true] {
                    let p = AugParams {
                        theta_deg: 0.0,
                        k,
                        hflip,
                        vflip,
                    };
                    for q in Quadrant::ALL {
                        let (y, x) = (usize::from(!q.is_upper()) * 3, usize::from(!q.is_left()) * 3);
                        let img = Tensor::from_fn(&[1, 4, 4], |i| f64::from(u8::from(i == y * 4 + x)));
                        let out = p.apply(&img, true);
                        let j = out.data().iter().position(|&v| v == 1.0).unwrap();
                        let got = Quadrant::of_point((j / 4) as f64, (j % 4) as f64, 4);
                        assert_eq!(got, p.map_quadrant(q), "{p:?} {q:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.1);
        let p = AugParams::default();
        assert_eq!(p.apply(&x, false), x);
        let r = rotate(&x, 0.0, false);
        assert_eq!(r, x);
    }
}
