use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tmc_tensor::Tensor;

use super::{Appearance, Case, Prompt, Quadrant, Region, Sample, SceneMeta, ShapeKind};
use crate::error::{Error, Result};

/// Regions are rasterized on a lattice of `CELL x CELL` pixel cells.
pub const CELL: usize = 2;
pub const INTENSITIES: [f64; 3] = [0.55, 0.75, 0.95];
const SHAPES: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Ellipse, ShapeKind::Ring];
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub cases: usize,
    pub slices_per_case: usize,
    pub image_size: usize,
    /// Target share of ambiguous scenes among all cases.
    pub ambiguous_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 600,
            slices_per_case: 1,
            image_size: 32,
            ambiguous_fraction: 0.5,
            seed: 0,
        }
    }
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Lattice {
    /// Cells per quadrant side.
    q: usize,
    margin: usize,
    min_size: usize,
    max_size: usize,
}

impl Lattice {
    fn new(image_size: usize) -> Self {
        let q = image_size / CELL / 2;
        let margin = (0.15 * q as f64).ceil() as usize;
        let min_size = 2.max((3 * q).div_ceil(8));
        Self {
            q,
            margin,
            min_size,
            max_size: q.saturating_sub(2 * margin),
        }
    }
}

/// Cell membership of a shape inside its `w x h` bounding box.
fn inside(look: &Appearance, cx: usize, cy: usize) -> bool {
    let fx = (cx as f64 + 0.5) / look.w as f64 * 2.0 - 1.0;
    let fy = (cy as f64 + 0.5) / look.h as f64 * 2.0 - 1.0;
    let r2 = fx * fx + fy * fy;
    match look.shape {
        ShapeKind::Rect => true,
        ShapeKind::Ellipse => r2 <= 1.0,
        ShapeKind::Ring => r2 <= 1.0 && r2 > 0.25,
    }
}

/// Binary pixel mask of one region in the generation frame.
pub fn region_mask(r: &Region, size: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for cy in 0..r.look.h {
        for cx in 0..r.look.w {
            if !inside(&r.look, cx, cy) {
                continue;
            }
            let (gx, gy) = ((r.x0 + cx) * CELL, (r.y0 + cy) * CELL);
            for y in gy..gy + CELL {
                for x in gx..gx + CELL {
                    m[y * size + x] = true;
                }
            }
        }
    }
    m
}

/// Image and mask of a scene; `noise_seed` drives the background texture.
pub fn rasterize(meta: &SceneMeta, size: usize, noise_seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (fx, fy, phase): (f64, f64, f64) = (
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            0.12 + 0.05 * (fx * x + fy * y + phase).sin() + rng.gen_range(-0.06..0.06)
        })
        .collect();
    let mut mask = vec![0.0; size * size];
    for r in &meta.regions {
        let named = meta.named.contains(&r.quadrant);
        for (i, on) in region_mask(r, size).into_iter().enumerate() {
            if on {
                img[i] = r.look.intensity + rng.gen_range(-0.04..0.04);
                if named {
                    mask[i] = 1.0;
                }
            }
        }
    }
    let img: Vec<f64> = img
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    (
        Tensor::new(&[1, size, size], img).expect("square image"),
        Tensor::new(&[1, size, size], mask).expect("square mask"),
    )
}

fn draw_look(rng: &mut ChaCha8Rng, lat: &Lattice) -> Appearance {
    Appearance {
        shape: *SHAPES.choose(rng).expect("nonempty"),
        w: rng.gen_range(lat.min_size..=lat.max_size),
        h: rng.gen_range(lat.min_size..=lat.max_size),
        intensity: *INTENSITIES.choose(rng).expect("nonempty"),
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    lat: &Lattice,
    quadrant: Quadrant,
    look: Appearance,
    taken: &[Region],
) -> Result<Region> {
    let size_cells = 2 * lat.q;
    for _ in 0..MAX_ATTEMPTS {
        let qx = if quadrant.is_left() { 0 } else { lat.q };
        let qy = if quadrant.is_upper() { 0 } else { lat.q };
        let hi_x = lat.q - lat.margin;
        let hi_y = lat.q - lat.margin;
        if lat.margin + look.w > hi_x || lat.margin + look.h > hi_y {
            continue;
        }
        let x0 = qx + rng.gen_range(lat.margin..=hi_x - look.w);
        let y0 = qy + rng.gen_range(lat.margin..=hi_y - look.h);
        let r = Region {
            quadrant,
            look,
            x0,
            y0,
        };
        let clash = taken.iter().any(|t| {
            x0 < t.x0 + t.look.w && t.x0 < x0 + look.w && y0 < t.y0 + t.look.h && t.y0 < y0 + look.h
        });
        if !clash && x0 + look.w <= size_cells && y0 + look.h <= size_cells {
            return Ok(r);
        }
    }
    Err(Error::Generation(format!(
        "could not place a {}x{} region in {quadrant:?} after {MAX_ATTEMPTS} attempts",
        look.w, look.h
    )))
}

fn scene(rng: &mut ChaCha8Rng, lat: &Lattice, stratum: usize, p_amb: f64) -> Result<SceneMeta> {
    let mut quads = Quadrant::ALL.to_vec();
    quads.shuffle(rng);
    quads.truncate(stratum);
    let ambiguous = stratum >= 2 && rng.gen_bool(p_amb);
    let looks: Vec<Appearance> = if ambiguous {
        vec![draw_look(rng, lat); stratum]
    } else {
        let mut v: Vec<Appearance> = Vec::new();
        while v.len() < stratum {
            let l = draw_look(rng, lat);
            if !v.contains(&l) {
                v.push(l);
            }
        }
        v
    };
    let mut regions = Vec::with_capacity(stratum);
    for (&q, &look) in quads.iter().zip(&looks) {
        let r = place(rng, lat, q, look, &regions)?;
        regions.push(r);
    }
    let n_named = match (stratum, ambiguous) {
        (1, _) => 1,
        (2, true) => 1,
        (2, false) => 2,
        _ => rng.gen_range(1..=2),
    };
    let named = Prompt::new(quads[..n_named].to_vec()).quadrants;
    Ok(SceneMeta {
        regions,
        named,
        ambiguous,
        aug: Vec::new(),
    })
}

/// Deterministic dataset. Case `k` has `k % 3 + 1` regions; each slice of a
/// case shares the layout and redraws the texture noise.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Case>> {
    if cfg.image_size < 16 || !cfg.image_size.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "image size {} must be a multiple of 16",
            cfg.image_size
        )));
    }
    if cfg.cases == 0 || cfg.slices_per_case == 0 {
        return Err(Error::Config("case and slice counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.ambiguous_fraction) {
        return Err(Error::Config("ambiguous fraction must lie in [0, 1]".into()));
    }
    let lat = Lattice::new(cfg.image_size);
    if lat.max_size < lat.min_size {
        return Err(Error::Generation(format!(
            "image size {} leaves no room for regions",
            cfg.image_size
        )));
    }
    // Two thirds of cases have several regions; only those can be ambiguous.
    let p_amb = (1.5 * cfg.ambiguous_fraction).min(1.0);
    let width = cfg.cases.to_string().len().max(4);
    let mut cases = Vec::with_capacity(cfg.cases);
    for k in 0..cfg.cases {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, k as u64, 0));
        let stratum = k % 3 + 1;
        let meta = scene(&mut rng, &lat, stratum, p_amb)?;
        let prompt = Prompt::new(meta.named.clone()).to_string();
        let case_id = format!("case{k:0width$}");
        let slices = (0..cfg.slices_per_case)
            .map(|sl| {
                let (image, mask) =
                    rasterize(&meta, cfg.image_size, sub_seed(cfg.seed, k as u64, sl as u64 + 1));
                Sample {
                    case_id: case_id.clone(),
                    slice_id: sl,
                    image,
                    mask,
                    prompt: prompt.clone(),
                    meta: meta.clone(),
                }
            })
            .collect();
        cases.push(Case {
            case_id,
            stratum,
            slices,
        });
    }
    Ok(cases)
}
