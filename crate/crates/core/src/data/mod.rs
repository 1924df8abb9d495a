//! Synthetic ambiguous-scene dataset: scene types, prompts, generation,
//! case-level splits, augmentation and on-disk formats.

mod augment;
mod io;
pub mod pgm;
mod split;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use tmc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub use augment::{apply_augment, augment, AugParams, MAX_ROTATION_DEG};
pub use io::{load_dataset, read_manifest, read_splits, write_dataset, write_splits, ManifestRow};
pub use split::{split_cases, split_counts, Split, SplitSpec, Splits};
pub use synth::{generate_dataset, rasterize, region_mask, SynthConfig, CELL, INTENSITIES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Self::UpperLeft => "upper left",
            Self::UpperRight => "upper right",
            Self::LowerLeft => "lower left",
            Self::LowerRight => "lower right",
        }
    }

    pub fn from_parts(upper: bool, left: bool) -> Self {
        match (upper, left) {
            (true, true) => Self::UpperLeft,
            (true, false) => Self::UpperRight,
            (false, true) => Self::LowerLeft,
            (false, false) => Self::LowerRight,
        }
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Self::UpperLeft | Self::UpperRight)
    }

    pub fn is_left(self) -> bool {
        matches!(self, Self::UpperLeft | Self::LowerLeft)
    }

    /// Image of the quadrant under a 90 degree counter-clockwise rotation.
    pub fn rot90(self) -> Self {
        match self {
            Self::UpperLeft => Self::LowerLeft,
            Self::LowerLeft => Self::LowerRight,
            Self::LowerRight => Self::UpperRight,
            Self::UpperRight => Self::UpperLeft,
        }
    }

    pub fn hflip(self) -> Self {
        Self::from_parts(self.is_upper(), !self.is_left())
    }

    pub fn vflip(self) -> Self {
        Self::from_parts(!self.is_upper(), self.is_left())
    }

    /// Quadrant holding pixel `(y, x)` of a `size x size` image.
    pub fn of_point(y: f64, x: f64, size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self::from_parts(y < c, x < c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Ring,
}

/// Visual identity of a region; two regions with equal appearance are
/// indistinguishable up to position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shape: ShapeKind,
    /// Extent in lattice cells.
    pub w: usize,
    pub h: usize,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub quadrant: Quadrant,
    pub look: Appearance,
    /// Top-left lattice cell.
    pub x0: usize,
    pub y0: usize,
}

/// Structured prompt: the named quadrants in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub quadrants: Vec<Quadrant>,
}

const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

impl Prompt {
    pub fn new(mut quadrants: Vec<Quadrant>) -> Self {
        quadrants.sort();
        quadrants.dedup();
        Self { quadrants }
    }

    pub fn map(&self, f: impl Fn(Quadrant) -> Quadrant) -> Self {
        Self::new(self.quadrants.iter().map(|&q| f(q)).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let bad = || Error::Input(format!("prompt {text:?} does not follow the grammar"));
        let count = COUNT_WORDS
            .iter()
            .position(|w| words.first() == Some(w))
            .ok_or_else(bad)?
            + 1;
        let noun = if count == 1 { "region" } else { "regions" };
        if words.get(1) != Some(&"target") || words.get(2) != Some(&noun) {
            return Err(bad());
        }
        let mut qs = Vec::new();
        let mut rest = &words[3..];
        loop {
            let (v, h) = match rest {
                [v, h, ..] => (*v, *h),
                _ => return Err(bad()),
            };
            let upper = match v {
                "upper" => true,
                "lower" => false,
                _ => return Err(bad()),
            };
            let left = match h {
                "left" => true,
                "right" => false,
                _ => return Err(bad()),
            };
            qs.push(Quadrant::from_parts(upper, left));
            rest = &rest[2..];
            match rest {
                [] => break,
                ["and", tail @ ..] => rest = tail,
                _ => return Err(bad()),
            }
        }
        let p = Self::new(qs);
        if p.quadrants.len() != count {
            return Err(bad());
        }
        Ok(p)
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.quadrants.len();
        let noun = if n == 1 { "region" } else { "regions" };
        let places: Vec<&str> = self.quadrants.iter().map(|q| q.words()).collect();
        write!(f, "{} target {noun}, {}", COUNT_WORDS[n - 1], places.join(" and "))
    }
}

/// Every word the prompt grammar can produce.
pub fn prompt_vocabulary() -> Vocabulary {
    Vocabulary::new([
        "one", "two", "three", "four", "target", "region", "regions", "upper", "lower", "left",
        "right", "and",
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub regions: Vec<Region>,
    /// Quadrants named by the prompt, in the current (possibly augmented) frame.
    pub named: Vec<Quadrant>,
    pub ambiguous: bool,
    /// Geometric transforms applied since generation, oldest first.
    pub aug: Vec<AugParams>,
}

impl SceneMeta {
    /// Quadrant of a generated region in the current frame.
    pub fn current_quadrant(&self, r: &Region) -> Quadrant {
        self.aug.iter().fold(r.quadrant, |q, a| a.map_quadrant(q))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub slice_id: usize,
    /// `1 x H x W` in `[0, 1]`.
    pub image: Tensor,
    /// `1 x H x W` with values in `{0, 1}`.
    pub mask: Tensor,
    pub prompt: String,
    pub meta: SceneMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    /// Number of regions in the scene.
    pub stratum: usize,
    pub slices: Vec<Sample>,
}

impl Case {
    pub fn ambiguous(&self) -> bool {
        self.slices.first().is_some_and(|s| s.meta.ambiguous)
    }

    /// Ambiguous two-region scene whose prompt names one region: the
    /// benchmark subset.
    pub fn in_benchmark_subset(&self) -> bool {
        self.slices
            .first()
            .is_some_and(|s| self.stratum == 2 && s.meta.ambiguous && s.meta.named.len() == 1)
    }
}

/// Slices of the listed cases, in list order.
pub fn select_samples(cases: &[Case], ids: &[String]) -> Result<Vec<Sample>> {
    let by_id: std::collections::BTreeMap<&str, &Case> =
        cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut out = Vec::new();
    for id in ids {
        let c = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Split(format!("case {id} is not in the dataset")))?;
        out.extend(c.slices.iter().cloned());
    }
    Ok(out)
}

/// Slices of the benchmark subset among the listed cases.
pub fn benchmark_samples(cases: &[Case], ids: &[String]) -> Result<Vec<Sample>> {
    let keep: std::collections::BTreeSet<&str> = cases
        .iter()
        .filter(|c| c.in_benchmark_subset())
        .map(|c| c.case_id.as_str())
        .collect();
    let ids: Vec<String> = ids.iter().filter(|i| keep.contains(i.as_str())).cloned().collect();
    select_samples(cases, &ids)
}
