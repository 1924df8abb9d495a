use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Case;
use crate::error::{Error, Result};

pub const MIN_STRATUM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Split(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            seed,
        }
    }
}

/// Case ids per split, each list sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, s: Split) -> &mut Vec<String> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn assignment(&self) -> Vec<(String, Split)> {
        let mut v: Vec<(String, Split)> = Split::ALL
            .iter()
            .flat_map(|&s| self.get(s).iter().map(move |id| (id.clone(), s)))
            .collect();
        v.sort();
        v
    }

    pub fn from_assignment(rows: impl IntoIterator<Item = (String, Split)>) -> Result<Self> {
        let mut out = Self::default();
        let mut seen = HashSet::new();
        for (id, s) in rows {
            if !seen.insert(id.clone()) {
                return Err(Error::Split(format!("case {id:?} assigned twice")));
            }
            out.get_mut(s).push(id);
        }
        for s in Split::ALL {
            out.get_mut(s).sort();
        }
        Ok(out)
    }
}

/// Largest-remainder apportionment of `n` over the ratios; ties go to the
/// earlier split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified case-level split: within each stratum, shuffle by seed and
/// cut at the apportioned boundaries.
pub fn split_cases(cases: &[Case], spec: &SplitSpec) -> Result<Splits> {
    let sum: f64 = spec.ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || spec.ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Split(format!("ratios {:?} must be non-negative and sum to 1", spec.ratios)));
    }
    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for c in cases {
        if !seen.insert(c.case_id.as_str()) {
            return Err(Error::Split(format!("duplicate case id {:?}", c.case_id)));
        }
        strata.entry(c.stratum).or_default().push(&c.case_id);
    }
    let mut out = Splits::default();
    for (stratum, mut ids) in strata {
        if ids.len() < MIN_STRATUM {
            return Err(Error::Split(format!(
                "stratum {stratum} has {} cases, fewer than {MIN_STRATUM}",
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stratum as u64);
        ids.shuffle(&mut rng);
        let [a, b, _] = split_counts(ids.len(), spec.ratios);
        out.train.extend(ids[..a].iter().map(|s| s.to_string()));
        out.val.extend(ids[a..a + b].iter().map(|s| s.to_string()));
        out.test.extend(ids[a + b..].iter().map(|s| s.to_string()));
    }
    for s in Split::ALL {
        out.get_mut(s).sort();
    }
    Ok(out)
}
