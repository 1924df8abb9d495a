//! Losses, overlap metrics, case-level aggregation and significance testing.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use tmc_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::Session;

/// Probability clamp applied before the logarithms of the BCE.
pub const BCE_CLAMP: f64 = 1e-7;
/// Binarization threshold for predicted probabilities.
pub const THRESHOLD: f64 = 0.5;

/// Mean pixel-wise binary cross-entropy.
pub fn bce_loss(s: &mut Session<'_>, prob: Var, mask: &Tensor) -> Result<Var> {
    if s.g.shape(prob) != mask.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs mask {:?}",
            s.g.shape(prob),
            mask.shape()
        )));
    }
    Ok(s.g.bce(prob, mask, BCE_CLAMP)?)
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub seg: f64,
    pub align: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = seg + lambda * align` as a graph node plus its scalar bundle.
/// With `align = None` the alignment term is absent and contributes zero.
pub fn total_loss(
    s: &mut Session<'_>,
    seg: Var,
    align: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossBundle)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let seg_v = s.g.value(seg).item();
    let (total, align_v) = match align {
        Some(a) => {
            let weighted = s.g.scale(a, lambda);
            (s.g.add(seg, weighted)?, s.g.value(a).item())
        }
        None => (seg, 0.0),
    };
    let bundle = LossBundle {
        seg: seg_v,
        align: align_v,
        lambda,
        total: s.g.value(total).item(),
    };
    Ok((total, bundle))
}

pub fn binarize(prob: &Tensor) -> Vec<bool> {
    prob.data().iter().map(|&p| p >= THRESHOLD).collect()
}

pub fn mask_bits(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&m| m >= 0.5).collect()
}

fn counts(p: &[bool], g: &[bool]) -> (usize, usize, usize, usize) {
    assert_eq!(p.len(), g.len(), "mask lengths differ");
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&a, &b) in p.iter().zip(g) {
        match (a, b) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fneg, tn)
}

/// `2|P and G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &[bool], mask: &[bool]) -> f64 {
    let (tp, fp, fneg, _) = counts(pred, mask);
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground IoU alone.
pub fn iou_fg(pred: &[bool], mask: &[bool]) -> f64 {
    let (tp, fp, fneg, _) = counts(pred, mask);
    iou(tp, tp + fp + fneg)
}

/// Mean of foreground and background IoU; an empty class scores 1.
pub fn miou(pred: &[bool], mask: &[bool]) -> f64 {
    let (tp, fp, fneg, tn) = counts(pred, mask);
    0.5 * (iou(tp, tp + fp + fneg) + iou(tn, tn + fp + fneg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub case_id: String,
    pub slice_id: usize,
    pub dice: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub slices: usize,
    pub dice: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: Vec<CaseScore>,
    pub dice: f64,
    pub miou: f64,
    pub slices: usize,
}

/// Per-case means over slices, then the mean over cases. Every slice must
/// belong to a case in `case_ids`; cases without slices are ignored.
pub fn aggregate(slices: &[SliceScore], case_ids: &[String]) -> Result<Aggregate> {
    let known: HashMap<&str, ()> = case_ids.iter().map(|c| (c.as_str(), ())).collect();
    let mut by_case: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for sl in slices {
        if !known.contains_key(sl.case_id.as_str()) {
            return Err(Error::Data(format!("slice of unknown case {:?}", sl.case_id)));
        }
        let e = by_case.entry(sl.case_id.as_str()).or_default();
        e.0 += 1;
        e.1 += sl.dice;
        e.2 += sl.miou;
    }
    if by_case.is_empty() {
        return Err(Error::Data("no slices to aggregate".into()));
    }
    let cases: Vec<CaseScore> = by_case
        .into_iter()
        .map(|(id, (n, d, m))| CaseScore {
            case_id: id.to_string(),
            slices: n,
            dice: d / n as f64,
            miou: m / n as f64,
        })
        .collect();
    let k = cases.len() as f64;
    Ok(Aggregate {
        dice: cases.iter().map(|c| c.dice).sum::<f64>() / k,
        miou: cases.iter().map(|c| c.miou).sum::<f64>() / k,
        slices: slices.len(),
        cases,
    })
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    if !(sd > 0.0) {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let n = d.len() as f64;
    let t = mean / (sd / n.sqrt());
    let df = d.len() - 1;
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
        mean_diff: mean,
        sd_diff: sd,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    reg_inc_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - reg_inc_beta(b, a, 1.0 - x);
    }
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..=300 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + num / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        f *= d * c;
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + num / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = d * c;
        f *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    (ln_front.exp() * f / a).clamp(0.0, 1.0)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: String,
    pub seed: Option<u64>,
    pub case_id: String,
    pub metric: String,
    pub value: f64,
}

/// Per-run evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub seed: u64,
    pub slices: Vec<SliceScore>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    /// Per-case rows then the aggregate rows, with `case_id = "*"`.
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |case_id: &str, metric: &str, value: f64| MetricRecord {
            split: self.split.clone(),
            seed: Some(self.seed),
            case_id: case_id.to_string(),
            metric: metric.to_string(),
            value,
        };
        let mut out = Vec::new();
        for c in &self.aggregate.cases {
            out.push(rec(&c.case_id, "dice", c.dice));
            out.push(rec(&c.case_id, "miou", c.miou));
        }
        out.push(rec("*", "dice", self.aggregate.dice));
        out.push(rec("*", "miou", self.aggregate.miou));
        out
    }
}

/// Aggregate rows across seeds: `dice_mean`, `dice_std`, `miou_mean`, `miou_std`.
pub fn seed_summary(split: &str, reports: &[MetricsReport]) -> Vec<MetricRecord> {
    let dice: Vec<f64> = reports.iter().map(|r| r.aggregate.dice).collect();
    let miou: Vec<f64> = reports.iter().map(|r| r.aggregate.miou).collect();
    let (dm, ds) = mean_std(&dice);
    let (mm, ms) = mean_std(&miou);
    [("dice_mean", dm), ("dice_std", ds), ("miou_mean", mm), ("miou_std", ms)]
        .into_iter()
        .map(|(metric, value)| MetricRecord {
            split: split.to_string(),
            seed: None,
            case_id: "*".to_string(),
            metric: metric.to_string(),
            value,
        })
        .collect()
}

/// Line-delimited JSON.
pub fn to_json_lines(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}
