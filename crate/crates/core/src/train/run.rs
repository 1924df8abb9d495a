use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tmc_tensor::Tensor;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::optim::{Adam, EarlyStop, Plateau};
use crate::cross::ma_loss_total;
use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, bce_loss, binarize, dice, mask_bits, mean_std, miou, total_loss, LossBundle,
    MetricRecord, MetricsReport, SliceScore,
};
use crate::params::{ParamStore, Session};
use crate::seg::{ForwardFlags, SegOutput, TmcModel};
use crate::text::{tokenize, Vocabulary};

pub const LOG_HEADER: &str = "epoch\tseg\talign\ttotal\tval_dice\tlr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg: f64,
    pub align: f64,
    pub total: f64,
    pub val_dice: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.seg, self.align, self.total, self.val_dice, self.lr
        )
    }
}

pub fn log_tsv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        s.push_str(&r.tsv_row());
        s.push('\n');
    }
    s
}

pub struct TrainResult {
    pub model: TmcModel,
    /// Best-validation parameters.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Forward pass with the segmentation and alignment losses attached.
pub fn forward_loss(
    model: &TmcModel,
    s: &mut Session<'_>,
    vocab: &Vocabulary,
    sample: &Sample,
    flags: ForwardFlags,
    lambda: f64,
) -> Result<(SegOutput, tmc_tensor::Var, LossBundle)> {
    let tokens = tokenize(&sample.prompt, vocab)?;
    let out = model.forward(s, &sample.image, &tokens, flags)?;
    let seg = bce_loss(s, out.prob, &sample.mask)?;
    let align = if flags.align.is_some() && !out.align.is_empty() {
        let terms: Vec<_> = out.align.iter().map(|(_, t)| t.loss).collect();
        Some(ma_loss_total(s, &terms)?)
    } else {
        None
    };
    let (total, bundle) = total_loss(s, seg, align, lambda)?;
    Ok((out, total, bundle))
}

/// Foreground probabilities for one sample.
pub fn predict(
    model: &TmcModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    sample: &Sample,
    flags: ForwardFlags,
) -> Result<Tensor> {
    let mut s = Session::new(store, false);
    let tokens = tokenize(&sample.prompt, vocab)?;
    let flags = ForwardFlags { align: None, ..flags };
    let out = model.forward(&mut s, &sample.image, &tokens, flags)?;
    Ok(s.g.value(out.prob).clone())
}

/// Per-slice, per-case and aggregate metrics without augmentation.
pub fn evaluate(
    model: &TmcModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    samples: &[Sample],
    flags: ForwardFlags,
    split: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let mut slices = Vec::with_capacity(samples.len());
    let mut ids: Vec<String> = Vec::new();
    for sm in samples {
        let prob = predict(model, store, vocab, sm, flags)?;
        let p = binarize(&prob);
        let g = mask_bits(&sm.mask);
        slices.push(SliceScore {
            case_id: sm.case_id.clone(),
            slice_id: sm.slice_id,
            dice: dice(&p, &g),
            miou: miou(&p, &g),
        });
        ids.push(sm.case_id.clone());
    }
    ids.sort();
    ids.dedup();
    Ok(MetricsReport {
        split: split.to_string(),
        seed,
        aggregate: aggregate(&slices, &ids)?,
        slices,
    })
}

fn add_into(acc: &mut Option<Tensor>, g: &Tensor) {
    match acc {
        Some(a) => {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        None => *acc = Some(g.clone()),
    }
}

/// Trains from scratch on `train`, selecting the epoch with the best
/// validation Dice.
pub fn train(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let mcfg = cfg.model(vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store) = TmcModel::new(&mcfg, &mut rng)?;
    let flags = cfg.flags();
    let frozen: Vec<bool> = store.iter().map(|(_, n, _)| cfg.freeze_text && n.starts_with("text.")).collect();
    let mut adam = Adam::new(&store);
    let mut lr = cfg.lr;

    let val_dice = |store: &ParamStore| -> Result<f64> {
        Ok(evaluate(&model, store, vocab, val_set, flags, "val", cfg.seed)?.aggregate.dice)
    };
    let baseline = val_dice(&store)?;
    let mut plateau = Plateau::new(baseline, cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold);
    let mut early = EarlyStop::new(baseline, cfg.early_stop_patience, cfg.plateau_threshold);
    let snapshot = |store: &ParamStore, adam: &Adam, rng: &ChaCha8Rng, epoch: usize, dice: f64| Checkpoint {
        model: mcfg.clone(),
        vocab: vocab.clone(),
        params: store.clone(),
        adam: Some(adam.clone()),
        epoch,
        best_val_dice: dice,
        rng: Some(RngState::capture(rng)),
    };
    let mut best = snapshot(&store, &adam, &rng, 0, baseline);

    let mut log = Vec::new();
    let mut steps = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut seg, mut align, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
            for &k in batch {
                let sample = if cfg.augment {
                    augment(&train_set[k], &mut rng)
                } else {
                    train_set[k].clone()
                };
                let mut s = Session::new(&store, true);
                let (_, loss, b) = forward_loss(&model, &mut s, vocab, &sample, flags, cfg.lambda)?;
                if !b.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "epoch {epoch}: loss {b:?} on case {} slice {}",
                        sample.case_id, sample.slice_id
                    )));
                }
                seg += b.seg;
                align += b.align;
                total += b.total;
                s.g.backward(loss)?;
                for (id, g) in s.param_grads() {
                    if !frozen[id.index()] {
                        add_into(&mut acc[id.index()], &g);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<_> = store
                .ids()
                .zip(acc)
                .filter_map(|(id, g)| g.map(|g| (id, g.map(|x| x * inv))))
                .collect();
            adam.step(&mut store, &grads, lr)?;
            steps += 1;
        }
        let n = train_set.len() as f64;
        let vd = val_dice(&store)?;
        let row = EpochLog {
            epoch,
            seg: seg / n,
            align: align / n,
            total: total / n,
            val_dice: vd,
            lr,
        };
        on_epoch(&row);
        log.push(row);
        if vd > best.best_val_dice {
            best = snapshot(&store, &adam, &rng, epoch, vd);
        }
        if cfg.target_dice.is_some_and(|t| vd >= t) {
            break;
        }
        lr = plateau.observe(vd, lr);
        if early.observe(vd) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainResult {
        model,
        checkpoint: best,
        log,
        steps,
        stopped_early,
    })
}

/// Rebuilds the model of a checkpoint with its stored parameters.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TmcModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut store) = TmcModel::new(&ckpt.model, &mut rng)?;
    ckpt.restore_into(&mut store)?;
    Ok((model, store))
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    /// Reports per evaluation set, or the failure message.
    pub outcome: std::result::Result<Vec<MetricsReport>, String>,
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub mcm: bool,
    pub align: bool,
    pub runs: Vec<AblationRun>,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!("mcm={},align={}", f(self.mcm), f(self.align))
    }

    /// Aggregate Dice of every successful run on evaluation set `k`.
    pub fn dice(&self, k: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|v| v[k].aggregate.dice))
            .collect()
    }

    pub fn miou(&self, k: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|v| v[k].aggregate.miou))
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub sets: Vec<String>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, mcm: bool, align: bool) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| c.mcm == mcm && c.align == align)
            .expect("full grid")
    }

    /// Metric records: per-run aggregates then mean and std per cell.
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for c in &self.cells {
            let case_id = format!("cell:{}", c.label());
            for r in &c.runs {
                match &r.outcome {
                    Ok(reps) => {
                        for rep in reps {
                            for (metric, value) in [("dice", rep.aggregate.dice), ("miou", rep.aggregate.miou)] {
                                out.push(MetricRecord {
                                    split: rep.split.clone(),
                                    seed: Some(r.seed),
                                    case_id: case_id.clone(),
                                    metric: metric.into(),
                                    value,
                                });
                            }
                        }
                    }
                    Err(_) => out.push(MetricRecord {
                        split: "*".into(),
                        seed: Some(r.seed),
                        case_id: case_id.clone(),
                        metric: "failed".into(),
                        value: 1.0,
                    }),
                }
            }
            for (k, set) in self.sets.iter().enumerate() {
                let (dm, ds) = mean_std(&c.dice(k));
                let (mm, ms) = mean_std(&c.miou(k));
                for (metric, value) in [("dice_mean", dm), ("dice_std", ds), ("miou_mean", mm), ("miou_std", ms)] {
                    out.push(MetricRecord {
                        split: set.clone(),
                        seed: None,
                        case_id: case_id.clone(),
                        metric: metric.into(),
                        value,
                    });
                }
            }
        }
        out
    }

    /// Table with one row per cell: component marks then mean and std per set.
    pub fn render(&self) -> String {
        let mut s = String::from("MCM\tMA\t");
        for set in &self.sets {
            let _ = write!(s, "{set} Dice (%)\t{set} mIoU (%)\t");
        }
        s = s.trim_end().to_string() + "\n";
        for c in &self.cells {
            let mark = |b: bool| if b { "x" } else { "-" };
            let _ = write!(s, "{}\t{}", mark(c.mcm), mark(c.align));
            for k in 0..self.sets.len() {
                let (dm, ds) = mean_std(&c.dice(k));
                let (mm, ms) = mean_std(&c.miou(k));
                let _ = write!(s, "\t{:.2}±{:.2}\t{:.2}±{:.2}", 100.0 * dm, 100.0 * ds, 100.0 * mm, 100.0 * ms);
            }
            if c.failures() > 0 {
                let _ = write!(s, "\t[{} failed]", c.failures());
            }
            s.push('\n');
        }
        s
    }
}

/// Trains the {MCM off, on} x {alignment off, on} grid once per seed and
/// evaluates every run on each named set. Failed runs are recorded and the
/// rest of the grid continues.
pub fn run_ablation(
    base: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[Sample],
    val_set: &[Sample],
    eval_sets: &[(&str, &[Sample])],
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> AblationTable {
    let mut cells = Vec::new();
    for (mcm, align) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                mcm,
                align,
                seed,
                ..base.clone()
            };
            let outcome = train(&cfg, vocab, train_set, val_set, |_| {}).and_then(|r| {
                let (model, store) = (&r.model, &r.checkpoint.params);
                eval_sets
                    .iter()
                    .map(|(name, set)| evaluate(model, store, vocab, set, cfg.flags(), name, seed))
                    .collect::<Result<Vec<_>>>()
            });
            let cell = AblationCell {
                mcm,
                align,
                runs: Vec::new(),
            };
            match &outcome {
                Ok(reps) => progress(&format!(
                    "{} seed {seed}: {}",
                    cell.label(),
                    reps.iter()
                        .map(|r| format!("{} dice {:.4}", r.split, r.aggregate.dice))
                        .collect::<Vec<_>>()
                        .join(", ")
                )),
                Err(e) => progress(&format!("{} seed {seed}: failed: {e}", cell.label())),
            }
            runs.push(AblationRun {
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
        cells.push(AblationCell { mcm, align, runs });
    }
    AblationTable {
        sets: eval_sets.iter().map(|(n, _)| n.to_string()).collect(),
        cells,
    }
}
