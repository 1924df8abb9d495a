//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `TMC_ACCEPT=1,2,8` runs a subset. A criterion listed in `KNOWN_DEFECTS`
//! still prints FAIL when it fails but does not fail the process; every other
//! failure exits 1.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmc_core::check::{end_to_end_gradcheck, E2E_EPS};
use tmc_core::cross::{align_loss_from_similarity, ma_loss_total, AlignMode};
use tmc_core::data::{
    benchmark_samples, generate_dataset, prompt_vocabulary, select_samples, split_cases,
    split_counts, Case, Prompt, Quadrant, Sample, SplitSpec,
};
use tmc_core::metrics::{aggregate, bce_loss, mean_std, paired_t_test, total_loss, SliceScore};
use tmc_core::params::{Init, ParamStore, Session};
use tmc_core::seg::{ForwardFlags, ModelConfig, TmcModel};
use tmc_core::text::tokenize;
use tmc_core::train::{
    evaluate, load_model, log_tsv, predict, run_ablation, train, AblationTable, Checkpoint,
    TrainConfig,
};
use tmc_core::visual::{VisualEncoder, STAGES};
use tmc_tensor::gradcheck::run_op_suite;
use tmc_tensor::Tensor;

const LN2: f64 = std::f64::consts::LN_2;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Epoch cap for the benchmark runs; keeps six runs inside the time budget.
const BENCH_EPOCHS: usize = 60;
/// Criterion 8 asks for t ~ 2.197, p ~ 0.0929, which no sample-sd paired
/// t-test produces on the stated differences. See the decisions ledger.
const KNOWN_DEFECTS: [usize; 1] = [8];

type Verdict = std::result::Result<String, String>;

fn check(cond: bool, what: String) -> Verdict {
    if cond {
        Ok(what)
    } else {
        Err(what)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- 1 --------------------------------------------------------------------

fn gradient_integrity() -> Verdict {
    let t0 = Instant::now();
    let ops = run_op_suite(0..10, 1e-5).map_err(err)?;
    let (worst_op, worst) = ops
        .iter()
        .map(|r| (r.name, r.report.max_rel_err))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("empty op suite")?;
    let names: BTreeSet<&str> = ops.iter().map(|r| r.name).collect();
    let mut e2e: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10 {
        let r = end_to_end_gradcheck(seed, 4, E2E_EPS).map_err(err)?;
        e2e = e2e.max(r.report.max_rel_err);
        checked += r.report.checked;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && e2e < 1e-3 && secs < 300.0,
        format!(
            "{} ops x 10 seeds max rel err {worst:.2e} ({worst_op}); end-to-end 10 seeds max {e2e:.2e} over {checked} coords; {secs:.0}s",
            names.len()
        ),
    )
}

// ---- 2 --------------------------------------------------------------------

fn equation_fidelity() -> Verdict {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let zero = s.g.constant(Tensor::scalar(0.0));
    let ma = align_loss_from_similarity(&mut s, zero, AlignMode::TwoSided);
    let ma = s.g.value(ma).item();
    let half = s.g.constant(Tensor::filled(&[4, 4], 0.5));
    let mask = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f64);
    let bce = bce_loss(&mut s, half, &mask).map_err(err)?;
    let bce = s.g.value(bce).item();
    let seg = s.g.constant(Tensor::scalar(0.3712));
    let al = s.g.constant(Tensor::scalar(1.2345));
    let (_, b) = total_loss(&mut s, seg, Some(al), 0.1).map_err(err)?;
    let total_exact = b.total == 0.3712 + 0.1 * 1.2345;

    // stage mean on the terms of a real forward
    let vocab = prompt_vocabulary();
    let (m, st) = TmcModel::new(&ModelConfig::toy(vocab.len()), &mut ChaCha8Rng::seed_from_u64(3)).map_err(err)?;
    let mut s = Session::new(&st, false);
    let tokens = tokenize("one target region, lower left", &vocab).map_err(err)?;
    let img = Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let out = m.forward(&mut s, &img, &tokens, ForwardFlags::default()).map_err(err)?;
    let terms: Vec<_> = out.align.iter().map(|(_, t)| t.loss).collect();
    let hand = terms.iter().map(|&t| s.g.value(t).item()).sum::<f64>() / 3.0;
    let mean = ma_loss_total(&mut s, &terms).map_err(err)?;
    let mean = s.g.value(mean).item();

    let (e_ma, e_bce, e_mean) = ((ma - 2.0 * LN2).abs(), (bce - LN2).abs(), (mean - hand).abs());
    check(
        e_ma < 1e-9 && e_bce < 1e-9 && total_exact && terms.len() == 3 && e_mean < 1e-12,
        format!(
            "MA(0) err {e_ma:.1e}, BCE(0.5) err {e_bce:.1e}, total exact: {total_exact}, |S|={} mean err {e_mean:.1e}",
            terms.len()
        ),
    )
}

// ---- 3 --------------------------------------------------------------------

fn random_prompt(rng: &mut impl Rng) -> String {
    let mut q = Quadrant::ALL.to_vec();
    q.shuffle(rng);
    q.truncate(rng.gen_range(1..=4));
    Prompt::new(q).to_string()
}

fn attention_invariants() -> Verdict {
    let vocab = prompt_vocabulary();
    let cfg = ModelConfig::toy(vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut rows, mut worst, mut pmin, mut pmax) = (0usize, 0.0f64, 1.0f64, 0.0f64);
    for k in 0..100u64 {
        // fresh weights every ten forwards
        let (m, store) = TmcModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(k / 10)).map_err(err)?;
        let tokens = tokenize(&random_prompt(&mut rng), &vocab).map_err(err)?;
        let img = Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng);
        let mut s = Session::new(&store, false);
        s.attention_trace = Some(Vec::new());
        let out = m.forward(&mut s, &img, &tokens, ForwardFlags::default()).map_err(err)?;
        let trace = s.attention_trace.take().unwrap_or_default();
        for a in trace.iter().chain(out.cache.iter().filter_map(|c| c.attn_vl.as_ref())) {
            let c = a.shape()[1];
            for row in a.data().chunks(c) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
        for &p in s.g.value(out.prob).data() {
            pmin = pmin.min(p);
            pmax = pmax.max(p);
        }
    }
    check(
        worst < 1e-6 && pmin > 0.0 && pmax < 1.0,
        format!("100 forwards, {rows} attention rows, max |sum-1| {worst:.1e}; sigmoid range [{pmin:.3e}, {pmax:.6}]"),
    )
}

// ---- 4 --------------------------------------------------------------------

fn shape_law() -> Verdict {
    let vocab = prompt_vocabulary();
    let tokens = tokenize("one target region, upper right", &vocab).map_err(err)?;
    let mut configs = vec![ModelConfig::tiny(vocab.len())];
    for size in [32, 64, 128] {
        for c1 in [8, 16] {
            for stages in [vec![2, 3, 4], vec![3], vec![]] {
                configs.push(ModelConfig {
                    image_size: size,
                    base_channels: c1,
                    stages,
                    ..ModelConfig::toy(vocab.len())
                });
            }
        }
    }
    for cfg in &configs {
        let what = format!("size {} C1 {} stages {:?}", cfg.image_size, cfg.base_channels, cfg.stages);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.image_size as u64);
        let (m, store) = TmcModel::new(cfg, &mut rng).map_err(err)?;
        let img = Tensor::uniform(&[1, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut rng);
        let flags = ForwardFlags {
            fusion: !cfg.stages.is_empty(),
            align: (!cfg.stages.is_empty()).then_some(AlignMode::TwoSided),
        };
        let mut s = Session::new(&store, false);
        let out = m.forward(&mut s, &img, &tokens, flags).map_err(|e| format!("{what}: {e}"))?;
        if s.g.shape(out.prob) != [1, cfg.image_size, cfg.image_size] {
            return Err(format!("{what}: output {:?}", s.g.shape(out.prob)));
        }
        // stage-by-stage schedule of the encoder alone
        let mut es = ParamStore::new();
        let enc = VisualEncoder::new(&mut Init { store: &mut es, rng: &mut rng }, &cfg.encoder()).map_err(err)?;
        let mut s = Session::new(&es, false);
        let x = s.g.constant(img);
        let mut v = enc.patch_embed(&mut s, x).map_err(err)?;
        let mut side = cfg.image_size / cfg.patch;
        let mut c = cfg.base_channels;
        if s.g.shape(v.tokens) != [side * side, c] {
            return Err(format!("{what}: stage 1 {:?}", s.g.shape(v.tokens)));
        }
        for i in 2..=STAGES {
            v = enc.encode_stage(&mut s, v).map_err(err)?;
            side /= 2;
            c *= 2;
            if s.g.shape(v.tokens) != [side * side, c] || v.c != c {
                return Err(format!("{what}: stage {i} {:?}", s.g.shape(v.tokens)));
            }
        }
    }
    Ok(format!("{} configs: C doubles and H halves at every stage, output dims equal input dims", configs.len()))
}

// ---- 5 --------------------------------------------------------------------

fn overfit_sanity() -> Verdict {
    let t0 = Instant::now();
    let base = TrainConfig::default();
    let cases = generate_dataset(&TrainConfig { cases: 40, ..base.clone() }.synth()).map_err(err)?;
    let eight: Vec<Sample> = cases.iter().take(8).flat_map(|c| c.slices.clone()).collect();
    let cfg = TrainConfig {
        augment: false,
        max_epochs: 500,
        plateau_patience: 500,
        early_stop_patience: 500,
        target_dice: Some(0.99),
        ..base
    };
    let vocab = prompt_vocabulary();
    let r = train(&cfg, &vocab, &eight, &eight, |_| {}).map_err(err)?;
    let (m, store) = load_model(&r.checkpoint).map_err(err)?;
    let d = evaluate(&m, &store, &vocab, &eight, cfg.flags(), "train", cfg.seed).map_err(err)?.aggregate.dice;
    let secs = t0.elapsed().as_secs_f64();
    check(
        d >= 0.99 && r.steps <= 500 && secs < 600.0,
        format!("8 samples: train Dice {d:.4} after {} optimizer steps; {secs:.0}s", r.steps),
    )
}

// ---- 6 and 7 --------------------------------------------------------------

struct Grid {
    table: AblationTable,
    /// Wall time per run, in grid order.
    times: Vec<Duration>,
}

fn benchmark_grid() -> std::result::Result<Grid, String> {
    let cfg = TrainConfig {
        max_epochs: BENCH_EPOCHS,
        ..TrainConfig::default()
    };
    let cases: Vec<Case> = generate_dataset(&cfg.synth()).map_err(err)?;
    let sp = split_cases(&cases, &SplitSpec::new(cfg.data_seed)).map_err(err)?;
    let tr = select_samples(&cases, &sp.train).map_err(err)?;
    let va = select_samples(&cases, &sp.val).map_err(err)?;
    let te = select_samples(&cases, &sp.test).map_err(err)?;
    let bench = benchmark_samples(&cases, &sp.test).map_err(err)?;
    eprintln!(
        "benchmark grid: {} train / {} val / {} test, {} ambiguous test cases, {BENCH_EPOCHS} epochs max",
        tr.len(),
        va.len(),
        te.len(),
        bench.len()
    );
    let mut last = Instant::now();
    let mut times = Vec::new();
    let vocab = prompt_vocabulary();
    let table = run_ablation(
        &cfg,
        &vocab,
        &tr,
        &va,
        &[("test-benchmark", &bench), ("test", &te)],
        &SEEDS,
        |line| {
            times.push(last.elapsed());
            last = Instant::now();
            eprintln!("  {line} ({:.0}s)", times.last().map_or(0.0, Duration::as_secs_f64));
        },
    );
    Ok(Grid { table, times })
}

fn text_disambiguation(grid: &Grid) -> Verdict {
    let full = grid.table.cell(true, true);
    // text ablation severs language-to-vision fusion: the (MCM off, align on) cell
    let ctrl = grid.table.cell(false, true);
    if full.failures() + ctrl.failures() > 0 {
        return Err(format!("{} failed runs", full.failures() + ctrl.failures()));
    }
    let (fm, _) = mean_std(&full.dice(0));
    let (cm, _) = mean_std(&ctrl.dice(0));
    // grid order: ff, tf, ft, tt
    let n = SEEDS.len();
    let secs: f64 = grid.times[2 * n..].iter().map(Duration::as_secs_f64).sum();
    check(
        fm >= 0.85 && cm <= 0.70 && secs <= 45.0 * 60.0,
        format!(
            "ambiguous test subset, {n} seeds: full Dice {fm:.4} {:?}, text-ablated {cm:.4} {:?}; {:.1} min",
            full.dice(0).iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>(),
            ctrl.dice(0).iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>(),
            secs / 60.0
        ),
    )
}

fn ablation_direction(grid: &Grid) -> Verdict {
    let t = &grid.table;
    println!("{}", t.render().trim_end());
    let fails: usize = t.cells.iter().map(|c| c.failures()).sum();
    if fails > 0 {
        return Err(format!("{fails} failed runs"));
    }
    let m = |mcm, align| mean_std(&t.cell(mcm, align).dice(0)).0;
    let (ff, tf, ft, tt) = (m(false, false), m(true, false), m(false, true), m(true, true));
    check(
        tt >= ff && tf >= ff - 0.01 && ft >= ff - 0.01,
        format!("benchmark Dice: off/off {ff:.4}, MCM only {tf:.4}, MA only {ft:.4}, both {tt:.4}"),
    )
}

// ---- 8 --------------------------------------------------------------------

fn protocol() -> Verdict {
    let cases = generate_dataset(&TrainConfig::default().synth()).map_err(err)?;
    for seed in 0..100 {
        let sp = split_cases(&cases, &SplitSpec::new(seed)).map_err(err)?;
        let tr: BTreeSet<&String> = sp.train.iter().collect();
        let va: BTreeSet<&String> = sp.val.iter().collect();
        let te: BTreeSet<&String> = sp.test.iter().collect();
        if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
            return Err(format!("split seed {seed} shares case ids"));
        }
        if tr.len() + va.len() + te.len() != cases.len() {
            return Err(format!("split seed {seed} drops cases"));
        }
        for stratum in 1..=4 {
            let ids: BTreeSet<&String> = cases.iter().filter(|c| c.stratum == stratum).map(|c| &c.case_id).collect();
            let got = [&tr, &va, &te].map(|s| s.intersection(&ids).count());
            for (k, r) in got.iter().zip([0.7, 0.1, 0.2]) {
                if (*k as f64 - r * ids.len() as f64).abs() > 1.0 {
                    return Err(format!("seed {seed} stratum {stratum}: {got:?} of {}", ids.len()));
                }
            }
        }
    }
    for n in 10..=200 {
        let c = split_counts(n, [0.7, 0.1, 0.2]);
        if c.iter().zip([0.7, 0.1, 0.2]).any(|(k, r)| (*k as f64 - r * n as f64).abs() > 1.0) {
            return Err(format!("split_counts({n}) = {c:?}"));
        }
    }
    let sl = |c: &str, i, d| SliceScore {
        case_id: c.into(),
        slice_id: i,
        dice: d,
        miou: d,
    };
    let agg = aggregate(
        &[sl("a", 0, 1.0), sl("b", 0, 0.0), sl("b", 1, 0.0)],
        &["a".to_string(), "b".to_string()],
    )
    .map_err(err)?;
    if agg.dice != 0.5 {
        return Err(format!("case-weighted aggregate {} != 0.5", agg.dice));
    }
    let d = [0.1, -0.05, 0.2, 0.05, 0.1];
    let r = paired_t_test(&d, &[0.0; 5]).map_err(err)?;
    // independent oracle (scipy.stats.ttest_1samp), computed before the build
    let oracle = (r.t - 1.969_463_9).abs() < 1e-6 && (r.p - 0.120_243_3).abs() < 1e-6;
    let (dt, dp) = ((r.t - 2.197).abs(), (r.p - 0.0929).abs());
    check(
        dt < 1e-3 && dp < 1e-3,
        format!(
            "splits disjoint over 100 seeds, 7:1:2 within one case per stratum, case-weighted 0.5; \
             t-test t={:.4} p={:.4} (oracle match: {oracle}) vs stated t=2.197 p=0.0929: off by {dt:.3} / {dp:.3}",
            r.t, r.p
        ),
    )
}

// ---- 9 --------------------------------------------------------------------

fn determinism() -> Verdict {
    let cfg = TrainConfig {
        cases: 40,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let cases = generate_dataset(&cfg.synth()).map_err(err)?;
    let sp = split_cases(&cases, &SplitSpec::new(cfg.data_seed)).map_err(err)?;
    let tr = select_samples(&cases, &sp.train).map_err(err)?;
    let va = select_samples(&cases, &sp.val).map_err(err)?;
    let te = select_samples(&cases, &sp.test).map_err(err)?;
    let vocab = prompt_vocabulary();
    let a = train(&cfg, &vocab, &tr, &va, |_| {}).map_err(err)?;
    let b = train(&cfg, &vocab, &tr, &va, |_| {}).map_err(err)?;
    let bits = |r: &tmc_core::train::TrainResult| -> Vec<u64> {
        r.log.iter().flat_map(|e| [e.seg, e.align, e.total, e.val_dice, e.lr]).map(f64::to_bits).collect()
    };
    let logs_equal = bits(&a) == bits(&b) && log_tsv(&a.log) == log_tsv(&b.log);

    let dir = std::env::temp_dir().join(format!("tmc-accept-ckpt-{}", std::process::id()));
    a.checkpoint.save(&dir).map_err(err)?;
    let back = Checkpoint::load(&dir).map_err(err)?;
    let _ = std::fs::remove_dir_all(&dir);
    let (m1, s1) = load_model(&a.checkpoint).map_err(err)?;
    let (m2, s2) = load_model(&back).map_err(err)?;
    let mut same = 0;
    for s in &te {
        let p = predict(&m1, &s1, &vocab, s, cfg.flags()).map_err(err)?;
        let q = predict(&m2, &s2, &vocab, s, cfg.flags()).map_err(err)?;
        if p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            same += 1;
        }
    }
    check(
        logs_equal && same == te.len() && back == a.checkpoint,
        format!(
            "two runs, {} epoch rows bitwise equal: {logs_equal}; reloaded checkpoint forward bitwise on {same}/{} samples",
            a.log.len(),
            te.len()
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("TMC_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: usize| only.as_ref().is_none_or(|s| s.contains(&k));
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut run = |k: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        if want(k) {
            let v = f();
            report(k, name, &v);
            verdicts.push((k, name, v));
        }
    };
    run(1, "gradient integrity", &gradient_integrity);
    run(2, "equation fidelity", &equation_fidelity);
    run(3, "attention and normalization invariants", &attention_invariants);
    run(4, "shape law", &shape_law);
    run(5, "overfit sanity", &overfit_sanity);
    if want(6) || want(7) {
        match benchmark_grid() {
            Ok(grid) => {
                run(6, "text disambiguation benchmark", &|| text_disambiguation(&grid));
                run(7, "ablation directionality", &|| ablation_direction(&grid));
            }
            Err(e) => {
                for (k, name) in [(6, "text disambiguation benchmark"), (7, "ablation directionality")] {
                    run(k, name, &|| Err(e.clone()));
                }
            }
        }
    }
    run(8, "protocol correctness", &protocol);
    run(9, "determinism and persistence", &determinism);

    let passed = verdicts.iter().filter(|v| v.2.is_ok()).count();
    let hard: Vec<usize> = verdicts
        .iter()
        .filter(|v| v.2.is_err() && !KNOWN_DEFECTS.contains(&v.0))
        .map(|v| v.0)
        .collect();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    if !hard.is_empty() {
        println!("unexpected failures: {hard:?}");
        std::process::exit(1);
    }
}

fn report(k: usize, name: &str, v: &Verdict) {
    match v {
        Ok(msg) => println!("PASS {k} {name}: {msg}"),
        Err(msg) if KNOWN_DEFECTS.contains(&k) => println!("FAIL {k} {name} (known defect): {msg}"),
        Err(msg) => println!("FAIL {k} {name}: {msg}"),
    }
}
