use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tmc_core::check::{end_to_end_gradcheck, E2E_EPS};
use tmc_core::data::{
    benchmark_samples, generate_dataset, load_dataset, pgm, prompt_vocabulary, read_splits,
    select_samples, split_cases, write_dataset, write_splits, Case, Sample, Split, SplitSpec,
    Splits,
};
use tmc_core::metrics::{binarize, seed_summary, to_json_lines, MetricRecord};
use tmc_core::params::Session;
use tmc_core::text::tokenize;
use tmc_core::train::{
    evaluate, load_model, log_tsv, run_ablation, train, Checkpoint, TrainConfig,
};
use tmc_tensor::gradcheck::run_op_suite;
use tmc_tensor::Tensor;

const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "tmc", version, about = "Text-guided segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into `data_dir`.
    GenData(Common),
    /// Write `data_dir/splits.tsv` (case-level, stratified 7:1:2).
    Split(Common),
    /// Train one model; writes checkpoint, epoch log and metrics to `out_dir`.
    Train(Common),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train the MCM x alignment grid over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and of the tiny end-to-end model.
    Gradcheck(GradArgs),
    /// Write the per-stage vision-to-language attention maps of one slice.
    DumpAttn(DumpArgs),
}

/// Config file plus `--key value` overrides of any config key.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` or `--key=value` pairs, one per config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Restrict to the ambiguous one-of-two benchmark subset.
    #[arg(long)]
    benchmark: bool,
    /// Write predicted masks (P5) and probabilities (tensor debug format) here.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Write metric lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Checked elements per parameter tensor in the end-to-end check.
    #[arg(long, default_value_t = 4)]
    coords: usize,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    case: String,
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Replace the stored prompt.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

impl Common {
    fn load(&self) -> Result<(TrainConfig, String)> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg = TrainConfig::parse(&text)?;
        cfg.apply_overrides(&self.overrides)?;
        Ok((cfg, text))
    }

    /// The config with `key` required to be set explicitly.
    fn load_seeded(&self, key: &str) -> Result<TrainConfig> {
        let (cfg, text) = self.load()?;
        let in_file = text.lines().any(|l| {
            let l = l.split('#').next().unwrap_or("");
            l.split_once('=').is_some_and(|(k, _)| k.trim() == key)
        });
        let flag = format!("__{key}");
        let in_args = self.overrides.iter().any(|a| {
            let name = a.split_once('=').map_or(a.as_str(), |(k, _)| k);
            name.replace('-', "_") == flag
        });
        if !in_file && !in_args {
            bail!("`{key}` must be given explicitly, in the config file or as --{key}");
        }
        Ok(cfg)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_split_data(cfg: &TrainConfig) -> Result<(Vec<Case>, Splits)> {
    let cases = load_dataset(&cfg.data_dir)?;
    let p = cfg.data_dir.join("splits.tsv");
    let text = fs::read_to_string(&p)
        .with_context(|| format!("reading {}; run `tmc split` first", p.display()))?;
    Ok((cases, read_splits(&text)?))
}

fn samples(cases: &[Case], splits: &Splits, s: Split, benchmark: bool) -> Result<Vec<Sample>> {
    let ids = splits.get(s);
    Ok(if benchmark {
        benchmark_samples(cases, ids)?
    } else {
        select_samples(cases, ids)?
    })
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.load_seeded("data_seed")?;
    let cases = generate_dataset(&cfg.synth())?;
    write_dataset(&cfg.data_dir, &cases)?;
    let amb = cases.iter().filter(|c| c.in_benchmark_subset()).count();
    println!("wrote {} cases ({amb} in the benchmark subset) to {}", cases.len(), cfg.data_dir.display());
    Ok(())
}

fn split(c: &Common) -> Result<()> {
    let cfg = c.load_seeded("data_seed")?;
    let cases = load_dataset(&cfg.data_dir)?;
    let splits = split_cases(&cases, &SplitSpec::new(cfg.data_seed))?;
    write(&cfg.data_dir.join("splits.tsv"), write_splits(&splits))?;
    println!(
        "train {} / val {} / test {} cases",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = c.load_seeded("seed")?;
    let (cases, splits) = load_split_data(&cfg)?;
    let vocab = prompt_vocabulary();
    let tr = samples(&cases, &splits, Split::Train, false)?;
    let va = samples(&cases, &splits, Split::Val, false)?;
    write(&cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let res = train(&cfg, &vocab, &tr, &va, |e| {
        eprintln!(
            "epoch {:>3}  seg {:.4}  align {:.4}  total {:.4}  val dice {:.4}  lr {:.1e}",
            e.epoch, e.seg, e.align, e.total, e.val_dice, e.lr
        )
    })?;
    res.checkpoint.save(&cfg.out_dir.join("checkpoint"))?;
    write(&cfg.out_dir.join("epochs.tsv"), log_tsv(&res.log))?;
    let mut records = Vec::new();
    for (name, s, bench) in [("val", Split::Val, false), ("test", Split::Test, false), ("test-benchmark", Split::Test, true)] {
        let set = samples(&cases, &splits, s, bench)?;
        if set.is_empty() {
            continue;
        }
        let rep = evaluate(&res.model, &res.checkpoint.params, &vocab, &set, cfg.flags(), name, cfg.seed)?;
        println!("{name}: dice {:.4}  miou {:.4}", rep.aggregate.dice, rep.aggregate.miou);
        records.extend(rep.records());
    }
    write(&cfg.out_dir.join("metrics.jsonl"), to_json_lines(&records))?;
    println!(
        "best epoch {} (val dice {:.4}) after {} epochs; checkpoint in {}",
        res.checkpoint.epoch,
        res.checkpoint.best_val_dice,
        res.log.len(),
        cfg.out_dir.join("checkpoint").display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (cfg, _) = a.common.load()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, store) = load_model(&ckpt)?;
    let (cases, splits) = load_split_data(&cfg)?;
    let set = samples(&cases, &splits, a.split, a.benchmark)?;
    let name = if a.benchmark { format!("{}-benchmark", a.split) } else { a.split.to_string() };
    let rep = evaluate(&model, &store, &ckpt.vocab, &set, cfg.flags(), &name, cfg.seed)?;
    if let Some(dir) = &a.dump_masks {
        for s in &set {
            let prob = tmc_core::train::predict(&model, &store, &ckpt.vocab, s, cfg.flags())?;
            let bits = binarize(&prob);
            let mask = Tensor::from_fn(prob.shape(), |i| if bits[i] { 1.0 } else { 0.0 });
            let stem = format!("{}_{}", s.case_id, s.slice_id);
            write(&dir.join(format!("{stem}.pgm")), pgm::encode_p5(&pgm::from_tensor(&mask)?))?;
            write(&dir.join(format!("{stem}.prob.txt")), prob.to_debug_string())?;
        }
    }
    let mut records = rep.records();
    records.extend(seed_summary(&name, std::slice::from_ref(&rep)));
    let text = to_json_lines(&records);
    match &a.out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    eprintln!("{name}: dice {:.4}  miou {:.4} over {} cases", rep.aggregate.dice, rep.aggregate.miou, rep.aggregate.cases.len());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.common.load()?.0;
    let (cases, splits) = load_split_data(&cfg)?;
    let vocab = prompt_vocabulary();
    let tr = samples(&cases, &splits, Split::Train, false)?;
    let va = samples(&cases, &splits, Split::Val, false)?;
    let te = samples(&cases, &splits, Split::Test, false)?;
    let tb = samples(&cases, &splits, Split::Test, true)?;
    let table = run_ablation(
        &cfg,
        &vocab,
        &tr,
        &va,
        &[("test", &te), ("test-benchmark", &tb)],
        &a.seeds,
        |m| eprintln!("{m}"),
    );
    let rendered = table.render();
    print!("{rendered}");
    write(&cfg.out_dir.join("ablation.txt"), &rendered)?;
    let records: Vec<MetricRecord> = table.records();
    write(&cfg.out_dir.join("ablation.jsonl"), to_json_lines(&records))?;
    Ok(())
}

fn gradcheck(a: &GradArgs) -> Result<bool> {
    let mut ok = true;
    let results = run_op_suite(0..a.seeds, 1e-5)?;
    let mut names: Vec<&str> = results.iter().map(|r| r.name).collect();
    names.dedup();
    for name in names {
        let worst = results
            .iter()
            .filter(|r| r.name == name)
            .max_by(|x, y| x.report.max_rel_err.total_cmp(&y.report.max_rel_err))
            .expect("at least one seed");
        let pass = worst.report.max_rel_err < OP_TOL;
        ok &= pass;
        println!(
            "{} op {name:<20} max rel err {:.3e} (seed {})",
            if pass { "PASS" } else { "FAIL" },
            worst.report.max_rel_err,
            worst.seed
        );
    }
    for seed in 0..a.seeds {
        let r = end_to_end_gradcheck(seed, a.coords, E2E_EPS)?;
        let pass = r.report.max_rel_err < E2E_TOL;
        ok &= pass;
        println!(
            "{} end-to-end seed {seed}: max rel err {:.3e} over {} coordinates ({} skipped at kinks, {} params)",
            if pass { "PASS" } else { "FAIL" },
            r.report.max_rel_err,
            r.report.checked,
            r.report.skipped,
            r.params
        );
    }
    Ok(ok)
}

fn dump_attn(a: &DumpArgs) -> Result<()> {
    let (cfg, _) = a.common.load()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, store) = load_model(&ckpt)?;
    let cases = load_dataset(&cfg.data_dir)?;
    let sample = cases
        .iter()
        .filter(|c| c.case_id == a.case)
        .flat_map(|c| c.slices.iter())
        .find(|s| s.slice_id == a.slice)
        .with_context(|| format!("no slice {} of case {}", a.slice, a.case))?;
    let prompt = a.prompt.as_deref().unwrap_or(&sample.prompt);
    let tokens = tokenize(prompt, &ckpt.vocab)?;
    let mut s = Session::new(&store, false);
    let flags = tmc_core::seg::ForwardFlags { align: None, ..cfg.flags() };
    let out = model.forward(&mut s, &sample.image, &tokens, flags)?;
    let mut n = 0;
    for c in &out.cache {
        if let Some(attn) = &c.attn_vl {
            write(&a.out.join(format!("attn_stage{}.txt", c.stage)), attn.to_debug_string())?;
            n += 1;
        }
    }
    write(&a.out.join("prompt.txt"), format!("{prompt}\n"))?;
    if n == 0 {
        bail!("the model ran without fusion; no attention maps to write");
    }
    println!("wrote {n} attention maps to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData(c) => gen_data(c),
        Cmd::Split(c) => split(c),
        Cmd::Train(c) => train_cmd(c),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::DumpAttn(a) => dump_attn(a),
        Cmd::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
