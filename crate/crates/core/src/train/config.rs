use std::fmt::Write as _;
use std::path::PathBuf;

use crate::cross::AlignMode;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::seg::{ForwardFlags, ModelConfig};

/// Flat `key = value` training configuration. Every field is a key of the
/// same name.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    pub early_stop_patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub mcm: bool,
    pub align: bool,
    pub align_mode: AlignMode,
    pub text_ablation: bool,
    pub freeze_text: bool,
    pub augment: bool,
    /// Stop as soon as validation Dice reaches this value.
    pub target_dice: Option<f64>,
    pub image_size: usize,
    pub patch: usize,
    pub base_channels: usize,
    pub d: usize,
    pub d_text: usize,
    pub heads: usize,
    pub text_blocks: usize,
    pub stages: Vec<usize>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Synthetic benchmark size and the seed of generation and splitting.
    pub cases: usize,
    pub slices_per_case: usize,
    pub ambiguous_fraction: f64,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            max_epochs: 200,
            plateau_patience: 10,
            plateau_factor: 0.1,
            plateau_threshold: 1e-5,
            early_stop_patience: 20,
            lambda: 0.1,
            seed: 0,
            mcm: true,
            align: true,
            align_mode: AlignMode::TwoSided,
            text_ablation: false,
            freeze_text: false,
            augment: true,
            target_dice: None,
            image_size: 32,
            patch: 4,
            base_channels: 8,
            d: 16,
            d_text: 32,
            heads: 2,
            text_blocks: 2,
            stages: vec![2, 3, 4],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            cases: 600,
            slices_per_case: 1,
            ambiguous_fraction: 0.5,
            data_seed: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 30] = [
        "lr",
        "batch_size",
        "max_epochs",
        "plateau_patience",
        "plateau_factor",
        "plateau_threshold",
        "early_stop_patience",
        "lambda",
        "seed",
        "mcm",
        "align",
        "align_mode",
        "text_ablation",
        "freeze_text",
        "augment",
        "target_dice",
        "image_size",
        "patch",
        "base_channels",
        "d",
        "d_text",
        "heads",
        "text_blocks",
        "stages",
        "data_dir",
        "out_dir",
        "cases",
        "slices_per_case",
        "ambiguous_fraction",
        "data_seed",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "plateau_patience" => self.plateau_patience = parse_num(key, v)?,
            "plateau_factor" => self.plateau_factor = parse_num(key, v)?,
            "plateau_threshold" => self.plateau_threshold = parse_num(key, v)?,
            "early_stop_patience" => self.early_stop_patience = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "mcm" => self.mcm = parse_bool(key, v)?,
            "align" => self.align = parse_bool(key, v)?,
            "align_mode" => self.align_mode = v.parse()?,
            "text_ablation" => self.text_ablation = parse_bool(key, v)?,
            "freeze_text" => self.freeze_text = parse_bool(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "target_dice" => {
                self.target_dice = match v {
                    "none" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "image_size" => self.image_size = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "base_channels" => self.base_channels = parse_num(key, v)?,
            "d" => self.d = parse_num(key, v)?,
            "d_text" => self.d_text = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "text_blocks" => self.text_blocks = parse_num(key, v)?,
            "stages" => {
                self.stages = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "cases" => self.cases = parse_num(key, v)?,
            "slices_per_case" => self.slices_per_case = parse_num(key, v)?,
            "ambiguous_fraction" => self.ambiguous_fraction = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "plateau_patience" => self.plateau_patience.to_string(),
            "plateau_factor" => self.plateau_factor.to_string(),
            "plateau_threshold" => self.plateau_threshold.to_string(),
            "early_stop_patience" => self.early_stop_patience.to_string(),
            "lambda" => self.lambda.to_string(),
            "seed" => self.seed.to_string(),
            "mcm" => self.mcm.to_string(),
            "align" => self.align.to_string(),
            "align_mode" => self.align_mode.to_string(),
            "text_ablation" => self.text_ablation.to_string(),
            "freeze_text" => self.freeze_text.to_string(),
            "augment" => self.augment.to_string(),
            "target_dice" => self.target_dice.map_or("none".into(), |v| v.to_string()),
            "image_size" => self.image_size.to_string(),
            "patch" => self.patch.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "d" => self.d.to_string(),
            "d_text" => self.d_text.to_string(),
            "heads" => self.heads.to_string(),
            "text_blocks" => self.text_blocks.to_string(),
            "stages" => self
                .stages
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "cases" => self.cases.to_string(),
            "slices_per_case" => self.slices_per_case.to_string(),
            "ambiguous_fraction" => self.ambiguous_fraction.to_string(),
            "data_seed" => self.data_seed.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Later keys win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", n + 1, "expected key = value"))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::parse("config", n + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {flag:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("lr must be positive and plateau_factor in (0, 1]".into()));
        }
        if self.align && self.stages.is_empty() {
            return Err(Error::Config("alignment enabled with no fusion stages".into()));
        }
        Ok(())
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            in_channels: 1,
            patch: self.patch,
            base_channels: self.base_channels,
            d: self.d,
            d_text: self.d_text,
            heads: self.heads,
            text_blocks: self.text_blocks,
            vocab_size,
            stages: self.stages.clone(),
            align_dim: self.d,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            cases: self.cases,
            slices_per_case: self.slices_per_case,
            image_size: self.image_size,
            ambiguous_fraction: self.ambiguous_fraction,
            seed: self.data_seed,
        }
    }

    pub fn flags(&self) -> ForwardFlags {
        ForwardFlags {
            fusion: self.mcm && !self.text_ablation,
            align: self.align.then_some(self.align_mode),
        }
    }
}
