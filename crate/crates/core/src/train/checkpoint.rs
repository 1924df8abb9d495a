use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use tmc_tensor::Tensor;

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seg::ModelConfig;
use crate::text::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const TENSORS: &str = "tensors.bin";
const VOCAB: &str = "vocab.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

impl TensorKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Param => "param",
            Self::AdamM => "adam_m",
            Self::AdamV => "adam_v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub kind: TensorKind,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    pub offset: usize,
    pub crc32: u32,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointManifest {
    pub version: u32,
    pub epoch: usize,
    pub best_val_dice: f64,
    pub adam_t: Option<u64>,
    pub rng: Option<RngState>,
    pub model: ModelConfig,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub epoch: usize,
    pub best_val_dice: f64,
    pub rng: Option<RngState>,
}

fn cerr(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::parse(MANIFEST, line, msg)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn num<T: std::str::FromStr>(line: usize, what: &str, v: Option<&str>) -> Result<T> {
    let v = v.ok_or_else(|| perr(line, format!("missing {what}")))?;
    v.parse().map_err(|_| perr(line, format!("bad {what} {v:?}")))
}

/// Parses the text manifest. The first line must declare a supported version.
pub fn parse_manifest(text: &str) -> Result<CheckpointManifest> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let version = match lines.next().map(|(_, l)| l.split_once(' ')) {
        Some(Some(("format", v))) => v
            .trim()
            .parse::<u32>()
            .map_err(|_| perr(1, format!("bad version {v:?}")))?,
        _ => return Err(perr(1, "expected `format <version>`")),
    };
    if version != CHECKPOINT_VERSION {
        return Err(cerr(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut epoch = None;
    let mut best = None;
    let mut adam_t = None;
    let mut rng = None;
    let mut model = None;
    let mut entries = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let mut f = rest.split(' ');
        match key {
            "epoch" => epoch = Some(num(n, "epoch", f.next())?),
            "best_val_dice" => {
                let bits = u64::from_str_radix(f.next().unwrap_or(""), 16)
                    .map_err(|_| perr(n, "best_val_dice must be 16 hex digits"))?;
                best = Some(f64::from_bits(bits));
            }
            "adam_t" => {
                adam_t = match rest {
                    "none" => None,
                    _ => Some(num(n, "adam_t", Some(rest))?),
                }
            }
            "rng" => {
                rng = match rest {
                    "none" => None,
                    _ => {
                        let seed = unhex32(f.next().unwrap_or(""))
                            .ok_or_else(|| perr(n, "rng seed must be 64 hex digits"))?;
                        Some(RngState {
                            seed,
                            stream: num(n, "stream", f.next())?,
                            word_pos: num(n, "word_pos", f.next())?,
                        })
                    }
                }
            }
            "model" => {
                model = Some(
                    serde_json::from_str::<ModelConfig>(rest)
                        .map_err(|e| perr(n, format!("model config: {e}")))?,
                )
            }
            "tensor" => {
                let kind = match f.next() {
                    Some("param") => TensorKind::Param,
                    Some("adam_m") => TensorKind::AdamM,
                    Some("adam_v") => TensorKind::AdamV,
                    other => return Err(perr(n, format!("bad tensor kind {other:?}"))),
                };
                let name = f.next().filter(|s| !s.is_empty()).ok_or_else(|| perr(n, "missing name"))?;
                let shape: Vec<usize> = f
                    .next()
                    .ok_or_else(|| perr(n, "missing shape"))?
                    .split(',')
                    .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<_>>()
                    .ok_or_else(|| perr(n, "bad shape"))?;
                shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| perr(n, "shape overflows"))?;
                let offset = num(n, "offset", f.next())?;
                let crc32 = u32::from_str_radix(f.next().unwrap_or(""), 16)
                    .map_err(|_| perr(n, "bad crc32"))?;
                entries.push(ManifestEntry {
                    kind,
                    name: name.to_string(),
                    shape,
                    offset,
                    crc32,
                });
            }
            other => return Err(perr(n, format!("unknown key {other:?}"))),
        }
    }
    Ok(CheckpointManifest {
        version,
        epoch: epoch.ok_or_else(|| cerr("manifest lacks epoch"))?,
        best_val_dice: best.ok_or_else(|| cerr("manifest lacks best_val_dice"))?,
        adam_t,
        rng,
        model: model.ok_or_else(|| cerr("manifest lacks model config"))?,
        entries,
    })
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bin: Vec<u8> = Vec::new();
        let mut text = format!("format {CHECKPOINT_VERSION}\n");
        text += &format!("epoch {}\n", self.epoch);
        text += &format!("best_val_dice {:016x}\n", self.best_val_dice.to_bits());
        text += &match &self.adam {
            Some(a) => format!("adam_t {}\n", a.t),
            None => "adam_t none\n".to_string(),
        };
        text += &match &self.rng {
            Some(r) => format!("rng {} {} {}\n", hex(&r.seed), r.stream, r.word_pos),
            None => "rng none\n".to_string(),
        };
        text += &format!("model {}\n", serde_json::to_string(&self.model).expect("plain config"));
        let mut put = |kind: TensorKind, name: &str, t: &Tensor| {
            let start = bin.len();
            for v in t.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&bin[start..]);
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            text += &format!(
                "tensor {} {name} {} {start} {crc:08x}\n",
                kind.as_str(),
                shape.join(",")
            );
        };
        for (id, name, t) in self.params.iter() {
            put(TensorKind::Param, name, t);
            if let Some(a) = &self.adam {
                put(TensorKind::AdamM, name, &a.m[id.index()]);
                put(TensorKind::AdamV, name, &a.v[id.index()]);
            }
        }
        let w = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        w(TENSORS, &bin)?;
        w(VOCAB, self.vocab.to_tsv().as_bytes())?;
        w(MANIFEST, text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let text = String::from_utf8(read(MANIFEST)?).map_err(|_| cerr("manifest is not UTF-8"))?;
        let m = parse_manifest(&text)?;
        let bin = read(TENSORS)?;
        let vocab_text = String::from_utf8(read(VOCAB)?).map_err(|_| cerr("vocabulary is not UTF-8"))?;
        let vocab = Vocabulary::parse_tsv(&vocab_text)?;

        let mut params = ParamStore::new();
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for e in &m.entries {
            let len = e
                .numel()
                .checked_mul(8)
                .and_then(|l| e.offset.checked_add(l).map(|end| (l, end)))
                .filter(|&(_, end)| end <= bin.len())
                .ok_or_else(|| cerr(format!("{} lies outside {TENSORS}", e.name)))?
                .0;
            let bytes = &bin[e.offset..e.offset + len];
            if crc32fast::hash(bytes) != e.crc32 {
                return Err(cerr(format!("checksum mismatch for {}", e.name)));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            match e.kind {
                TensorKind::Param => {
                    if params.id(&e.name).is_some() {
                        return Err(cerr(format!("duplicate parameter {}", e.name)));
                    }
                    params.add(e.name.clone(), t);
                }
                TensorKind::AdamM => ms.push((e.name.clone(), t)),
                TensorKind::AdamV => vs.push((e.name.clone(), t)),
            }
        }
        let adam = match m.adam_t {
            None => None,
            Some(t) => {
                let order = |list: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                    if list.len() != params.len() {
                        return Err(cerr("optimizer moments do not cover every parameter"));
                    }
                    list.into_iter()
                        .zip(params.iter())
                        .map(|((n, t), (_, pn, pt))| {
                            if n != pn || t.shape() != pt.shape() {
                                Err(cerr(format!("optimizer moment {n} does not match {pn}")))
                            } else {
                                Ok(t)
                            }
                        })
                        .collect()
                };
                Some(Adam {
                    t,
                    m: order(ms)?,
                    v: order(vs)?,
                })
            }
        };
        Ok(Self {
            model: m.model,
            vocab,
            params,
            adam,
            epoch: m.epoch,
            best_val_dice: m.best_val_dice,
            rng: m.rng,
        })
    }

    /// Copies stored values into a freshly built store with identical names
    /// and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(cerr(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (_, name, t) in self.params.iter() {
            let id = store
                .id(name)
                .ok_or_else(|| cerr(format!("model has no parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(cerr(format!("shape mismatch for {name}")));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }
}
