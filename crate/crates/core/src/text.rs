//! Prompt tokenization and the small trained-from-scratch text encoder.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use tmc_tensor::Var;

use crate::error::{Error, Result};
use crate::nn::{Linear, SelfAttnBlock};
use crate::params::{Init, ParamId, Session};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
/// Fixed token sequence length, CLS included.
pub const TEXT_LEN: usize = 10;

const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in order (duplicates skipped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED.iter() {
            v.push(w.to_string());
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.ids.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    fn push(&mut self, w: String) {
        self.ids.insert(w.clone(), self.tokens.len());
        self.tokens.push(w);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse("vocabulary", n + 1, "expected token<TAB>id"))?;
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::parse("vocabulary", n + 1, format!("bad token {tok:?}")));
            }
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse("vocabulary", n + 1, format!("bad id {id:?}")))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        let mut v = Self {
            tokens: Vec::with_capacity(entries.len()),
            ids: HashMap::new(),
        };
        for (expect, (id, tok)) in entries.into_iter().enumerate() {
            if id != expect {
                return Err(Error::Vocabulary(format!(
                    "ids are not dense: expected {expect}, found {id}"
                )));
            }
            if v.ids.contains_key(&tok) {
                return Err(Error::Vocabulary(format!("duplicate token {tok:?}")));
            }
            v.push(tok);
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if v.token(i) != Some(r) {
                return Err(Error::Vocabulary(format!("id {i} must be {r}")));
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    /// `true` at real tokens, `false` at padding.
    pub mask: Vec<bool>,
}

/// Lowercases, splits on whitespace and punctuation, prepends CLS,
/// truncates to [`TEXT_LEN`] and pads.
pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<TokenSeq> {
    let lower = prompt.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::Input(format!("empty prompt {prompt:?}")));
    }
    let mut ids = vec![CLS];
    ids.extend(
        words
            .iter()
            .take(TEXT_LEN - 1)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    let mask: Vec<bool> = (0..TEXT_LEN).map(|t| t < ids.len()).collect();
    ids.resize(TEXT_LEN, PAD);
    Ok(TokenSeq { ids, mask })
}

#[derive(Clone, Debug)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub d_text: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub stages: Vec<usize>,
}

/// Embedding table plus self-attention blocks, a per-stage projection to the
/// common width, and one refinement block between consecutive fusion stages.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<SelfAttnBlock>,
    pub proj: BTreeMap<usize, Linear>,
    pub refine: BTreeMap<usize, (Linear, SelfAttnBlock)>,
    pub vocab_size: usize,
}

/// Per-stage language features.
#[derive(Clone, Copy, Debug)]
pub struct StageText {
    pub l_i: Var,
    pub cls: Var,
}

impl TextEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &TextConfig) -> Result<Self> {
        let dl = cfg.d_text;
        let embed = init.weight("text.embed", &[cfg.vocab_size, dl], dl);
        let pos = init.weight("text.pos", &[TEXT_LEN, dl], dl);
        let blocks = (0..cfg.blocks)
            .map(|b| SelfAttnBlock::new(init, &format!("text.block{b}"), dl, cfg.heads))
            .collect::<Result<_>>()?;
        let mut proj = BTreeMap::new();
        let mut refine = BTreeMap::new();
        for (k, &i) in cfg.stages.iter().enumerate() {
            proj.insert(i, Linear::new(init, &format!("text.proj{i}"), dl, cfg.d, true));
            if k + 1 < cfg.stages.len() {
                let lift = Linear::new(init, &format!("text.refine{i}.lift"), cfg.d, dl, true);
                let block = SelfAttnBlock::new(init, &format!("text.refine{i}"), dl, cfg.heads)?;
                refine.insert(i, (lift, block));
            }
        }
        Ok(Self {
            embed,
            pos,
            blocks,
            proj,
            refine,
            vocab_size: cfg.vocab_size,
        })
    }

    /// Token-level features `L` (`TEXT_LEN x d_text`).
    pub fn encode(&self, s: &mut Session<'_>, tokens: &TokenSeq) -> Result<Var> {
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = s.p(self.embed);
        let e = s.g.embed(table, &tokens.ids)?;
        let pos = s.p(self.pos);
        let mut x = s.g.add(e, pos)?;
        for b in &self.blocks {
            x = b.forward(s, x, Some(&tokens.mask))?;
        }
        Ok(x)
    }

    /// `L_i = L W_i + b_i` and `CLS_i = L_i[0, :]`.
    pub fn project_stage(&self, s: &mut Session<'_>, l: Var, stage: usize) -> Result<StageText> {
        let p = self.proj.get(&stage).ok_or(Error::Stage(stage))?;
        let l_i = p.forward(s, l)?;
        let cls = s.g.slice_rows(l_i, 0, 1)?;
        Ok(StageText { l_i, cls })
    }

    /// Carries the fused language features of `stage` into the text features
    /// used by the next selected stage. Without `f_l` the block sees `L` alone.
    pub fn refine(
        &self,
        s: &mut Session<'_>,
        l: Var,
        stage: usize,
        f_l: Option<Var>,
        keep: &[bool],
    ) -> Result<Var> {
        let (lift, block) = self.refine.get(&stage).ok_or(Error::Stage(stage))?;
        let x = match f_l {
            Some(f) => {
                let up = lift.forward(s, f)?;
                s.g.add(l, up)?
            }
            None => l,
        };
        block.forward(s, x, Some(keep))
    }
}
