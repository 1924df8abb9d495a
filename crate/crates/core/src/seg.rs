//! Full segmentation network: text encoder, staged visual encoder with
//! fusion, dual CNN/ViT down paths, U-shaped decoder and sigmoid head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tmc_tensor::{Tensor, Var};

use crate::cross::{ma_loss_stage, AlignMode, AlignTerm, AlignmentHead, McmStage};
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, Norm, SelfAttnBlock};
use crate::params::{Init, ParamStore, Session};
use crate::text::{TextConfig, TextEncoder, TokenSeq};
use crate::visual::{EncoderConfig, StageFeature, VisualEncoder, STAGES};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub base_channels: usize,
    /// Common fusion width.
    pub d: usize,
    pub d_text: usize,
    pub heads: usize,
    pub text_blocks: usize,
    pub vocab_size: usize,
    /// Fusion stages, a subset of {2, 3, 4}.
    pub stages: Vec<usize>,
    /// Shared alignment width.
    pub align_dim: usize,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            patch: 4,
            base_channels: 8,
            d: 16,
            d_text: 32,
            heads: 2,
            text_blocks: 2,
            vocab_size,
            stages: vec![2, 3, 4],
            align_dim: 16,
        }
    }

    /// Smallest configuration used for end-to-end gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            image_size: 16,
            patch: 2,
            base_channels: 4,
            d: 8,
            d_text: 8,
            align_dim: 8,
            text_blocks: 1,
            ..Self::toy(vocab_size)
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            height: self.image_size,
            width: self.image_size,
            in_channels: self.in_channels,
            patch: self.patch,
            base_channels: self.base_channels,
            heads: self.heads,
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            vocab_size: self.vocab_size,
            d_text: self.d_text,
            d: self.d,
            heads: self.heads,
            blocks: self.text_blocks,
            stages: self.stages.clone(),
        }
    }

    pub fn fused(&self, stage: usize) -> bool {
        self.stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if !self.patch.is_multiple_of(2) {
            return Err(Error::Config(format!("patch {} must be even", self.patch)));
        }
        let mut sorted = self.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.stages || self.stages.iter().any(|s| !(2..=STAGES).contains(s)) {
            return Err(Error::Config(format!(
                "fusion stages {:?} must be an ascending subset of {{2, 3, 4}}",
                self.stages
            )));
        }
        for (name, v) in [("d", self.d), ("d_text", self.d_text), ("align_dim", self.align_dim)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Which parts of the text path are active in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardFlags {
    /// Cross-attention fusion on. When off, every `F_V^i` is the stage
    /// projection of `V_i` alone and the image path ignores the prompt.
    pub fusion: bool,
    /// Alignment terms computed, with this mode.
    pub align: Option<AlignMode>,
}

impl Default for ForwardFlags {
    fn default() -> Self {
        Self {
            fusion: true,
            align: Some(AlignMode::TwoSided),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardEvent {
    Capture(usize),
    Align(usize),
    Fuse(usize),
}

#[derive(Clone, Debug)]
pub struct StageCache {
    pub stage: usize,
    pub v_pre: Tensor,
    pub f_v: Tensor,
    pub attn_vl: Option<Tensor>,
}

pub struct SegOutput {
    /// `1 x H x W` foreground probabilities.
    pub prob: Var,
    pub align: Vec<(usize, AlignTerm)>,
    pub cache: Vec<StageCache>,
    pub events: Vec<ForwardEvent>,
}

/// CNN and ViT path features on one stage grid, both `C x H x W`.
#[derive(Clone, Copy, Debug)]
pub struct DualPath {
    pub stage: usize,
    pub x: Var,
    pub y: Var,
}

#[derive(Clone, Debug)]
pub struct DownCnn {
    pub conv: Conv,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct DownVit {
    pub block: SelfAttnBlock,
    pub norm: Norm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct UpCnn {
    pub conv1: Conv,
    pub norm: Norm,
    pub conv2: Conv,
}

#[derive(Clone, Debug)]
pub struct TmcModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub mcm: BTreeMap<usize, McmStage>,
    pub align: BTreeMap<usize, AlignmentHead>,
    /// `d -> C_i` map feeding fused tokens back into the encoder.
    pub back: BTreeMap<usize, Linear>,
    pub stem: Conv,
    pub down_cnn: Vec<DownCnn>,
    pub down_vit: Vec<DownVit>,
    pub bottleneck: Conv,
    /// `up[i - 1]` is the up step of stage `i`.
    pub up: Vec<UpCnn>,
    pub head: Conv,
}

impl TmcModel {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let enc = cfg.encoder();
        let c = |i: usize| if i == 0 { cfg.base_channels } else { enc.channels(i) };
        let extra = |i: usize| if cfg.fused(i) { cfg.d } else { 0 };

        let text = TextEncoder::new(&mut init, &cfg.text())?;
        let visual = VisualEncoder::new(&mut init, &enc)?;
        let mut mcm = BTreeMap::new();
        let mut align = BTreeMap::new();
        let mut back = BTreeMap::new();
        for &i in &cfg.stages {
            mcm.insert(i, McmStage::new(&mut init, &format!("mcm{i}"), c(i), cfg.d, cfg.heads)?);
            align.insert(
                i,
                AlignmentHead::new(&mut init, &format!("align{i}"), c(i), cfg.d, cfg.align_dim),
            );
            if i < STAGES {
                back.insert(i, Linear::new(&mut init, &format!("mcm{i}.back"), cfg.d, c(i), true));
            }
        }
        let stem = Conv::new(&mut init, "cnn.stem", cfg.in_channels, c(1), cfg.patch, cfg.patch, 0, true);
        let mut down_cnn = Vec::new();
        let mut down_vit = Vec::new();
        for i in 1..STAGES {
            let cin = c(i) + extra(i);
            down_cnn.push(DownCnn {
                conv: Conv::new(&mut init, &format!("cnn.down{i}"), cin, c(i + 1), 4, 2, 1, true),
                norm: Norm::new(&mut init, &format!("cnn.down{i}.norm"), c(i + 1)),
            });
            down_vit.push(DownVit {
                block: SelfAttnBlock::new(&mut init, &format!("vit.down{i}"), cin, cfg.heads)?,
                norm: Norm::new(&mut init, &format!("vit.down{i}.norm"), 4 * cin),
                proj: Linear::new(&mut init, &format!("vit.down{i}.proj"), 4 * cin, c(i + 1), false),
            });
        }
        let bottleneck = Conv::new(&mut init, "bottleneck", 2 * c(STAGES), c(STAGES), 3, 1, 1, true);
        let mut up = Vec::new();
        for i in 1..=STAGES {
            let cin = 2 * c(i) + extra(i);
            let cout = c(i - 1);
            up.push(UpCnn {
                conv1: Conv::new(&mut init, &format!("up{i}.conv1"), cin, cout, 3, 1, 1, true),
                norm: Norm::new(&mut init, &format!("up{i}.norm"), cout),
                conv2: Conv::new(&mut init, &format!("up{i}.conv2"), cout, cout, 3, 1, 1, true),
            });
        }
        let head = Conv::new(&mut init, "head", c(0), 1, 1, 1, 0, true);
        let model = Self {
            cfg: cfg.clone(),
            text,
            visual,
            mcm,
            align,
            back,
            stem,
            down_cnn,
            down_vit,
            bottleneck,
            up,
            head,
        };
        Ok((model, store))
    }

    /// One dual-path down step from stage `i` to `i + 1`. `f_v` is the fused
    /// visual grid (`d x H_i x W_i`) and must be given exactly when `i` is a
    /// fusion stage.
    pub fn down_step(
        &self,
        s: &mut Session<'_>,
        state: DualPath,
        f_v: Option<Var>,
        i: usize,
    ) -> Result<DualPath> {
        if state.stage != i || !(1..STAGES).contains(&i) {
            return Err(Error::Shape(format!("down step {i} on stage {} state", state.stage)));
        }
        let cat = |s: &mut Session<'_>, base: Var| -> Result<Var> {
            match f_v {
                Some(f) => Ok(s.g.concat_channels(&[base, f])?),
                None => Ok(base),
            }
        };
        let xt = cat(s, state.x)?;
        let yt = cat(s, state.y)?;
        let expect = self.visual.cfg.channels(i) + if self.cfg.fused(i) { self.cfg.d } else { 0 };
        if s.g.shape(xt)[0] != expect {
            return Err(Error::Shape(format!(
                "down step {i} expects {expect} channels, got {:?}",
                s.g.shape(xt)
            )));
        }

        let dc = &self.down_cnn[i - 1];
        let x = dc.conv.forward(s, xt)?;
        let x = dc.norm.forward_grid(s, x)?;
        let x = s.g.relu(x);

        let dv = &self.down_vit[i - 1];
        let (h, w) = (s.g.shape(yt)[1], s.g.shape(yt)[2]);
        let t = s.g.to_tokens(yt)?;
        let t = dv.block.forward(s, t, None)?;
        let m = s.g.merge_patches(t, h, w)?;
        let m = dv.norm.forward(s, m)?;
        let m = dv.proj.forward(s, m)?;
        let y = s.g.to_grid(m, h / 2, w / 2)?;
        Ok(DualPath { stage: i + 1, x, y })
    }

    /// `Z_{i-1} = UpCNN_i(concat(Z_i, F_V^i, X_i))` with all three on the
    /// stage-`i` grid; the output is on the grid one level finer.
    pub fn up_step(
        &self,
        s: &mut Session<'_>,
        z: Var,
        f_v: Option<Var>,
        x: Var,
        i: usize,
    ) -> Result<Var> {
        if !(1..=STAGES).contains(&i) {
            return Err(Error::Shape(format!("no up step at stage {i}")));
        }
        let mut parts = vec![z];
        parts.extend(f_v);
        parts.push(x);
        let cat = s.g.concat_channels(&parts)?;
        let u = &self.up[i - 1];
        let h = s.g.upsample2x(cat)?;
        let h = u.conv1.forward(s, h)?;
        let h = u.norm.forward_grid(s, h)?;
        let h = s.g.relu(h);
        u.conv2.forward(s, h)
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        image: &Tensor,
        tokens: &TokenSeq,
        flags: ForwardFlags,
    ) -> Result<SegOutput> {
        let img = s.g.constant(image.clone());
        self.forward_var(s, img, tokens, flags)
    }

    pub fn forward_var(
        &self,
        s: &mut Session<'_>,
        image: Var,
        tokens: &TokenSeq,
        flags: ForwardFlags,
    ) -> Result<SegOutput> {
        let cfg = &self.cfg;
        let keep = &tokens.mask;
        let needs_text = !cfg.stages.is_empty() && (flags.fusion || flags.align.is_some());
        let mut l = if needs_text {
            Some(self.text.encode(s, tokens)?)
        } else {
            None
        };

        let mut v: StageFeature = self.visual.patch_embed(s, image)?;
        let x1 = self.stem.forward(s, image)?;
        let x1 = s.g.relu(x1);
        let y1 = s.g.to_grid(v.tokens, v.h, v.w)?;
        let mut dual = DualPath { stage: 1, x: x1, y: y1 };

        let mut out = SegOutput {
            prob: image,
            align: Vec::new(),
            cache: Vec::new(),
            events: Vec::new(),
        };
        let mut skips_x = Vec::with_capacity(STAGES);
        let mut skips_f = Vec::with_capacity(STAGES);
        for i in 1..=STAGES {
            let mut f_grid = None;
            if cfg.fused(i) {
                out.events.push(ForwardEvent::Capture(i));
                let v_pre = v.tokens;
                let st = match l {
                    Some(l) => Some(self.text.project_stage(s, l, i)?),
                    None => None,
                };
                if let (Some(mode), Some(st)) = (flags.align, st) {
                    out.events.push(ForwardEvent::Align(i));
                    let term = ma_loss_stage(s, &self.align[&i], v_pre, st.cls, mode)?;
                    out.align.push((i, term));
                }
                let stage = &self.mcm[&i];
                let pv = stage.project(s, v_pre)?;
                let (f_v, f_l, attn) = match st {
                    Some(st) if flags.fusion => {
                        out.events.push(ForwardEvent::Fuse(i));
                        let fused = stage.fuse(s, pv, st.l_i, keep)?;
                        (fused.f_v, Some(fused.f_l), Some(fused.attn_vl))
                    }
                    _ => (pv, None, None),
                };
                if let (Some(cur), true) = (l, self.text.refine.contains_key(&i)) {
                    l = Some(self.text.refine(s, cur, i, f_l, keep)?);
                }
                out.cache.push(StageCache {
                    stage: i,
                    v_pre: s.g.value(v_pre).clone(),
                    f_v: s.g.value(f_v).clone(),
                    attn_vl: attn,
                });
                f_grid = Some(s.g.to_grid(f_v, v.h, v.w)?);
                if i < STAGES {
                    let b = self.back[&i].forward(s, f_v)?;
                    v.tokens = s.g.add(v.tokens, b)?;
                }
            }
            skips_x.push(dual.x);
            skips_f.push(f_grid);
            if i < STAGES {
                dual = self.down_step(s, dual, f_grid, i)?;
                v = self.visual.encode_stage(s, v)?;
            }
        }

        let both = s.g.concat_channels(&[dual.x, dual.y])?;
        let z = self.bottleneck.forward(s, both)?;
        let mut z = s.g.relu(z);
        for i in (1..=STAGES).rev() {
            z = self.up_step(s, z, skips_f[i - 1], skips_x[i - 1], i)?;
        }
        let logits = self.head.forward(s, z)?;
        let logits = s.g.upsample_nearest(logits, cfg.patch / 2)?;
        out.prob = s.g.sigmoid(logits);
        Ok(out)
    }
}
