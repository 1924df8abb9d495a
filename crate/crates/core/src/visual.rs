//! Hierarchical four-stage visual encoder: patch embedding, global
//! self-attention blocks and 2x2 patch merging.

use rand::Rng;
use tmc_tensor::Var;

use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, Norm, SelfAttnBlock};
use crate::params::{Init, ParamId, Session};

pub const STAGES: usize = 4;

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub base_channels: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Grid extents `(H_i, W_i)` of a stage.
    pub fn grid(&self, stage: usize) -> (usize, usize) {
        let f = self.patch << (stage - 1);
        (self.height / f, self.width / f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("patch, channels must be positive".into()));
        }
        let f = self.patch << (STAGES - 1);
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image {}x{} must be a positive multiple of patch*2^{} = {f}",
                self.height,
                self.width,
                STAGES - 1
            )));
        }
        Ok(())
    }
}

/// Stage tokens `V_i` in row-major grid order.
#[derive(Clone, Copy, Debug)]
pub struct StageFeature {
    pub stage: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
    pub patch: Conv,
    pub pos: ParamId,
    pub blocks: Vec<SelfAttnBlock>,
    pub merge_norm: Vec<Norm>,
    pub merge: Vec<Linear>,
}

impl VisualEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c1 = cfg.base_channels;
        let patch = Conv::new(init, "vis.patch", cfg.in_channels, c1, cfg.patch, cfg.patch, 0, true);
        let (h1, w1) = cfg.grid(1);
        let pos = init.weight("vis.pos", &[h1 * w1, c1], c1);
        let mut blocks = Vec::new();
        let mut merge_norm = Vec::new();
        let mut merge = Vec::new();
        for i in 1..STAGES {
            let c = cfg.channels(i);
            blocks.push(SelfAttnBlock::new(init, &format!("vis.block{i}"), c, cfg.heads)?);
            merge_norm.push(Norm::new(init, &format!("vis.merge{i}.norm"), 4 * c));
            merge.push(Linear::new(init, &format!("vis.merge{i}"), 4 * c, 2 * c, false));
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            pos,
            blocks,
            merge_norm,
            merge,
        })
    }

    /// Non-overlapping patch projection to `C_1` channels plus a learned
    /// position embedding.
    pub fn patch_embed(&self, s: &mut Session<'_>, image: Var) -> Result<StageFeature> {
        let cfg = &self.cfg;
        let shape = s.g.shape(image).to_vec();
        if shape != [cfg.in_channels, cfg.height, cfg.width] {
            return Err(Error::Shape(format!(
                "image shape {shape:?}, expected [{}, {}, {}]",
                cfg.in_channels, cfg.height, cfg.width
            )));
        }
        let x = self.patch.forward(s, image)?;
        let t = s.g.to_tokens(x)?;
        let pos = s.p(self.pos);
        let tokens = s.g.add(t, pos)?;
        let (h, w) = cfg.grid(1);
        Ok(StageFeature {
            stage: 1,
            h,
            w,
            c: cfg.base_channels,
            tokens,
        })
    }

    /// One attention block at stage `i`, then 2x2 merge and projection to `2 C_i`.
    pub fn encode_stage(&self, s: &mut Session<'_>, v: StageFeature) -> Result<StageFeature> {
        let i = v.stage;
        if !(1..STAGES).contains(&i) {
            return Err(Error::Shape(format!("no encoder stage after stage {i}")));
        }
        let x = self.blocks[i - 1].forward(s, v.tokens, None)?;
        let m = s.g.merge_patches(x, v.h, v.w)?;
        let m = self.merge_norm[i - 1].forward(s, m)?;
        let tokens = self.merge[i - 1].forward(s, m)?;
        Ok(StageFeature {
            stage: i + 1,
            h: v.h / 2,
            w: v.w / 2,
            c: 2 * v.c,
            tokens,
        })
    }
}
