//! Cross-modal fusion: multi-head cross-attention, the bidirectional stage
//! block, and the per-stage alignment loss with a learnable temperature.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use tmc_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{head_mean, Attended, Ffn, Linear, MultiHead, Norm};
use crate::params::{Init, ParamId, Session};

/// Cosine denominator guard in the alignment loss.
pub const COSINE_EPS: f64 = 1e-8;

/// `Softmax(Q W_Q (K W_K)^T / sqrt(d_k)) V W_V` per head, heads concatenated,
/// then `W_O`. Keys with `keep[j] == false` get zero weight.
pub fn mhca(
    s: &mut Session<'_>,
    p: &MultiHead,
    q: Var,
    k: Var,
    v: Var,
    keep: Option<&[bool]>,
) -> Result<Attended> {
    p.forward(s, q, k, v, keep)
}

/// Output of one fusion stage.
#[derive(Clone, Debug)]
pub struct FusedPair {
    pub f_v: Var,
    pub f_l: Var,
    /// Head-averaged visual-to-language attention, `N_i x T`.
    pub attn_vl: Tensor,
}

#[derive(Clone, Debug)]
pub struct McmStage {
    /// `C_i -> d` projection applied to `V_i` before attention.
    pub proj: Linear,
    pub attn_v: MultiHead,
    pub norm_v: Norm,
    pub ffn_v: Ffn,
    pub attn_l: MultiHead,
    pub norm_l: Norm,
    pub ffn_l: Ffn,
}

impl McmStage {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_i: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, &format!("{name}.proj"), c_i, d, true),
            attn_v: MultiHead::new(init, &format!("{name}.attn_v"), d, heads)?,
            norm_v: Norm::new(init, &format!("{name}.norm_v"), d),
            ffn_v: Ffn::new(init, &format!("{name}.ffn_v"), d),
            attn_l: MultiHead::new(init, &format!("{name}.attn_l"), d, heads)?,
            norm_l: Norm::new(init, &format!("{name}.norm_l"), d),
            ffn_l: Ffn::new(init, &format!("{name}.ffn_l"), d),
        })
    }

    /// Visual tokens in the common width.
    pub fn project(&self, s: &mut Session<'_>, v_i: Var) -> Result<Var> {
        self.proj.forward(s, v_i)
    }

    /// Visual update from text first, then text update from the fused visual
    /// tokens. `v` is already in the common width.
    pub fn fuse(
        &self,
        s: &mut Session<'_>,
        v: Var,
        l_i: Var,
        keep: &[bool],
    ) -> Result<FusedPair> {
        let av = mhca(s, &self.attn_v, v, l_i, l_i, Some(keep))?;
        let attn_vl = head_mean(s, &av.probs);
        let a = s.g.add(v, av.out)?;
        let f_v = residual_ffn(s, &self.norm_v, &self.ffn_v, a)?;

        let al = mhca(s, &self.attn_l, l_i, f_v, f_v, None)?;
        let b = s.g.add(l_i, al.out)?;
        let f_l = residual_ffn(s, &self.norm_l, &self.ffn_l, b)?;
        Ok(FusedPair { f_v, f_l, attn_vl })
    }
}

fn residual_ffn(s: &mut Session<'_>, norm: &Norm, ffn: &Ffn, x: Var) -> Result<Var> {
    let h = norm.forward(s, x)?;
    let h = ffn.forward(s, h)?;
    Ok(s.g.add(x, h)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AlignMode {
    /// `-log sigma(s) - log(1 - sigma(s))`.
    #[default]
    TwoSided,
    /// `-log sigma(s)` only.
    Attract,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sided" => Ok(Self::TwoSided),
            "attract" => Ok(Self::Attract),
            other => Err(Error::Config(format!("unknown align mode {other:?}"))),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoSided => "two-sided",
            Self::Attract => "attract",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AlignmentHead {
    pub p_v: Linear,
    pub p_l: Linear,
    /// `tau = exp(log_tau)`.
    pub log_tau: ParamId,
}

impl AlignmentHead {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c_i: usize, d: usize, dim: usize) -> Self {
        Self {
            p_v: Linear::new(init, &format!("{name}.p_v"), c_i, dim, false),
            p_l: Linear::new(init, &format!("{name}.p_l"), d, dim, false),
            log_tau: init.zeros(&format!("{name}.log_tau"), &[1]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignTerm {
    pub loss: Var,
    /// Temperature-scaled similarity.
    pub s: f64,
    /// Set when either pooled embedding has (near) zero norm.
    pub degenerate: bool,
}

/// Loss on a scaled similarity `s`.
pub fn align_loss_from_similarity(s: &mut Session<'_>, sim: Var, mode: AlignMode) -> Var {
    let pos = s.g.log_sigmoid(sim);
    match mode {
        AlignMode::Attract => s.g.scale(pos, -1.0),
        AlignMode::TwoSided => {
            let neg_s = s.g.scale(sim, -1.0);
            // log(1 - sigma(s)) = log sigma(-s)
            let neg = s.g.log_sigmoid(neg_s);
            let both = s.g.add(pos, neg).expect("same shape");
            s.g.scale(both, -1.0)
        }
    }
}

/// Alignment term for one stage on pre-fusion visual tokens `v_i` and the
/// stage CLS vector.
pub fn ma_loss_stage(
    s: &mut Session<'_>,
    head: &AlignmentHead,
    v_i: Var,
    cls_i: Var,
    mode: AlignMode,
) -> Result<AlignTerm> {
    let zv = head.p_v.forward(s, v_i)?;
    let zv = s.g.mean_rows(zv)?;
    let zl = head.p_l.forward(s, cls_i)?;
    let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let degenerate = norm(s.g.value(zv)) < COSINE_EPS || norm(s.g.value(zl)) < COSINE_EPS;
    let c = s.g.cosine(zv, zl, COSINE_EPS)?;
    let lt = s.p(head.log_tau);
    let neg = s.g.scale(lt, -1.0);
    let inv_tau = s.g.exp(neg);
    let sim = s.g.mul(c, inv_tau)?;
    let value = s.g.value(sim).item();
    Ok(AlignTerm {
        loss: align_loss_from_similarity(s, sim, mode),
        s: value,
        degenerate,
    })
}

/// Arithmetic mean of the per-stage terms.
pub fn ma_loss_total(s: &mut Session<'_>, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::Config("alignment enabled with no fusion stages".into()));
    }
    Ok(s.g.mean_of(losses)?)
}
