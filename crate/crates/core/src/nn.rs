//! Parameterised layers shared by the text, visual and fusion modules.

use rand::Rng;
use tmc_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, Session};

/// Row-wise affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = init.weight(&format!("{name}.w"), &[d_in, d_out], d_in);
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        Ok(s.g.linear(x, w, b)?)
    }
}

/// Layer normalisation over the feature axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), &[d]),
            beta: init.zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        Ok(s.g.layer_norm(x, g, b)?)
    }

    /// Normalises a `C x H x W` grid over channels at every pixel.
    pub fn forward_grid(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (h, w) = match s.g.shape(x) {
            &[_, h, w] => (h, w),
            other => {
                return Err(Error::Shape(format!("channel norm expects C x H x W, got {other:?}")))
            }
        };
        let t = s.g.to_tokens(x)?;
        let n = self.forward(s, t)?;
        Ok(s.g.to_grid(n, h, w)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = init.weight(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k);
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        Ok(s.g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

/// Position-wise two-layer network with a 4x hidden expansion.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.fc1"), d, 4 * d, true),
            l2: Linear::new(init, &format!("{name}.fc2"), 4 * d, d, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.g.relu(h);
        self.l2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Output of one attention call. `probs` holds one `a x b` map per head.
pub struct Attended {
    pub out: Var,
    pub probs: Vec<Var>,
}

impl MultiHead {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(init, &format!("{name}.q"), d, d, false),
            wk: Linear::new(init, &format!("{name}.k"), d, d, false),
            wv: Linear::new(init, &format!("{name}.v"), d, d, false),
            wo: Linear::new(init, &format!("{name}.o"), d, d, false),
            heads,
            d,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Queries from `q_src` (`a x d`) attend over keys `k_src` and values
    /// `v_src` (`b x d`). Keys with `keep[j] == false` receive zero weight.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        keep: Option<&[bool]>,
    ) -> Result<Attended> {
        let q = self.wq.forward(s, q_src)?;
        let k = self.wk.forward(s, k_src)?;
        let v = self.wv.forward(s, v_src)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.g.slice_cols(q, h * dk, dk)?,
                    s.g.slice_cols(k, h * dk, dk)?,
                    s.g.slice_cols(v, h * dk, dk)?,
                )
            };
            let kt = s.g.transpose(kh)?;
            let logits = s.g.matmul(qh, kt)?;
            let logits = s.g.scale(logits, scale);
            let p = s.g.softmax_rows(logits, keep)?;
            if let Some(trace) = s.attention_trace.as_mut() {
                trace.push(s.g.value(p).clone());
            }
            heads.push(s.g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            s.g.concat_cols(&heads)?
        };
        let out = self.wo.forward(s, cat)?;
        Ok(Attended { out, probs })
    }
}

/// Pre-norm transformer block: `x + MHSA(norm(x))`, then `x + FFN(norm(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttnBlock {
    pub norm1: Norm,
    pub attn: MultiHead,
    pub norm2: Norm,
    pub ffn: Ffn,
}

impl SelfAttnBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(init, &format!("{name}.norm1"), d),
            attn: MultiHead::new(init, &format!("{name}.attn"), d, heads)?,
            norm2: Norm::new(init, &format!("{name}.norm2"), d),
            ffn: Ffn::new(init, &format!("{name}.ffn"), d),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let a = self.attn.forward(s, h, h, h, keep)?;
        let x = s.g.add(x, a.out)?;
        let h = self.norm2.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        Ok(s.g.add(x, f)?)
    }
}

/// Mean of per-head attention maps, for inspection.
pub fn head_mean(s: &Session<'_>, probs: &[Var]) -> Tensor {
    let first = s.g.value(probs[0]);
    let inv = 1.0 / probs.len() as f64;
    Tensor::from_fn(first.shape(), |i| {
        probs.iter().map(|&p| s.g.value(p).data()[i]).sum::<f64>() * inv
    })
}
