//! Layout operations expressed as gathers and concatenations over the core graph.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};

fn shape_err(op: &'static str, msg: String) -> TensorError {
    TensorError::Shape { op, msg }
}

impl Graph {
    fn dims2(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn dims3(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err(op, format!("expected C x H x W, got {s:?}"))),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let index: Vec<usize> = (0..c * r).map(|j| (j % r) * c + j / r).collect();
        self.gather(x, Arc::new(index), vec![c, r])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let index: Vec<usize> = (start * c..(start + len) * c).collect();
        self.gather(x, Arc::new(index), vec![len, c])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let index: Vec<usize> = (0..r * len)
            .map(|j| (j / len) * c + start + j % len)
            .collect();
        self.gather(x, Arc::new(index), vec![r, len])
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut ts = Vec::with_capacity(parts.len());
        for &p in parts {
            ts.push(self.transpose(p)?);
        }
        let stacked = self.concat0(&ts)?;
        self.transpose(stacked)
    }

    /// Channel-wise concatenation of `C_p x H x W` tensors in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_channels" })?;
        let (_, h, w) = self.dims3("concat_channels", first)?;
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("part {i} has shape {s:?}, expected spatial {h} x {w}"),
                ));
            }
        }
        self.concat0(parts)
    }

    /// Nearest-neighbour upsampling of a `C x H x W` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("upsample", x)?;
        if factor == 0 {
            return Err(shape_err("upsample", "factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let index: Vec<usize> = (0..c * ho * wo)
            .map(|j| {
                let ch = j / (ho * wo);
                let y = (j / wo) % ho / factor;
                let xx = j % wo / factor;
                (ch * h + y) * w + xx
            })
            .collect();
        self.gather(x, Arc::new(index), vec![c, ho, wo])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_nearest(x, 2)
    }

    /// `C x H x W` grid to `(H*W) x C` tokens.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("to_tokens", x)?;
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(flat)
    }

    /// `(h*w) x C` tokens back to a `C x h x w` grid.
    pub fn to_grid(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.dims2("to_grid", x)?;
        if n != h * w {
            return Err(shape_err("to_grid", format!("{n} tokens do not fill {h} x {w}")));
        }
        let t = self.transpose(x)?;
        self.reshape(t, &[c, h, w])
    }

    /// Swin-style 2x2 neighbourhood merge of a token grid: `(h*w) x C` to
    /// `(h/2 * w/2) x 4C`, concatenating the (even,even), (odd,even),
    /// (even,odd), (odd,odd) neighbours in that order.
    pub fn merge_patches(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.dims2("merge_patches", x)?;
        if n != h * w {
            return Err(shape_err("merge_patches", format!("{n} tokens do not fill {h} x {w}")));
        }
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(shape_err("merge_patches", format!("odd grid extent {h} x {w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let mut index = Vec::with_capacity(n * c);
        for y in 0..h2 {
            for xx in 0..w2 {
                for (dy, dx) in offsets {
                    let src = (2 * y + dy) * w + 2 * xx + dx;
                    index.extend(src * c..(src + 1) * c);
                }
            }
        }
        self.gather(x, Arc::new(index), vec![h2 * w2, 4 * c])
    }

    /// Row lookup: `out[t, :] = table[ids[t], :]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embed", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embed", format!("id {bad} outside table of {v} rows")));
        }
        let index: Vec<usize> = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather(table, Arc::new(index), vec![ids.len(), d])
    }
}
