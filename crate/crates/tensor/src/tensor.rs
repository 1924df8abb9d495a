use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};

/// Immutable dense array, row-major. Spatial tensors use (channels, height, width).
///
/// The buffer is reference counted so that cloning a tensor (for example to
/// insert a parameter into a fresh graph) never copies data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape is already known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Mutable access to the buffer, cloning it if shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Debug dump: a `shape: d0 d1 ...` header line, then whitespace-separated values.
    pub fn to_debug_string(&self) -> String {
        let mut s = String::from("shape:");
        for d in &self.shape {
            let _ = write!(s, " {d}");
        }
        s.push('\n');
        let last = self.shape.last().copied().unwrap_or(1);
        for (i, v) in self.data.iter().enumerate() {
            let _ = write!(s, "{v}");
            s.push(if (i + 1) % last == 0 { '\n' } else { ' ' });
        }
        s
    }

    pub fn parse_debug(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(TensorError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let dims = header
            .trim()
            .strip_prefix("shape:")
            .ok_or_else(|| TensorError::Parse {
                line: 1,
                msg: "header must start with `shape:`".into(),
            })?;
        let shape = dims
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| TensorError::Parse {
                line: 1,
                msg: e.to_string(),
            })?;
        if shape.is_empty() {
            return Err(TensorError::Parse {
                line: 1,
                msg: "empty shape".into(),
            });
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Parse {
                line: 1,
                msg: "shape overflows".into(),
            })?;
        let mut data = Vec::with_capacity(expected.min(1 << 20));
        for (ln, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let v = tok.parse::<f64>().map_err(|e| TensorError::Parse {
                    line: ln + 2,
                    msg: format!("{tok:?}: {e}"),
                })?;
                if data.len() == expected {
                    return Err(TensorError::Parse {
                        line: ln + 2,
                        msg: format!("more than {expected} values"),
                    });
                }
                data.push(v);
            }
        }
        if data.len() != expected {
            return Err(TensorError::Parse {
                line: 0,
                msg: format!("expected {expected} values, found {}", data.len()),
            });
        }
        Tensor::new(&shape, data).map_err(|e| TensorError::Parse {
            line: 1,
            msg: e.to_string(),
        })
    }
}
