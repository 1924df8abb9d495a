//! Portable graymap (P2 ASCII and P5 binary) reading and writing.

use tmc_tensor::Tensor;

use crate::error::{Error, Result};

/// Largest accepted pixel count.
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Data(format!("pgm: {}", msg.into()))
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.b.get(self.pos) {
            if c == b'#' {
                while self.b.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.b.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(format!("expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.b[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(format!("{what} out of range")))
    }
}

pub fn parse(bytes: &[u8]) -> Result<Gray> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(err("missing P2/P5 magic")),
    };
    let mut c = Cursor { b: bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err("zero extent"));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS)
        .ok_or_else(|| err(format!("{width} x {height} is too large")))?;
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(err(format!("maxval {maxval} outside 1..=65535")));
    }
    let maxval = maxval as u16;
    let mut data = Vec::with_capacity(n);
    if binary {
        if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err("missing separator before raster"));
        }
        let raster = &bytes[c.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if raster.len() < need {
            return Err(err(format!("raster has {} bytes, need {need}", raster.len())));
        }
        for i in 0..n {
            let v = if wide {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]])
            } else {
                u16::from(raster[i])
            };
            data.push(v);
        }
    } else {
        for _ in 0..n {
            let v = c.number("sample")?;
            data.push(u16::try_from(v).map_err(|_| err(format!("sample {v} too large")))?);
        }
    }
    if let Some(&bad) = data.iter().find(|&&v| v > maxval) {
        return Err(err(format!("sample {bad} exceeds maxval {maxval}")));
    }
    Ok(Gray {
        width,
        height,
        maxval,
        data,
    })
}

pub fn encode_p5(g: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", g.width, g.height, g.maxval).into_bytes();
    if g.maxval > 255 {
        out.extend(g.data.iter().flat_map(|v| v.to_be_bytes()));
    } else {
        out.extend(g.data.iter().map(|&v| v as u8));
    }
    out
}

pub fn encode_p2(g: &Gray) -> Vec<u8> {
    let mut out = format!("P2\n{} {}\n{}\n", g.width, g.height, g.maxval);
    for row in g.data.chunks(g.width) {
        let line: Vec<String> = row.iter().map(u16::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// `1 x H x W` tensor with values in `[0, 1]` to an 8-bit graymap.
pub fn from_tensor(t: &Tensor) -> Result<Gray> {
    let (h, w) = match t.shape() {
        &[1, h, w] => (h, w),
        &[h, w] => (h, w),
        s => return Err(err(format!("cannot write shape {s:?}"))),
    };
    Ok(Gray {
        width: w,
        height: h,
        maxval: 255,
        data: t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
            .collect(),
    })
}

/// Graymap to a `1 x H x W` tensor scaled to `[0, 1]`.
pub fn to_tensor(g: &Gray) -> Tensor {
    let m = f64::from(g.maxval);
    Tensor::new(
        &[1, g.height, g.width],
        g.data.iter().map(|&v| f64::from(v) / m).collect(),
    )
    .expect("consistent graymap")
}
