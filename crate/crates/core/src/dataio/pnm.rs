//! Binary PPM (P6) images and PGM (P5) label maps.
//!
//! Label maps may carry a comment line `# scale=<index> cell=<size>` right
//! after the magic number.

use crate::error::{Error, Result};
use crate::micronet::Tensor;
use crate::raster::LabelMap;

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar tensor with values `v / 255 - 0.5`.
    pub fn to_tensor(&self) -> Tensor {
        self.window_tensor(0, 0, self.width, self.height)
    }

    /// `w x h` window at `(x0, y0)`; pixels past the image edge read as 0
    /// in tensor space.
    pub fn window_tensor(&self, x0: usize, y0: usize, w: usize, h: usize) -> Tensor {
        let mut t = Tensor::zeros(3, h, w);
        let plane = w * h;
        for y in 0..h.min(self.height.saturating_sub(y0)) {
            for x in 0..w.min(self.width.saturating_sub(x0)) {
                let px = self.get(x0 + x, y0 + y);
                for (c, &v) in px.iter().enumerate() {
                    t.data[c * plane + y * w + x] = v as f64 / 255.0 - 0.5;
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleMeta {
    pub index: usize,
    pub cell: usize,
}

fn header(magic: &str, w: usize, h: usize, meta: Option<ScaleMeta>) -> Vec<u8> {
    let mut s = format!("{magic}\n");
    if let Some(m) = meta {
        s.push_str(&format!("# scale={} cell={}\n", m.index, m.cell));
    }
    s.push_str(&format!("{w} {h}\n255\n"));
    s.into_bytes()
}

pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height, None);
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pgm(lm: &LabelMap, meta: Option<ScaleMeta>) -> Result<Vec<u8>> {
    let mut out = header("P5", lm.width, lm.height, meta);
    for &l in &lm.labels {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in one byte")))?;
        out.push(b);
    }
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    meta: Option<ScaleMeta>,
    data_start: usize,
}

fn parse_meta(comment: &str) -> Option<ScaleMeta> {
    let mut index = None;
    let mut cell = None;
    for tok in comment.split_whitespace() {
        if let Some(v) = tok.strip_prefix("scale=") {
            index = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("cell=") {
            cell = v.parse().ok();
        }
    }
    Some(ScaleMeta {
        index: index?,
        cell: cell?,
    })
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "bad magic number, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    let mut meta = None;
    while fields.len() < 3 {
        let Some(&b) = bytes.get(pos) else {
            return Err(Error::Format("truncated header".into()));
        };
        if b.is_ascii_whitespace() {
            pos += 1;
        } else if b == b'#' {
            let end = bytes[pos..]
                .iter()
                .position(|&c| c == b'\n')
                .map_or(bytes.len(), |e| pos + e);
            meta = meta.or_else(|| parse_meta(&String::from_utf8_lossy(&bytes[pos + 1..end])));
            pos = end;
        } else {
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format(format!("unexpected byte {b:#04x} in header")));
            }
            let v: usize = std::str::from_utf8(&bytes[start..pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| Error::Format("header number out of range".into()))?;
            fields.push(v);
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing separator after header".into())),
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("unsupported maximum value {}", fields[2])));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        meta,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let data = &bytes[h.data_start..];
    if data.len() < n {
        return Err(Error::Format(format!("truncated pixel data: {} of {n} bytes", data.len())));
    }
    if data.len() > n {
        return Err(Error::Format(format!("{} trailing bytes after pixel data", data.len() - n)));
    }
    Ok(data)
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data: data.to_vec(),
    })
}

pub fn read_pgm(bytes: &[u8]) -> Result<(LabelMap, Option<ScaleMeta>)> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    let mut lm = LabelMap::new(h.width, h.height);
    for (l, &b) in lm.labels.iter_mut().zip(data) {
        *l = b as u32;
    }
    Ok((lm, h.meta))
}
