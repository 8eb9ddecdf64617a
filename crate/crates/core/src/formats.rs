//! File interchange: warp-table dumps, `key = value` sidecars and 16-bit
//! quantized channel images.
//!
//! Warp dump layout (little-endian): `b"BFWT"`, then `u32` target height,
//! target width, source height, source width, then one `(u, v)` `f32` pair
//! per target pixel (row-major), then one validity byte (0 or 1) per target
//! pixel.

use std::fmt::Display;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{decode_png, write_gray16, PngSamples};
use crate::warp::WarpTable;

pub const WARP_MAGIC: &[u8; 4] = b"BFWT";
const WARP_HEADER: usize = 4 + 4 * 4;
/// Caps decoded tables at 2^26 targets so a forged header cannot demand an
/// absurd allocation.
pub const MAX_WARP_TARGETS: usize = 1 << 26;

pub fn encode_warp_table(table: &WarpTable) -> Vec<u8> {
    let n = table.target_len();
    let mut out = Vec::with_capacity(WARP_HEADER + n * 9);
    out.extend_from_slice(WARP_MAGIC);
    for d in [
        table.target_height,
        table.target_width,
        table.source_height,
        table.source_width,
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &(u, v) in &table.coords {
        out.extend_from_slice(&(u as f32).to_le_bytes());
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(table.valid.iter().map(|&b| b as u8));
    out
}

pub fn decode_warp_table(bytes: &[u8]) -> Result<WarpTable> {
    let bad = |d: String| Error::format("warp table", d);
    if bytes.len() < WARP_HEADER {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != WARP_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (th, tw, sh, sw) = (dim(0), dim(1), dim(2), dim(3));
    if sh == 0 || sw == 0 {
        return Err(bad(format!("empty source {sh}x{sw}")));
    }
    let n = th
        .checked_mul(tw)
        .filter(|&n| n <= MAX_WARP_TARGETS)
        .ok_or_else(|| bad(format!("target {th}x{tw} too large")))?;
    let expected = WARP_HEADER + n * 9;
    if bytes.len() != expected {
        return Err(bad(format!("{} bytes, expected {expected}", bytes.len())));
    }
    let body = &bytes[WARP_HEADER..];
    let mut table = WarpTable::empty(th, tw, sh, sw);
    let f = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    let flags = &body[n * 8..];
    for t in 0..n {
        let (u, v) = (f(2 * t), f(2 * t + 1));
        match flags[t] {
            0 => table.coords[t] = (u, v),
            1 => {
                if !table.in_source(u, v) {
                    return Err(bad(format!("target {t}: ({u}, {v}) outside the source")));
                }
                table.coords[t] = (u, v);
                table.valid[t] = true;
            }
            b => return Err(bad(format!("target {t}: validity byte {b}"))),
        }
    }
    Ok(table)
}

pub fn write_warp_table(path: &Path, table: &WarpTable) -> Result<()> {
    std::fs::write(path, encode_warp_table(table)).map_err(|e| Error::io(path, e))
}

pub fn read_warp_table(path: &Path) -> Result<WarpTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_warp_table(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// Ordered `key = value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sidecar {
    entries: Vec<(String, String)>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

impl Sidecar {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `key`. Panics on a key outside `[A-Za-z0-9_.-]+`
    /// or a value containing a newline.
    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        assert!(valid_key(key), "bad sidecar key {key:?}");
        let value = value.to_string();
        assert!(!value.contains(['\n', '\r']), "multi-line sidecar value");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::format("sidecar", format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::format("sidecar", format!("`{key}`: cannot parse {raw:?}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Blank lines and `#` comments are skipped; duplicate keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Sidecar::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |d: &str| Error::format("sidecar", format!("line {}: {d}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(err("bad key"));
            }
            if out.get(k).is_some() {
                return Err(err("duplicate key"));
            }
            out.entries.push((k.to_string(), v.to_string()));
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// A channel quantized to 16 bits: invalid pixels are 0, valid values map
/// linearly from `[min, max]` onto `[1, 65535]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub data: Vec<u16>,
}

pub fn quantize(width: usize, height: usize, values: &[f64], valid: Option<&[bool]>) -> Result<Quantized> {
    let n = width * height;
    if values.len() != n || valid.is_some_and(|v| v.len() != n) {
        return Err(Error::Shape(format!("channel of {} values for {width}x{height}", values.len())));
    }
    let ok = |i: usize| valid.map_or(true, |v| v[i]);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &x) in values.iter().enumerate() {
        if ok(i) {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("channel value at {i}")));
            }
            min = min.min(x);
            max = max.max(x);
        }
    }
    if min > max {
        (min, max) = (0.0, 0.0);
    }
    let span = max - min;
    let data = values
        .iter()
        .enumerate()
        .map(|(i, &x)| match (ok(i), span > 0.0) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => 1 + ((x - min) / span * 65534.0).round() as u16,
        })
        .collect();
    Ok(Quantized {
        width,
        height,
        min,
        max,
        data,
    })
}

impl Quantized {
    /// `(value, valid)` per pixel; values are exact to `(max - min) / 65534 / 2`.
    pub fn dequantize(&self) -> (Vec<f64>, Vec<bool>) {
        let span = self.max - self.min;
        self.data
            .iter()
            .map(|&q| match q {
                0 => (0.0, false),
                q => (self.min + (q - 1) as f64 / 65534.0 * span, true),
            })
            .unzip()
    }
}

/// Writes `<stem>.png` (16-bit gray) and `<stem>.txt` (sidecar holding the
/// size, the quantization range and any `extra` keys).
pub fn write_channel_dump(dir: &Path, stem: &str, q: &Quantized, extra: &Sidecar) -> Result<()> {
    write_gray16(&dir.join(format!("{stem}.png")), q.width, q.height, &q.data)?;
    let mut meta = Sidecar::new();
    meta.set("width", q.width)
        .set("height", q.height)
        .set("min", q.min)
        .set("max", q.max);
    for (k, v) in extra.entries() {
        meta.set(k, v);
    }
    let path = dir.join(format!("{stem}.txt"));
    std::fs::write(&path, meta.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_channel_dump(dir: &Path, stem: &str) -> Result<(Quantized, Sidecar)> {
    let txt = dir.join(format!("{stem}.txt"));
    let text = std::fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
    let meta = Sidecar::parse(&text).map_err(|e| e.context(txt.display().to_string()))?;
    let png = dir.join(format!("{stem}.png"));
    let bytes = std::fs::read(&png).map_err(|e| Error::io(&png, e))?;
    let (width, height, data) = match decode_png(&bytes)? {
        PngSamples::Sixteen {
            width,
            height,
            channels: 1,
            data,
        } => (width, height, data),
        _ => return Err(Error::format("channel dump", "expected 16-bit grayscale")),
    };
    if meta.require::<usize>("width")? != width || meta.require::<usize>("height")? != height {
        return Err(Error::format("channel dump", "sidecar size disagrees with the image"));
    }
    let (min, max): (f64, f64) = (meta.require("min")?, meta.require("max")?);
    if !(min.is_finite() && max.is_finite() && min <= max) {
        return Err(Error::format("channel dump", format!("bad range [{min}, {max}]")));
    }
    Ok((
        Quantized {
            width,
            height,
            min,
            max,
            data,
        },
        meta,
    ))
}
