//! Byte rasters and the PNG codec used for camera images, ground truth and
//! channel dumps.

use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit raster, row-major, `channels` samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Image(format!(
                "raster dims must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Image(format!(
                "raster payload has {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Converts gray, gray+alpha and RGBA rasters to RGB.
    pub fn into_rgb(self) -> Result<Raster> {
        let data = match self.channels {
            3 => return Ok(self),
            1 => self.data.iter().flat_map(|&g| [g, g, g]).collect(),
            2 => self
                .data
                .chunks_exact(2)
                .flat_map(|p| [p[0], p[0], p[0]])
                .collect(),
            4 => self
                .data
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            n => return Err(Error::Image(format!("unsupported channel count {n}"))),
        };
        Ok(Raster {
            channels: 3,
            data,
            ..self
        })
    }
}

/// Decoded PNG samples, normalized to 8 or 16 bits per sample.
#[derive(Clone, Debug)]
pub enum PngSamples {
    Eight(Raster),
    Sixteen {
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u16>,
    },
}

pub fn decode_png(bytes: &[u8]) -> Result<PngSamples> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    match info.bit_depth {
        png::BitDepth::Eight => Ok(PngSamples::Eight(Raster::from_raw(
            width, height, channels, buf,
        )?)),
        png::BitDepth::Sixteen => {
            let data = buf
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect::<Vec<_>>();
            if data.len() != width * height * channels {
                return Err(Error::Image("16-bit payload size mismatch".into()));
            }
            Ok(PngSamples::Sixteen {
                width,
                height,
                channels,
                data,
            })
        }
        other => Err(Error::Image(format!("unsupported bit depth {other:?}"))),
    }
}

/// Reads an 8-bit PNG.
pub fn read_png(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode_png(&bytes).map_err(|e| e.context(path.display().to_string()))? {
        PngSamples::Eight(r) => Ok(r),
        PngSamples::Sixteen { .. } => Err(Error::Image(format!(
            "{}: expected 8-bit samples",
            path.display()
        ))),
    }
}

/// Reads a single-channel PNG of either depth as values in [0, 1].
pub fn read_gray_unit(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = decode_png(&bytes).map_err(|e| e.context(path.display().to_string()))?;
    match samples {
        PngSamples::Eight(r) => {
            let vals = (0..r.width * r.height)
                .map(|i| r.data[i * r.channels] as f64 / 255.0)
                .collect();
            Ok((r.width, r.height, vals))
        }
        PngSamples::Sixteen {
            width,
            height,
            channels,
            data,
        } => {
            let vals = (0..width * height)
                .map(|i| data[i * channels] as f64 / 65535.0)
                .collect();
            Ok((width, height, vals))
        }
    }
}

fn color_type(channels: usize) -> Result<png::ColorType> {
    Ok(match channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => return Err(Error::Image(format!("unsupported channel count {n}"))),
    })
}

pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        enc.set_color(color_type(raster.channels)?);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&raster.data)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    let bytes = encode_png(raster)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Shape(format!(
            "gray16 payload {} for {width}x{height}",
            data.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    w.write_image_data(&bytes)
        .map_err(|e| Error::Image(e.to_string()))
}
