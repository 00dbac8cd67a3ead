//! Square multi-channel float rasters stored row-major, channels interleaved
//! (H×W×C), plus PNG encoding.

use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(res: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != res * res * channels {
            return Err(Error::shape(format!(
                "raster {res}x{res}x{channels} needs {} values, got {}",
                res * res * channels,
                data.len()
            )));
        }
        Ok(Raster {
            res,
            channels,
            data,
        })
    }

    pub fn filled(res: usize, channels: usize, value: f32) -> Self {
        Raster {
            res,
            channels,
            data: vec![value; res * res * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.res * self.res
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.res + col) * self.channels + ch]
    }

    /// Channels `[start, start + count)` as a new raster.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Raster> {
        if start + count > self.channels || count == 0 {
            return Err(Error::shape(format!(
                "channel slice {start}..{} of a {}-channel raster",
                start + count,
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.pixels() * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Raster::new(self.res, count, data)
    }

    /// Selected channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Raster> {
        if channels.is_empty() || channels.iter().any(|&c| c >= self.channels) {
            return Err(Error::shape(format!(
                "channel selection {channels:?} of a {}-channel raster",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.pixels() * channels.len());
        for px in self.data.chunks_exact(self.channels) {
            data.extend(channels.iter().map(|&c| px[c]));
        }
        Raster::new(self.res, channels.len(), data)
    }

    pub fn concat_channels(parts: &[&Raster]) -> Result<Raster> {
        let res = parts
            .first()
            .map(|p| p.res)
            .ok_or_else(|| Error::shape("no rasters to concatenate"))?;
        if parts.iter().any(|p| p.res != res) {
            return Err(Error::shape("rasters differ in resolution"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(res * res * channels);
        for px in 0..res * res {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Raster::new(res, channels, data)
    }

    pub fn mse(&self, other: &Raster) -> Result<f64> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn rmse(&self, other: &Raster) -> Result<f64> {
        Ok(self.mse(other)?.sqrt())
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, res: usize) -> Result<Raster> {
        if res == 0 || res > self.res || self.res % res != 0 {
            return Err(Error::shape(format!("cannot downsample {} to {res}", self.res)));
        }
        let f = self.res / res;
        let ch = self.channels;
        let norm = 1.0 / (f * f) as f32;
        let mut data = vec![0.0f32; res * res * ch];
        for r in 0..self.res {
            for c in 0..self.res {
                let src = (r * self.res + c) * ch;
                let dst = ((r / f) * res + c / f) * ch;
                for k in 0..ch {
                    data[dst + k] += self.data[src + k] * norm;
                }
            }
        }
        Raster::new(res, ch, data)
    }

    pub fn check_same_shape(&self, other: &Raster) -> Result<()> {
        if self.res != other.res || self.channels != other.channels {
            return Err(Error::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.res, self.res, self.channels, other.res, other.res, other.channels
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` tensor.
    pub fn to_chw_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.res, self.res, self.channels), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`Raster::to_chw_tensor`]; accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_chw_tensor(t: &Tensor) -> Result<Raster> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if h != w {
            return Err(Error::shape(format!("non-square tensor {h}x{w}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Raster::new(h, c, data)
    }

    /// Stacks rasters of identical shape into a `(B, C, H, W)` batch.
    pub fn batch_tensor(items: &[&Raster], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("empty raster batch"))?;
        let ts = items
            .iter()
            .map(|r| {
                r.check_same_shape(first)?;
                r.to_chw_tensor(dtype, device)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Square 8-bit grayscale, RGB or RGBA PNG; alpha is dropped.
    pub fn read_png(path: &Path) -> Result<Raster> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Raster> {
        let bad = |e: png::DecodingError| Error::format(None, format!("png: {e}"));
        let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(None, "png too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        if info.width != info.height {
            return Err(Error::shape(format!("png is {}x{}, expected square", info.width, info.height)));
        }
        let (src, keep) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            c => return Err(Error::format(None, format!("unsupported png colour type {c:?}"))),
        };
        let data = buf[..info.buffer_size()]
            .chunks_exact(src)
            .flat_map(|px| px[..keep].iter().map(|v| *v as f32 / 255.0))
            .collect();
        Raster::new(info.width as usize, keep, data)
    }

    /// 8-bit PNG of a 1- or 3-channel raster, values clamped to [0, 1].
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::shape(format!("cannot encode {c} channels as PNG"))),
        };
        let pixels: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.res as u32, self.res as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::format(None, format!("png header: {e}")))?;
            writer
                .write_image_data(&pixels)
                .map_err(|e| Error::format(None, format!("png data: {e}")))?;
        }
        Ok(out)
    }
}

/// Arbitrary-size RGB canvas for plots and image grids.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&fill);
        }
        Canvas { width, height, rgb }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [f32; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    /// Copies a 1- or 3-channel raster with its top-left corner at `(x, y)`,
    /// each source pixel becoming a `scale`×`scale` block.
    pub fn blit(&mut self, src: &Raster, x: usize, y: usize, scale: usize) {
        for r in 0..src.res {
            for c in 0..src.res {
                let color = if src.channels == 1 {
                    let v = src.at(r, c, 0);
                    [v, v, v]
                } else {
                    [src.at(r, c, 0), src.at(r, c, 1), src.at(r, c, 2)]
                };
                for dy in 0..scale {
                    for dx in 0..scale {
                        self.put(
                            (x + c * scale + dx) as i64,
                            (y + r * scale + dy) as i64,
                            color,
                        );
                    }
                }
            }
        }
    }

    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f32; 3], thickness: i64) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * t).round() as i64;
            let y = (y0 + (y1 - y0) * t).round() as i64;
            for dy in -(thickness / 2)..=(thickness / 2) {
                for dx in -(thickness / 2)..=(thickness / 2) {
                    self.put(x + dx, y + dy, color);
                }
            }
        }
    }

    pub fn rect(&mut self, x: usize, y: usize, w: usize, h: usize, color: [f32; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx as i64, yy as i64, color);
            }
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let pixels: Vec<u8> = self
            .rgb
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        {
            let mut enc =
                png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::format(None, format!("png header: {e}")))?;
            writer
                .write_image_data(&pixels)
                .map_err(|e| Error::format(None, format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
