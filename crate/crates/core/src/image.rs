//! In-memory images, value normalization and color-space conversion.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::metrics::Plane;
use crate::tensor::{Dims4, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ColorSpace {
    Gray,
    Rgb,
    YCbCr,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
        }
    }
}

/// A decoded image with integer-valued samples stored as `f64`, channels
/// interleaved, in `[0, 2^bit_depth - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub color_space: ColorSpace,
    /// Free-form sensor tag such as `visible`, `infrared`, `MRI`.
    pub modality: String,
    pub pixels: Vec<f64>,
}

/// Largest sample value representable at `bit_depth`.
pub fn max_value(bit_depth: u8) -> f64 {
    ((1u32 << bit_depth) - 1) as f64
}

/// Maps `[0, max]` to `[-1, 1]`.
#[inline]
pub fn normalize(v: f64, bit_depth: u8) -> f64 {
    v / max_value(bit_depth) * 2.0 - 1.0
}

/// Maps `[-1, 1]` back to integer levels, rounding half away from zero.
#[inline]
pub fn denormalize(v: f64, bit_depth: u8) -> f64 {
    let max = max_value(bit_depth);
    math::round((v + 1.0) * 0.5 * max).clamp(0.0, max)
}

/// Full-range BT.601 luma of an RGB triple.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Full-range (JPEG) BT.601 conversion; chroma is centred on half scale.
#[inline]
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64, bit_depth: u8) -> [f64; 3] {
    let off = (1u32 << (bit_depth - 1)) as f64;
    [
        luma(r, g, b),
        off - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        off + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

#[inline]
pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64, bit_depth: u8) -> [f64; 3] {
    let off = (1u32 << (bit_depth - 1)) as f64;
    let (cb, cr) = (cb - off, cr - off);
    [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb]
}

/// Separate luma and chroma planes at the native sample scale.
#[derive(Debug, Clone, PartialEq)]
pub struct YCbCrPlanes {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub y: Vec<f64>,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

impl YCbCrPlanes {
    /// Interleaved RGB rounded and clamped to the bit depth.
    pub fn to_rgb(&self, modality: impl Into<String>) -> ImageSample {
        let max = max_value(self.bit_depth);
        let mut pixels = Vec::with_capacity(self.y.len() * 3);
        for i in 0..self.y.len() {
            for v in ycbcr_to_rgb(self.y[i], self.cb[i], self.cr[i], self.bit_depth) {
                pixels.push(math::round(v).clamp(0.0, max));
            }
        }
        ImageSample {
            width: self.width,
            height: self.height,
            bit_depth: self.bit_depth,
            color_space: ColorSpace::Rgb,
            modality: modality.into(),
            pixels,
        }
    }
}

impl ImageSample {
    pub fn new(width: usize, height: usize, bit_depth: u8, color_space: ColorSpace, pixels: Vec<f64>) -> Result<Self> {
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::Config(alloc::format!("unsupported bit depth {bit_depth}")));
        }
        let expected = width * height * color_space.channels();
        if pixels.len() != expected {
            return Err(Error::BadLength {
                expected,
                actual: pixels.len(),
            });
        }
        let max = max_value(bit_depth);
        if pixels.iter().any(|v| !(0.0..=max).contains(v)) {
            return Err(Error::Config(alloc::format!("sample outside [0, {max}]")));
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            color_space,
            modality: String::new(),
            pixels,
        })
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }

    pub fn channels(&self) -> usize {
        self.color_space.channels()
    }

    pub fn to_ycbcr(&self) -> YCbCrPlanes {
        let n = self.width * self.height;
        let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        match self.color_space {
            ColorSpace::Gray => {
                let off = (1u32 << (self.bit_depth - 1)) as f64;
                y.extend_from_slice(&self.pixels);
                cb.resize(n, off);
                cr.resize(n, off);
            }
            ColorSpace::Rgb => {
                for px in self.pixels.chunks(3) {
                    let [a, b, c] = rgb_to_ycbcr(px[0], px[1], px[2], self.bit_depth);
                    y.push(a);
                    cb.push(b);
                    cr.push(c);
                }
            }
            ColorSpace::YCbCr => {
                for px in self.pixels.chunks(3) {
                    y.push(px[0]);
                    cb.push(px[1]);
                    cr.push(px[2]);
                }
            }
        }
        YCbCrPlanes {
            width: self.width,
            height: self.height,
            bit_depth: self.bit_depth,
            y,
            cb,
            cr,
        }
    }

    /// Intensity plane at the native scale: the samples for gray images,
    /// luma otherwise.
    pub fn intensity(&self) -> Vec<f64> {
        match self.color_space {
            ColorSpace::Gray => self.pixels.clone(),
            _ => self.to_ycbcr().y,
        }
    }

    /// Single-channel `[1, 1, H, W]` network input in `[-1, 1]`.
    pub fn to_network_input(&self) -> FeatureMap {
        let data = self.intensity().into_iter().map(|v| normalize(v, self.bit_depth)).collect();
        FeatureMap::from_vec(Dims4::new(1, 1, self.height, self.width), data).expect("dims match pixel count")
    }

    /// Grayscale image from a `[1, 1, H, W]` network output.
    pub fn from_network_output(map: &FeatureMap, bit_depth: u8) -> Result<Self> {
        let d = map.dims();
        if d.batch != 1 || d.channels != 1 {
            return Err(Error::Config(alloc::format!("expected a [1, 1, H, W] map, got {d:?}")));
        }
        let pixels = map.data().iter().map(|&v| denormalize(v, bit_depth)).collect();
        Self::new(d.width, d.height, bit_depth, ColorSpace::Gray, pixels)
    }

    /// Intensity rescaled to the 8-bit `[0, 255]` range used by the metrics.
    pub fn to_metric_plane(&self) -> Plane {
        let scale = 255.0 / max_value(self.bit_depth);
        let data = self
            .intensity()
            .into_iter()
            .map(|v| if self.bit_depth == 8 { v } else { math::round(v * scale) })
            .collect();
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// 8-bit metric plane of a `[1, 1, H, W]` map in `[-1, 1]`.
pub fn plane_from_normalized(map: &FeatureMap) -> Plane {
    let d = map.dims();
    Plane {
        width: d.width,
        height: d.height,
        data: map.plane(0, 0).iter().map(|&v| denormalize(v, 8)).collect(),
    }
}
