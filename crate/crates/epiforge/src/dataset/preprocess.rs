//! Image decoding and the train/eval preprocessing paths.
//!
//! Both paths emit 128x128x3 tensors normalized to [-1, 1] by the fixed
//! affine map (v - 127.5) / 127.5. The eval path is a pure function; the
//! train path consumes a caller-supplied RNG so augmentation streams can be
//! pre-split per image.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::DatasetError;

/// Side length of every preprocessed tensor.
pub const TENSOR_SIDE: usize = 128;
/// Eval path intermediate resize target.
const EVAL_RESIZE: usize = 147;

/// Decoded 8-bit RGB image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    pub width: u32,
    pub height: u32,
    /// len == width * height * 3
    pub data: Vec<u8>,
}

impl PixelImage {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path).map_err(|e| DatasetError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.into_rgb8();
        Ok(PixelImage {
            width: rgb.width(),
            height: rgb.height(),
            data: rgb.into_raw(),
        })
    }

    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), (width * height * 3) as usize);
        PixelImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Preprocessed image: height x width x RGB, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    fn from_f64_pixels(pixels: &[f64]) -> Self {
        debug_assert_eq!(pixels.len(), TENSOR_SIDE * TENSOR_SIDE * 3);
        let mut data = Array3::zeros((TENSOR_SIDE, TENSOR_SIDE, 3));
        for y in 0..TENSOR_SIDE {
            for x in 0..TENSOR_SIDE {
                for c in 0..3 {
                    data[[y, x, c]] = normalize(pixels[(y * TENSOR_SIDE + x) * 3 + c]);
                }
            }
        }
        ImageTensor { data }
    }

    /// Mirror along the horizontal (width) axis.
    pub fn mirrored(&self) -> Self {
        let mut data = self.data.clone();
        for y in 0..TENSOR_SIDE {
            for x in 0..TENSOR_SIDE {
                for c in 0..3 {
                    data[[y, x, c]] = self.data[[y, TENSOR_SIDE - 1 - x, c]];
                }
            }
        }
        ImageTensor { data }
    }
}

#[inline]
fn normalize(v: f64) -> f64 {
    (v - 127.5) / 127.5
}

/// Training-path preprocessing: random 128-crop, multiplicative brightness
/// jitter in [0.8, 1.2] with clamping, horizontal flip with p = 0.5, then
/// normalization. Draw order is fixed: crop y, crop x, brightness, flip.
pub fn preprocess_train(
    image: &PixelImage,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor, DatasetError> {
    let side = TENSOR_SIDE as u32;
    if image.width < side || image.height < side {
        return Err(DatasetError::ImageTooSmall {
            width: image.width,
            height: image.height,
            min: side,
        });
    }
    let y0 = rng.gen_range(0..=image.height - side);
    let x0 = rng.gen_range(0..=image.width - side);
    let brightness: f64 = rng.gen_range(0.8..=1.2);
    let flip: bool = rng.gen_bool(0.5);

    let mut pixels = vec![0.0f64; TENSOR_SIDE * TENSOR_SIDE * 3];
    for y in 0..side {
        for x in 0..side {
            let src = image.pixel(x0 + x, y0 + y);
            let dst_x = if flip { side - 1 - x } else { x };
            let base = ((y * side + dst_x) * 3) as usize;
            for c in 0..3 {
                pixels[base + c] = (src[c] as f64 * brightness).clamp(0.0, 255.0);
            }
        }
    }
    Ok(ImageTensor::from_f64_pixels(&pixels))
}

/// Eval-path preprocessing: bilinear resize to 147x147, center crop to
/// 128x128 (floor/ceil split: 9 top/left, 10 bottom/right), normalization.
/// Pure: equal inputs give bit-equal outputs.
pub fn preprocess_eval(image: &PixelImage) -> Result<ImageTensor, DatasetError> {
    if image.width == 0 || image.height == 0 {
        return Err(DatasetError::ImageTooSmall {
            width: image.width,
            height: image.height,
            min: 1,
        });
    }
    let resized = bilinear_resize(image, EVAL_RESIZE, EVAL_RESIZE);
    let off = (EVAL_RESIZE - TENSOR_SIDE) / 2; // 9
    let mut pixels = vec![0.0f64; TENSOR_SIDE * TENSOR_SIDE * 3];
    for y in 0..TENSOR_SIDE {
        for x in 0..TENSOR_SIDE {
            for c in 0..3 {
                pixels[(y * TENSOR_SIDE + x) * 3 + c] =
                    resized[((y + off) * EVAL_RESIZE + (x + off)) * 3 + c];
            }
        }
    }
    Ok(ImageTensor::from_f64_pixels(&pixels))
}

/// Bilinear resampling with half-pixel centers, f64 per channel.
fn bilinear_resize(image: &PixelImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; out_w * out_h * 3];
    let sx = image.width as f64 / out_w as f64;
    let sy = image.height as f64 / out_h as f64;
    for oy in 0..out_h {
        // Map the output pixel center back to source coordinates.
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as u32).min(image.height - 1);
        let y1 = (y0 + 1).min(image.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as u32).min(image.width - 1);
            let x1 = (x0 + 1).min(image.width - 1);
            let wx = fx - x0 as f64;
            let p00 = image.pixel(x0, y0);
            let p01 = image.pixel(x1, y0);
            let p10 = image.pixel(x0, y1);
            let p11 = image.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p01[c] as f64 * wx;
                let bot = p10[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                out[(oy * out_w + ox) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}
