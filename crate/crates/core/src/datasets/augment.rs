use image::{imageops, ImageBuffer, Rgb};
use rand::Rng;

use super::Image;
use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Blur / sharpness perturbation applied to training images.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub blur_sigma_range: [f32; 2],
    pub blur_kernel: usize,
    pub sharpness_factor_range: [f32; 2],
    pub apply_probability: f32,
    pub target_size: (usize, usize),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            blur_sigma_range: [0.1, 1.5],
            blur_kernel: 3,
            sharpness_factor_range: [0.5, 2.0],
            apply_probability: 0.5,
            target_size: (64, 64),
        }
    }
}

impl AugmentParams {
    pub fn for_size(target_size: (usize, usize)) -> Self {
        AugmentParams {
            target_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [blo, bhi] = self.blur_sigma_range;
        let [slo, shi] = self.sharpness_factor_range;
        if !(0.0 <= blo && blo <= bhi) {
            return Err(validation("blur sigma range must satisfy 0 <= lo <= hi"));
        }
        if !(0.0 <= slo && slo <= shi) {
            return Err(validation("sharpness range must satisfy 0 <= lo <= hi"));
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(validation("blur kernel must be odd and >= 1"));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(validation("apply probability must be in [0, 1]"));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(validation("target size must be positive"));
        }
        Ok(())
    }
}

/// Resizes to `params.target_size` and, in training mode, applies a Gaussian
/// blur and a sharpness adjustment, each with `apply_probability`.
///
/// The random stream is consumed identically on every call regardless of
/// which perturbations fire.
pub fn preprocess<R: Rng + ?Sized>(
    image: &Image,
    params: &AugmentParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Image> {
    params.validate()?;
    if image.data.len() != image.height * image.width * image.channels || image.channels != 3 {
        return Err(validation(format!(
            "expected an RGB image buffer of {}x{}x3",
            image.height, image.width
        )));
    }
    let mut out = resize(image, params.target_size);
    if mode == Mode::Train {
        let blur_on = rng.gen::<f32>() < params.apply_probability;
        let sigma = uniform(rng, params.blur_sigma_range);
        let sharp_on = rng.gen::<f32>() < params.apply_probability;
        let factor = uniform(rng, params.sharpness_factor_range);
        if blur_on && sigma > 0.0 {
            out = gaussian_blur(&out, sigma, params.blur_kernel);
        }
        if sharp_on && factor != 1.0 {
            out = adjust_sharpness(&out, factor);
        }
    }
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f32; 2]) -> f32 {
    let u: f32 = rng.gen();
    lo + (hi - lo) * u
}

pub(super) fn resize(image: &Image, (h, w): (usize, usize)) -> Image {
    if image.size() == (h, w) {
        return image.clone();
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, image.data.clone())
            .expect("buffer length checked by caller");
    let resized = imageops::resize(&buf, w as u32, h as u32, imageops::FilterType::Triangle);
    Image {
        height: h,
        width: w,
        channels: 3,
        data: resized.into_raw(),
    }
}

/// Separable Gaussian blur with an odd `kernel` width and clamped borders.
fn gaussian_blur(image: &Image, sigma: f32, kernel: usize) -> Image {
    if kernel == 1 {
        return image.clone();
    }
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let (h, w, c) = (image.height as isize, image.width as isize, image.channels);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, wt) in weights.iter().enumerate() {
                        let o = k as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += wt * src[((yy * w + xx) as usize) * c + ch];
                    }
                    dst[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
        dst
    };
    let tmp = pass(&image.data, true);
    Image {
        data: pass(&tmp, false),
        ..image.clone()
    }
}

/// Blends the image with a smoothed copy: factor 0 gives the smoothed image,
/// 1 the original, values above 1 sharpen. Border pixels keep their values in
/// the smoothed copy.
fn adjust_sharpness(image: &Image, factor: f32) -> Image {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut smooth = image.data.clone();
    if h >= 3 && w >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let wt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                            acc += wt * image.at(y + dy - 1, x + dx - 1, ch);
                        }
                    }
                    smooth[(y * w + x) * c + ch] = acc / 13.0;
                }
            }
        }
    }
    let data = image
        .data
        .iter()
        .zip(&smooth)
        .map(|(&o, &s)| o * factor + s * (1.0 - factor))
        .collect();
    Image {
        data,
        ..image.clone()
    }
}
