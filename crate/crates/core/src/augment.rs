//! Stochastic view generation: random crop without resize, horizontal flip,
//! Gaussian blur, color jitter, random grayscale and 90° rotations, plus the
//! controlled three-view protocol that shares color between the first view
//! and the key view and rotation between the second view and the key view.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::AugmentConfig;
use crate::math;
use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image, channel-major (`[3, height, width]`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(
                "Image::new",
                format!("{}x{} RGB needs {} values, got {}", height, width, CHANNELS * height * width, data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(core::iter::repeat_n(v, height * width));
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        self.data[(ch * self.height + row) * self.width + col] = v;
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[ch * hw..(ch + 1) * hw]
    }

    /// Sub-window without resampling.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({}, {}) outside {}x{} image",
                height, width, top, left, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for ch in 0..CHANNELS {
            for r in top..top + height {
                let start = (ch * self.height + r) * self.width + left;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Image { height, width, data })
    }

    /// Central square window of side `size`.
    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size > self.height || size > self.width {
            return Err(Error::invalid(format!(
                "center crop {size} larger than {}x{} image",
                self.height, self.width
            )));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }
}

/// Which augmentation groups `sample_params` draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    /// Horizontal flip and blur.
    pub base: bool,
    /// Color jitter and grayscale.
    pub color: bool,
    pub rotation: bool,
}

impl Policy {
    pub const ALL: Policy = Policy {
        base: true,
        color: true,
        rotation: true,
    };
    pub const NONE: Policy = Policy {
        base: false,
        color: false,
        rotation: false,
    };
    pub const BASE_COLOR: Policy = Policy {
        base: true,
        color: true,
        rotation: false,
    };
}

/// One color-jitter draw. `order` is the application order of
/// brightness (0), contrast (1), saturation (2) and hue (3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [u8; 4],
}

/// Full record of one view's augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_size: usize,
    pub hflip: bool,
    pub blur_sigma: Option<f64>,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    /// Number of 90° counter-clockwise turns.
    pub rotation_k: u8,
}

impl AugParams {
    /// Copies the color-affecting fields of `other`.
    pub fn with_color_of(mut self, other: &AugParams) -> Self {
        self.jitter = other.jitter;
        self.grayscale = other.grayscale;
        self
    }

    pub fn same_color(&self, other: &AugParams) -> bool {
        self.jitter == other.jitter && self.grayscale == other.grayscale
    }
}

struct BaseDraw {
    top: usize,
    left: usize,
    hflip: bool,
    blur_sigma: Option<f64>,
}

fn draw_base<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugmentConfig,
    base: bool,
    src_h: usize,
    src_w: usize,
) -> Result<BaseDraw> {
    let c = cfg.crop_size;
    if c > src_h || c > src_w {
        return Err(Error::invalid(format!(
            "crop {c} larger than {src_h}x{src_w} source"
        )));
    }
    let top = rng.random_range(0..=src_h - c);
    let left = rng.random_range(0..=src_w - c);
    let (hflip, blur_sigma) = if base {
        let hflip = rng.random_bool(cfg.hflip_prob);
        let blur = rng.random_bool(cfg.blur_prob);
        let sigma = rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        (hflip, blur.then_some(sigma))
    } else {
        (false, None)
    };
    Ok(BaseDraw {
        top,
        left,
        hflip,
        blur_sigma,
    })
}

fn draw_color<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> (Option<Jitter>, bool) {
    let apply = rng.random_bool(cfg.jitter_prob);
    let factor = |rng: &mut R, s: f64| rng.random_range(1.0 - s..=1.0 + s);
    let brightness = factor(rng, cfg.brightness);
    let contrast = factor(rng, cfg.contrast);
    let saturation = factor(rng, cfg.saturation);
    let hue = rng.random_range(-cfg.hue..=cfg.hue);
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let jitter = apply.then_some(Jitter {
        brightness,
        contrast,
        saturation,
        hue,
        order,
    });
    let grayscale = rng.random_bool(cfg.grayscale_prob);
    (jitter, grayscale)
}

fn draw_rotation<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> u8 {
    if cfg.rotation_includes_identity {
        rng.random_range(0..4)
    } else {
        rng.random_range(1..4)
    }
}

/// Draws one view's parameters. Groups switched off in `policy` stay at
/// their identity values; the crop offset is always drawn.
pub fn sample_params<R: Rng + ?Sized>(
    rng: &mut R,
    policy: Policy,
    cfg: &AugmentConfig,
    src_h: usize,
    src_w: usize,
) -> Result<AugParams> {
    let base = draw_base(rng, cfg, policy.base, src_h, src_w)?;
    let (jitter, grayscale) = if policy.color {
        draw_color(rng, cfg)
    } else {
        (None, false)
    };
    let rotation_k = if policy.rotation {
        draw_rotation(rng, cfg)
    } else {
        0
    };
    Ok(AugParams {
        crop_top: base.top,
        crop_left: base.left,
        crop_size: cfg.crop_size,
        hflip: base.hflip,
        blur_sigma: base.blur_sigma,
        jitter,
        grayscale,
        rotation_k,
    })
}

/// Renders a view: crop → flip → color jitter → grayscale → blur → rotation.
pub fn apply(image: &Image, p: &AugParams) -> Result<Image> {
    if p.rotation_k > 3 {
        return Err(Error::invalid(format!("rotation_k {} not in 0..4", p.rotation_k)));
    }
    if let Some(s) = p.blur_sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("blur sigma {s}")));
        }
    }
    let mut img = image.crop(p.crop_top, p.crop_left, p.crop_size, p.crop_size)?;
    if p.hflip {
        img = hflip(&img);
    }
    if let Some(j) = &p.jitter {
        color_jitter(&mut img, j);
    }
    if p.grayscale {
        grayscale(&mut img);
    }
    if let Some(s) = p.blur_sigma {
        img = gaussian_blur(&img, s);
    }
    Ok(rotate(&img, p.rotation_k))
}

pub fn hflip(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    for ch in 0..CHANNELS {
        for r in 0..h {
            for c in 0..w {
                out.set(ch, r, w - 1 - c, img.get(ch, r, c));
            }
        }
    }
    out
}

/// Rotates by `k` quarter turns counter-clockwise. One turn sends source
/// pixel `(r, c)` of an `H×W` image to `(W−1−c, r)`.
pub fn rotate(img: &Image, k: u8) -> Image {
    let (h, w) = (img.height, img.width);
    let k = k % 4;
    if k == 0 {
        return img.clone();
    }
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Image {
        height: oh,
        width: ow,
        data: vec![0.0; img.data.len()],
    };
    for ch in 0..CHANNELS {
        for r in 0..h {
            for c in 0..w {
                let (nr, nc) = match k {
                    1 => (w - 1 - c, r),
                    2 => (h - 1 - r, w - 1 - c),
                    _ => (c, h - 1 - r),
                };
                out.set(ch, nr, nc, img.get(ch, r, c));
            }
        }
    }
    out
}

pub fn grayscale(img: &mut Image) {
    let lum = img.luminance();
    let hw = lum.len();
    for ch in 0..CHANNELS {
        img.data[ch * hw..(ch + 1) * hw].copy_from_slice(&lum);
    }
    img.clamp();
}

pub fn color_jitter(img: &mut Image, j: &Jitter) {
    for op in j.order {
        match op {
            0 => img.data.iter_mut().for_each(|v| *v *= j.brightness),
            1 => {
                let lum = img.luminance();
                let mean = lum.iter().sum::<f64>() / lum.len() as f64;
                img.data
                    .iter_mut()
                    .for_each(|v| *v = mean + j.contrast * (*v - mean));
            }
            2 => {
                let lum = img.luminance();
                let hw = lum.len();
                for ch in 0..CHANNELS {
                    for (v, g) in img.data[ch * hw..(ch + 1) * hw].iter_mut().zip(&lum) {
                        *v = g + j.saturation * (*v - g);
                    }
                }
            }
            _ => shift_hue(img, j.hue),
        }
        img.clamp();
    }
}

fn shift_hue(img: &mut Image, shift: f64) {
    let hw = img.height * img.width;
    for i in 0..hw {
        let rgb = [img.data[i], img.data[hw + i], img.data[2 * hw + i]];
        let (h, s, v) = rgb_to_hsv(rgb);
        let mut h = h + shift;
        h -= math::floor(h);
        let [r, g, b] = hsv_to_rgb(h, s, v);
        img.data[i] = r;
        img.data[hw + i] = g;
        img.data[2 * hw + i] = b;
    }
}

/// Hue as a fraction of the full circle.
fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h - math::floor(h), s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = math::floor(h6);
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Normalized 1-D Gaussian of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge-clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for ch in 0..CHANNELS {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let cc = (c + i as isize - radius).clamp(0, w - 1);
                    acc += kv * img.get(ch, r as usize, cc as usize);
                }
                tmp.set(ch, r as usize, c as usize, acc);
            }
        }
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let rr = (r + i as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp.get(ch, rr as usize, c as usize);
                }
                out.set(ch, r as usize, c as usize, acc);
            }
        }
    }
    out.clamp();
    out
}

/// The three views of one input with their parameter records.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriplet {
    /// Query view for the instance branch (`I₁`).
    pub first: Image,
    /// Second query view (`I₂`).
    pub second: Image,
    /// Key view (`I⁺`).
    pub positive: Image,
    pub first_params: AugParams,
    pub second_params: AugParams,
    pub positive_params: AugParams,
}

/// Controlled views: `I₁` shares `I⁺`'s color draw but never its rotation;
/// `I₂` shares `I⁺`'s rotation with its own color draw. Crop, flip and blur
/// are drawn independently for every view.
pub fn make_controlled_views<R: Rng + ?Sized>(
    image: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<ViewTriplet> {
    let (h, w) = (image.height, image.width);
    let positive_params = sample_params(rng, Policy::ALL, cfg, h, w)?;

    let base = draw_base(rng, cfg, true, h, w)?;
    let mut rotation_k = draw_rotation(rng, cfg);
    while rotation_k == positive_params.rotation_k {
        rotation_k = draw_rotation(rng, cfg);
    }
    let first_params = AugParams {
        crop_top: base.top,
        crop_left: base.left,
        crop_size: cfg.crop_size,
        hflip: base.hflip,
        blur_sigma: base.blur_sigma,
        jitter: None,
        grayscale: false,
        rotation_k,
    }
    .with_color_of(&positive_params);

    let mut second_params = sample_params(rng, Policy::BASE_COLOR, cfg, h, w)?;
    second_params.rotation_k = positive_params.rotation_k;

    Ok(ViewTriplet {
        first: apply(image, &first_params)?,
        second: apply(image, &second_params)?,
        positive: apply(image, &positive_params)?,
        first_params,
        second_params,
        positive_params,
    })
}

/// Three views with independent base + color draws and no rotation.
pub fn make_independent_views<R: Rng + ?Sized>(
    image: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<ViewTriplet> {
    let (h, w) = (image.height, image.width);
    let positive_params = sample_params(rng, Policy::BASE_COLOR, cfg, h, w)?;
    let first_params = sample_params(rng, Policy::BASE_COLOR, cfg, h, w)?;
    let second_params = sample_params(rng, Policy::BASE_COLOR, cfg, h, w)?;
    Ok(ViewTriplet {
        first: apply(image, &first_params)?,
        second: apply(image, &second_params)?,
        positive: apply(image, &positive_params)?,
        first_params,
        second_params,
        positive_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Tag};

    fn gray_image(h: usize, w: usize, vals: &[f64]) -> Image {
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(vals);
        }
        Image::new(h, w, data).unwrap()
    }

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, 0, 0, Tag::Init);
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Image::new(h, w, data).unwrap()
    }

    fn identity(size: usize) -> AugParams {
        AugParams {
            crop_top: 0,
            crop_left: 0,
            crop_size: size,
            hflip: false,
            blur_sigma: None,
            jitter: None,
            grayscale: false,
            rotation_k: 0,
        }
    }

    #[test]
    fn quarter_turn_pixel_map() {
        let img = gray_image(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = AugParams {
            rotation_k: 1,
            ..identity(2)
        };
        let out = apply(&img, &p).unwrap();
        assert_eq!(out.plane(0), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(out.plane(2), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rotation_composes_as_a_group() {
        let img = noise(5, 7, 1);
        for a in 0..4u8 {
            for b in 0..4u8 {
                assert_eq!(rotate(&rotate(&img, a), b), rotate(&img, (a + b) % 4));
            }
        }
        assert_eq!(rotate(&rotate(&img, 1), 1), rotate(&img, 2));
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = Image::filled(9, 6, [0.3, 0.6, 0.9]);
        for sigma in [0.1, 0.7, 2.0] {
            let out = gaussian_blur(&img, sigma);
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn grayscale_uses_luminance() {
        let mut img = Image::new(1, 1, vec![1.0, 0.5, 0.0]).unwrap();
        grayscale(&mut img);
        let y = 0.299 + 0.587 * 0.5;
        assert!(img.data().iter().all(|&v| (v - y).abs() < 1e-15));
    }

    #[test]
    fn hsv_round_trip() {
        let img = noise(4, 4, 3);
        let mut shifted = img.clone();
        shift_hue(&mut shifted, 0.0);
        for (a, b) in img.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_policy_only_crops() {
        let cfg = AugmentConfig::default();
        let mut rng = stream(0, 0, 0, Tag::Views);
        let p = sample_params(&mut rng, Policy::NONE, &cfg, 64, 64).unwrap();
        assert_eq!(
            p,
            AugParams {
                crop_top: p.crop_top,
                crop_left: p.crop_left,
                ..identity(cfg.crop_size)
            }
        );
    }

    #[test]
    fn crop_larger_than_source_is_error() {
        let cfg = AugmentConfig::default();
        let mut rng = stream(0, 0, 0, Tag::Views);
        assert!(sample_params(&mut rng, Policy::ALL, &cfg, 16, 64).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = AugmentConfig::default();
        let a = sample_params(&mut stream(9, 1, 2, Tag::Views), Policy::ALL, &cfg, 64, 64).unwrap();
        let b = sample_params(&mut stream(9, 1, 2, Tag::Views), Policy::ALL, &cfg, 64, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hflip_frequency() {
        let cfg = AugmentConfig::default();
        let mut rng = stream(5, 0, 0, Tag::Views);
        let flips = (0..10_000)
            .filter(|_| {
                sample_params(&mut rng, Policy::ALL, &cfg, 64, 64)
                    .unwrap()
                    .hflip
            })
            .count();
        let freq = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    #[test]
    fn views_stay_in_unit_range_and_crop_size() {
        let cfg = AugmentConfig::default();
        let img = noise(40, 48, 11);
        for i in 0..50 {
            let t = make_controlled_views(&img, &mut stream(2, 0, i, Tag::Views), &cfg).unwrap();
            for v in [&t.first, &t.second, &t.positive] {
                assert_eq!((v.height(), v.width()), (cfg.crop_size, cfg.crop_size));
                assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn controlled_views_contract() {
        let cfg = AugmentConfig::default();
        let img = noise(40, 40, 4);
        let t = make_controlled_views(&img, &mut stream(1, 0, 0, Tag::Views), &cfg).unwrap();
        assert!(t.first_params.same_color(&t.positive_params));
        assert_ne!(t.first_params.rotation_k, t.positive_params.rotation_k);
        assert_eq!(t.second_params.rotation_k, t.positive_params.rotation_k);
        let again = make_controlled_views(&img, &mut stream(1, 0, 0, Tag::Views), &cfg).unwrap();
        assert_eq!(t, again);
        for (view, params) in [(&t.first, &t.first_params), (&t.second, &t.second_params)] {
            assert_eq!(view, &apply(&img, params).unwrap());
        }
    }
}
