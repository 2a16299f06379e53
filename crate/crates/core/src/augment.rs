//! Multi-crop augmentation: random resized crops, flips, color jitter,
//! grayscale, Gaussian blur and solarization.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarmonyError, Result};
use crate::image::{Image, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterStrength {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRecipe {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Aspect-ratio range of random resized crops.
    pub aspect: (f64, f64),
    /// Side of the global views; `None` keeps the source size.
    pub global_size: Option<usize>,
    pub local_size: usize,
    pub local_crops: usize,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub jitter: JitterStrength,
    pub grayscale_p: f64,
    pub blur_p_global1: f64,
    pub blur_p_global2: f64,
    pub blur_p_local: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p_global2: f64,
    /// Solarization threshold on the `[0, 1]` intensity scale.
    pub solarize_threshold: f64,
    pub standard_scale: (f64, f64),
    /// Also produce a crop-and-flip-only view.
    pub standard_view: bool,
}

impl Default for AugmentRecipe {
    fn default() -> Self {
        Self {
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            global_size: None,
            local_size: 16,
            local_crops: 8,
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter: JitterStrength::default(),
            grayscale_p: 0.2,
            blur_p_global1: 1.0,
            blur_p_global2: 0.1,
            blur_p_local: 0.5,
            blur_sigma: (0.1, 1.0),
            solarize_p_global2: 0.2,
            solarize_threshold: 128.0 / 255.0,
            standard_scale: (0.4, 1.0),
            standard_view: false,
        }
    }
}

impl AugmentRecipe {
    /// Every stochastic transform disabled and crops covering the image.
    pub fn identity() -> Self {
        Self {
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p_global1: 0.0,
            blur_p_global2: 0.0,
            blur_p_local: 0.0,
            solarize_p_global2: 0.0,
            standard_scale: (1.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("global_scale", self.global_scale),
            ("local_scale", self.local_scale),
            ("standard_scale", self.standard_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(HarmonyError::Config(format!("{name} ({lo}, {hi}) must lie in (0, 1]")));
            }
        }
        let probs = [
            self.flip_p,
            self.jitter_p,
            self.grayscale_p,
            self.blur_p_global1,
            self.blur_p_global2,
            self.blur_p_local,
            self.solarize_p_global2,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(HarmonyError::Config(
                "augmentation probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return Err(HarmonyError::Config("invalid aspect range".into()));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(HarmonyError::Config("invalid blur sigma range".into()));
        }
        if self.local_size == 0 {
            return Err(HarmonyError::Config("local_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Source rectangle of a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// What was applied to one view, for replay and rate checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugLog {
    pub crop: Option<CropBox>,
    pub flipped: bool,
    /// `[brightness, contrast, saturation, hue]` factors when jitter ran.
    pub jitter: Option<[f64; 4]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropSet {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub standard: Option<Image>,
    /// Logs for globals, then locals, then the standard view.
    pub logs: Vec<AugLog>,
}

/// Torchvision-style random resized crop with nearest-neighbor resampling.
pub fn random_resized_crop(
    image: &Image,
    scale: (f64, f64),
    aspect: (f64, f64),
    size: usize,
    rng: &mut impl Rng,
) -> (Image, CropBox) {
    let (h, w) = (image.height, image.width);
    let area = (h * w) as f64;
    let (la, lb) = (aspect.0.ln(), aspect.1.ln());
    let mut chosen = None;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = if la < lb {
            rng.random_range(la..lb).exp()
        } else {
            aspect.0
        };
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            chosen = Some(CropBox {
                top,
                left,
                height: ch,
                width: cw,
            });
            break;
        }
    }
    let bx = chosen.unwrap_or_else(|| {
        // fallback: largest center crop within the aspect range
        let in_ratio = w as f64 / h as f64;
        let (cw, ch) = if in_ratio < aspect.0 {
            (w, ((w as f64 / aspect.0).round() as usize).min(h))
        } else if in_ratio > aspect.1 {
            (((h as f64 * aspect.1).round() as usize).min(w), h)
        } else {
            (w, h)
        };
        CropBox {
            top: (h - ch) / 2,
            left: (w - cw) / 2,
            height: ch,
            width: cw,
        }
    });
    (crop_resize(image, bx, size), bx)
}

/// Crops `bx` and resizes it to `size x size` by nearest neighbor.
pub fn crop_resize(image: &Image, bx: CropBox, size: usize) -> Image {
    let mut out = Image::new(size, size);
    for y in 0..size {
        let sy = bx.top + ((y * 2 + 1) * bx.height / (2 * size)).min(bx.height - 1);
        for x in 0..size {
            let sx = bx.left + ((x * 2 + 1) * bx.width / (2 * size)).min(bx.width - 1);
            for c in 0..CHANNELS {
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    out
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..CHANNELS {
        for y in 0..image.height {
            for x in 0..image.width {
                out.set(c, y, x, image.get(c, y, image.width - 1 - x));
            }
        }
    }
    out
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

pub fn grayscale(image: &Image) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let l = luma(image.rgb(y, x));
            out.set_rgb(y, x, [l; 3]);
        }
    }
    out
}

/// Pixels at or above `threshold` become `1 − value`.
pub fn solarize(image: &Image, threshold: f64) -> Image {
    let mut out = image.clone();
    for v in out.data.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

fn blend(image: &mut Image, other: impl Fn(usize, usize, usize) -> f64, factor: f64) {
    for c in 0..CHANNELS {
        for y in 0..image.height {
            for x in 0..image.width {
                let v = factor * image.get(c, y, x) + (1.0 - factor) * other(c, y, x);
                image.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation and hue perturbations in random order.
pub fn color_jitter(image: &Image, strength: &JitterStrength, rng: &mut impl Rng) -> (Image, [f64; 4]) {
    let factor = |s: f64, rng: &mut dyn rand::RngCore| {
        if s > 0.0 {
            rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
        } else {
            1.0
        }
    };
    let b = factor(strength.brightness, rng);
    let c = factor(strength.contrast, rng);
    let s = factor(strength.saturation, rng);
    let h = if strength.hue > 0.0 {
        rng.random_range(-strength.hue..=strength.hue)
    } else {
        0.0
    };
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut img = image.clone();
    for op in order {
        match op {
            0 => blend(&mut img, |_, _, _| 0.0, b),
            1 => {
                let mean = (0..img.height)
                    .flat_map(|y| (0..img.width).map(move |x| (y, x)))
                    .map(|(y, x)| luma(img.rgb(y, x)))
                    .sum::<f64>()
                    / (img.height * img.width) as f64;
                blend(&mut img, |_, _, _| mean, c);
            }
            2 => {
                let gray = grayscale(&img);
                blend(&mut img, |ch, y, x| gray.get(ch, y, x), s);
            }
            _ => {
                if h != 0.0 {
                    for y in 0..img.height {
                        for x in 0..img.width {
                            let mut hsv = rgb_to_hsv(img.rgb(y, x));
                            hsv[0] += h;
                            img.set_rgb(y, x, hsv_to_rgb(hsv));
                        }
                    }
                }
            }
        }
    }
    (img, [b, c, s, h])
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (image.height as isize, image.width as isize);
    let mut tmp = image.clone();
    let mut out = image.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * image.get(c, y as usize, (x + k as isize - radius).clamp(0, w - 1) as usize))
                    .sum();
                tmp.set(c, y as usize, x as usize, v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * tmp.get(c, (y + k as isize - radius).clamp(0, h - 1) as usize, x as usize))
                    .sum();
                out.set(c, y as usize, x as usize, v);
            }
        }
    }
    out
}

struct ViewSpec {
    scale: (f64, f64),
    size: usize,
    blur_p: f64,
    solarize_p: f64,
    photometric: bool,
}

fn make_view(image: &Image, recipe: &AugmentRecipe, spec: &ViewSpec, rng: &mut impl Rng) -> (Image, AugLog) {
    let (mut img, bx) = random_resized_crop(image, spec.scale, recipe.aspect, spec.size, rng);
    let mut log = AugLog {
        crop: Some(bx),
        ..AugLog::default()
    };
    if rng.random_bool(recipe.flip_p) {
        img = hflip(&img);
        log.flipped = true;
    }
    if !spec.photometric {
        return (img, log);
    }
    if rng.random_bool(recipe.jitter_p) {
        let (j, f) = color_jitter(&img, &recipe.jitter, rng);
        img = j;
        log.jitter = Some(f);
    }
    if rng.random_bool(recipe.grayscale_p) {
        img = grayscale(&img);
        log.grayscale = true;
    }
    if rng.random_bool(spec.blur_p) {
        let sigma = rng.random_range(recipe.blur_sigma.0..=recipe.blur_sigma.1);
        img = gaussian_blur(&img, sigma);
        log.blur_sigma = Some(sigma);
    }
    if rng.random_bool(spec.solarize_p) {
        img = solarize(&img, recipe.solarize_threshold);
        log.solarized = true;
    }
    (img, log)
}

/// Two global views, `local_crops` local views and, if requested, a
/// crop-and-flip-only view.
pub fn make_crops(image: &Image, recipe: &AugmentRecipe, rng: &mut impl Rng) -> Result<CropSet> {
    let gsize = recipe.global_size.unwrap_or(image.height);
    if image.height < gsize
        || image.width < gsize
        || image.height < recipe.local_size
        || image.width < recipe.local_size
    {
        return Err(HarmonyError::InvalidArgument(format!(
            "{}x{} image smaller than crop sizes {gsize}/{}",
            image.height, image.width, recipe.local_size
        )));
    }
    let mut logs = Vec::with_capacity(2 + recipe.local_crops + 1);
    let mut globals = Vec::with_capacity(2);
    for (blur_p, solarize_p) in [
        (recipe.blur_p_global1, 0.0),
        (recipe.blur_p_global2, recipe.solarize_p_global2),
    ] {
        let spec = ViewSpec {
            scale: recipe.global_scale,
            size: gsize,
            blur_p,
            solarize_p,
            photometric: true,
        };
        let (img, log) = make_view(image, recipe, &spec, rng);
        globals.push(img);
        logs.push(log);
    }
    let mut locals = Vec::with_capacity(recipe.local_crops);
    let spec = ViewSpec {
        scale: recipe.local_scale,
        size: recipe.local_size,
        blur_p: recipe.blur_p_local,
        solarize_p: 0.0,
        photometric: true,
    };
    for _ in 0..recipe.local_crops {
        let (img, log) = make_view(image, recipe, &spec, rng);
        locals.push(img);
        logs.push(log);
    }
    let standard = if recipe.standard_view {
        let (img, log) = standard_view(image, recipe.standard_scale, gsize, recipe.flip_p, rng);
        logs.push(log);
        Some(img)
    } else {
        None
    };
    Ok(CropSet {
        globals,
        locals,
        standard,
        logs,
    })
}

/// Random resized crop plus horizontal flip, nothing else.
pub fn standard_view(
    image: &Image,
    scale: (f64, f64),
    size: usize,
    flip_p: f64,
    rng: &mut impl Rng,
) -> (Image, AugLog) {
    let recipe = AugmentRecipe {
        flip_p,
        ..AugmentRecipe::default()
    };
    let spec = ViewSpec {
        scale,
        size,
        blur_p: 0.0,
        solarize_p: 0.0,
        photometric: false,
    };
    make_view(image, &recipe, &spec, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeViewPolicy {
    Standard,
    #[default]
    BothGlobals,
}

/// Views fed to pixel reconstruction.
pub fn mae_view_policy(crops: &CropSet, policy: MaeViewPolicy) -> Result<Vec<&Image>> {
    match policy {
        MaeViewPolicy::BothGlobals => Ok(crops.globals.iter().collect()),
        MaeViewPolicy::Standard => crops
            .standard
            .as_ref()
            .map(|s| vec![s])
            .ok_or_else(|| HarmonyError::InvalidArgument("standard view was not generated".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image() -> Image {
        let mut img = Image::new(32, 32);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        img
    }

    #[test]
    fn identity_recipe_keeps_globals() {
        let img = test_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crops = make_crops(&img, &AugmentRecipe::identity(), &mut rng).unwrap();
        assert_eq!(crops.globals, vec![img.clone(), img]);
        assert_eq!(crops.locals.len(), 8);
        assert_eq!(crops.locals[0].height, 16);
    }

    #[test]
    fn seeded_crops_repeat() {
        let img = test_image();
        let r = AugmentRecipe {
            standard_view: true,
            ..AugmentRecipe::default()
        };
        let a = make_crops(&img, &r, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_crops(&img, &r, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(mae_view_policy(&a, MaeViewPolicy::BothGlobals).unwrap().len(), 2);
        assert_eq!(mae_view_policy(&a, MaeViewPolicy::Standard).unwrap().len(), 1);
    }

    #[test]
    fn solarize_oracles() {
        let zero = Image::new(2, 2);
        assert_eq!(solarize(&zero, 128.0 / 255.0), zero);
        let px = Image::filled(1, 1, [200.0 / 255.0; 3]);
        let s = solarize(&px, 128.0 / 255.0);
        assert!((s.get(0, 0, 0) * 255.0 - 55.0).abs() < 1e-9);
        assert_eq!(solarize(&px, 1.5), px);
    }

    #[test]
    fn too_small_image_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_crops(&Image::new(8, 8), &AugmentRecipe::default(), &mut rng).is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in rgb.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(8, 8, [0.25, 0.5, 0.75]);
        let b = gaussian_blur(&img, 0.8);
        for (a, b) in img.data.iter().zip(&b.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
