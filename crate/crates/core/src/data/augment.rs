//! Weak, strong and template augmentation pipelines.
//!
//! Every pipeline first samples a list of [`Transform`]s from a seed and then
//! applies it, so a view always carries the exact record of what was done to
//! it. Geometric transforms act on the image and mask alike; photometric
//! transforms only ever touch the image.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::{GrayImage, LabelMask};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeomOp {
    FlipH,
    FlipV,
    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    Rot90 { quarter_turns: u8 },
    /// Integer shift with edge replication.
    Translate { dx: i32, dy: i32 },
    /// Crop of a continuous box resized back to the input resolution.
    CropResize {
        top: f64,
        left: f64,
        height: f64,
        width: f64,
        /// Area of the box relative to the input.
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhotoOp {
    Brightness { delta: f64 },
    Contrast { factor: f64 },
    Gamma { gamma: f64 },
    Blur { sigma: f64 },
    Cutout { top: usize, left: usize, height: usize, width: usize, fill: f64 },
    Noise { sigma: f64, seed: u64 },
    Sharpen { amount: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Geom(GeomOp),
    Photo(PhotoOp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub image: GrayImage,
    pub mask: Option<LabelMask>,
    pub transforms: Vec<Transform>,
}

impl AugmentedView {
    pub fn identity(image: GrayImage, mask: Option<LabelMask>) -> Self {
        Self {
            image,
            mask,
            transforms: Vec::new(),
        }
    }

    pub fn geometry(&self) -> impl Iterator<Item = &GeomOp> {
        self.transforms.iter().filter_map(|t| match t {
            Transform::Geom(g) => Some(g),
            Transform::Photo(_) => None,
        })
    }

    /// Replays this view's geometric transforms on another mask.
    pub fn replay_on_mask(&self, mask: &LabelMask) -> LabelMask {
        self.geometry().fold(mask.clone(), |m, op| geom_mask(&m, op))
    }

    /// Replays this view's geometric transforms on a float raster,
    /// sampling bilinearly.
    pub fn replay_on_raster(&self, raster: &Raster) -> Raster {
        self.geometry()
            .fold(raster.clone(), |r, op| geom_raster(&r, op, Interp::Bilinear))
    }
}

/// Plain float raster used by the geometric kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    fn of_image(img: &GrayImage) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img.pixels().to_vec(),
        }
    }

    fn into_image(self) -> GrayImage {
        GrayImage::from_clamped(self.height, self.width, self.data)
    }

    fn at_clamped(&self, y: i64, x: i64) -> f64 {
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Interp {
    Nearest,
    Bilinear,
}

/// Output shape and source coordinate of each output pixel.
fn source_coords(op: &GeomOp, h: usize, w: usize) -> (usize, usize, Box<dyn Fn(usize, usize) -> (f64, f64)>) {
    let hf = h as f64;
    let wf = w as f64;
    match *op {
        GeomOp::FlipH => (h, w, Box::new(move |r, c| (r as f64, (w - 1 - c) as f64))),
        GeomOp::FlipV => (h, w, Box::new(move |r, c| ((h - 1 - r) as f64, c as f64))),
        GeomOp::Rot90 { quarter_turns } => match quarter_turns % 4 {
            0 => (h, w, Box::new(|r, c| (r as f64, c as f64))),
            // out[r][c] = in[c][w-1-r], output is w x h
            1 => (w, h, Box::new(move |r, c| (c as f64, (w - 1 - r) as f64))),
            2 => (h, w, Box::new(move |r, c| ((h - 1 - r) as f64, (w - 1 - c) as f64))),
            _ => (w, h, Box::new(move |r, c| ((h - 1 - c) as f64, r as f64))),
        },
        GeomOp::Translate { dx, dy } => (
            h,
            w,
            Box::new(move |r, c| ((r as i64 - i64::from(dy)) as f64, (c as i64 - i64::from(dx)) as f64)),
        ),
        GeomOp::CropResize {
            top,
            left,
            height,
            width,
            ..
        } => (
            h,
            w,
            Box::new(move |r, c| {
                (
                    top + (r as f64 + 0.5) * height / hf - 0.5,
                    left + (c as f64 + 0.5) * width / wf - 0.5,
                )
            }),
        ),
    }
}

fn geom_raster(src: &Raster, op: &GeomOp, interp: Interp) -> Raster {
    let (h, w, map) = source_coords(op, src.height, src.width);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = map(r, c);
            let v = match interp {
                Interp::Nearest => src.at_clamped((y + 0.5).floor() as i64, (x + 0.5).floor() as i64),
                Interp::Bilinear => {
                    let y0 = y.floor();
                    let x0 = x.floor();
                    let fy = y - y0;
                    let fx = x - x0;
                    let (y0, x0) = (y0 as i64, x0 as i64);
                    let a = src.at_clamped(y0, x0);
                    let b = src.at_clamped(y0, x0 + 1);
                    let cc = src.at_clamped(y0 + 1, x0);
                    let d = src.at_clamped(y0 + 1, x0 + 1);
                    if fx == 0.0 && fy == 0.0 {
                        a
                    } else {
                        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d)
                    }
                }
            };
            data.push(v);
        }
    }
    Raster {
        height: h,
        width: w,
        data,
    }
}

pub fn geom_image(img: &GrayImage, op: &GeomOp) -> GrayImage {
    geom_raster(&Raster::of_image(img), op, Interp::Bilinear).into_image()
}

pub fn geom_mask(mask: &LabelMask, op: &GeomOp) -> LabelMask {
    let src = Raster {
        height: mask.height(),
        width: mask.width(),
        data: mask.labels().iter().map(|l| f64::from(*l)).collect(),
    };
    let out = geom_raster(&src, op, Interp::Nearest);
    LabelMask::new(
        out.height,
        out.width,
        mask.num_classes(),
        out.data.iter().map(|v| *v as u8).collect(),
    )
    .expect("nearest sampling preserves labels")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

pub(crate) fn gaussian_blur(src: &Raster, sigma: f64) -> Raster {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (h, w) = (src.height, src.width);
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src.at_clamped(r as i64, c as i64 + j as i64 - radius))
                .sum();
        }
    }
    let tmp = Raster {
        height: h,
        width: w,
        data: tmp,
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp.at_clamped(r as i64 + j as i64 - radius, c as i64))
                .sum();
        }
    }
    Raster {
        height: h,
        width: w,
        data: out,
    }
}

pub fn photo_image(img: &GrayImage, op: &PhotoOp) -> GrayImage {
    let mut r = Raster::of_image(img);
    match *op {
        PhotoOp::Brightness { delta } => r.data.iter_mut().for_each(|v| *v += delta),
        PhotoOp::Contrast { factor } => {
            let mean = img.mean();
            r.data.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
        }
        PhotoOp::Gamma { gamma } => r.data.iter_mut().for_each(|v| *v = v.max(0.0).powf(gamma)),
        PhotoOp::Blur { sigma } => r = gaussian_blur(&r, sigma),
        PhotoOp::Cutout {
            top,
            left,
            height,
            width,
            fill,
        } => {
            for y in top..(top + height).min(r.height) {
                for x in left..(left + width).min(r.width) {
                    r.data[y * r.width + x] = fill;
                }
            }
        }
        PhotoOp::Noise { sigma, seed } => {
            let mut g = rng::rng_from_seed(seed);
            let n = Normal::new(0.0, sigma).expect("non-negative sigma");
            r.data.iter_mut().for_each(|v| *v += n.sample(&mut g));
        }
        PhotoOp::Sharpen { amount } => {
            let blurred = gaussian_blur(&r, 1.0);
            for (v, b) in r.data.iter_mut().zip(&blurred.data) {
                *v += amount * (*v - b);
            }
        }
    }
    r.into_image()
}

/// Applies a transform list to an image and, for geometric steps, a mask.
pub fn apply(image: &GrayImage, mask: Option<&LabelMask>, transforms: &[Transform]) -> AugmentedView {
    let mut img = image.clone();
    let mut m = mask.cloned();
    for t in transforms {
        match t {
            Transform::Geom(g) => {
                img = geom_image(&img, g);
                m = m.map(|mm| geom_mask(&mm, g));
            }
            Transform::Photo(p) => img = photo_image(&img, p),
        }
    }
    AugmentedView {
        image: img,
        mask: m,
        transforms: transforms.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakAugConfig {
    pub flip_prob: f64,
    /// Largest shift as a fraction of the image side.
    pub max_shift: f64,
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_shift: 0.05,
        }
    }
}

pub fn sample_weak(cfg: &WeakAugConfig, height: usize, width: usize, r: &mut Rng) -> Vec<Transform> {
    let mut ts = Vec::new();
    if r.random_bool(cfg.flip_prob) {
        ts.push(Transform::Geom(GeomOp::FlipH));
    }
    let mx = (cfg.max_shift * width as f64).floor() as i32;
    let my = (cfg.max_shift * height as f64).floor() as i32;
    let dx = if mx > 0 { r.random_range(-mx..=mx) } else { 0 };
    let dy = if my > 0 { r.random_range(-my..=my) } else { 0 };
    if dx != 0 || dy != 0 {
        ts.push(Transform::Geom(GeomOp::Translate { dx, dy }));
    }
    ts
}

pub fn weak_augment_with(
    image: &GrayImage,
    mask: Option<&LabelMask>,
    cfg: &WeakAugConfig,
    seed: u64,
) -> AugmentedView {
    let mut r = rng::rng_from_seed(seed);
    let ts = sample_weak(cfg, image.height(), image.width(), &mut r);
    apply(image, mask, &ts)
}

/// Random horizontal flip plus a small translation.
pub fn weak_augment(image: &GrayImage, seed: u64) -> AugmentedView {
    weak_augment_with(image, None, &WeakAugConfig::default(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongAugConfig {
    pub brightness_prob: f64,
    pub brightness: f64,
    pub contrast_prob: f64,
    pub contrast: f64,
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub cutout_prob: f64,
    /// Cutout box side as a fraction of the image side.
    pub cutout_size: (f64, f64),
    /// Intensity written into cutout boxes; the corpus mean.
    pub cutout_fill: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            brightness_prob: 0.8,
            brightness: 0.1,
            contrast_prob: 0.8,
            contrast: 0.2,
            gamma_prob: 0.5,
            gamma_range: (0.7, 1.5),
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
            cutout_prob: 0.5,
            cutout_size: (0.1, 0.3),
            cutout_fill: 0.3,
        }
    }
}

pub fn sample_strong(cfg: &StrongAugConfig, height: usize, width: usize, r: &mut Rng) -> Vec<Transform> {
    let mut ts = Vec::new();
    if r.random_bool(cfg.brightness_prob) {
        let delta = r.random_range(-cfg.brightness..=cfg.brightness);
        ts.push(Transform::Photo(PhotoOp::Brightness { delta }));
    }
    if r.random_bool(cfg.contrast_prob) {
        let factor = r.random_range((1.0 - cfg.contrast)..=(1.0 + cfg.contrast));
        ts.push(Transform::Photo(PhotoOp::Contrast { factor }));
    }
    if r.random_bool(cfg.gamma_prob) {
        let gamma = r.random_range(cfg.gamma_range.0..=cfg.gamma_range.1);
        ts.push(Transform::Photo(PhotoOp::Gamma { gamma }));
    }
    if r.random_bool(cfg.blur_prob) {
        let sigma = r.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        ts.push(Transform::Photo(PhotoOp::Blur { sigma }));
    }
    if r.random_bool(cfg.cutout_prob) {
        let bh = ((r.random_range(cfg.cutout_size.0..=cfg.cutout_size.1) * height as f64).round() as usize).max(1);
        let bw = ((r.random_range(cfg.cutout_size.0..=cfg.cutout_size.1) * width as f64).round() as usize).max(1);
        let top = r.random_range(0..=height - bh.min(height));
        let left = r.random_range(0..=width - bw.min(width));
        ts.push(Transform::Photo(PhotoOp::Cutout {
            top,
            left,
            height: bh,
            width: bw,
            fill: cfg.cutout_fill,
        }));
    }
    ts
}

/// Photometric jitter, blur and cutout on the image of `view`; the mask is
/// carried over untouched.
pub fn strong_augment_with(view: &AugmentedView, cfg: &StrongAugConfig, seed: u64) -> AugmentedView {
    let mut r = rng::rng_from_seed(seed);
    let ts = sample_strong(cfg, view.image.height(), view.image.width(), &mut r);
    let out = apply(&view.image, None, &ts);
    let mut transforms = view.transforms.clone();
    transforms.extend(ts);
    AugmentedView {
        image: out.image,
        mask: view.mask.clone(),
        transforms,
    }
}

pub fn strong_augment(view: &AugmentedView, seed: u64) -> AugmentedView {
    strong_augment_with(view, &StrongAugConfig::default(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateAugConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotate_prob: f64,
    pub crop_prob: f64,
    pub crop_scale: (f64, f64),
    pub noise_prob: f64,
    pub noise_sigma: f64,
    pub blur_prob: f64,
    pub sharpen_prob: f64,
}

impl Default for TemplateAugConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_prob: 0.5,
            crop_prob: 1.0,
            crop_scale: (0.7, 1.0),
            noise_prob: 0.5,
            noise_sigma: 0.04,
            blur_prob: 0.3,
            sharpen_prob: 0.3,
        }
    }
}

impl TemplateAugConfig {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate_prob: 0.0,
            crop_prob: 0.0,
            crop_scale: (1.0, 1.0),
            noise_prob: 0.0,
            noise_sigma: 0.0,
            blur_prob: 0.0,
            sharpen_prob: 0.0,
        }
    }
}

const CROP_ATTEMPTS: usize = 10;

fn crop_op(scale: f64, h: usize, w: usize, r: Option<&mut Rng>) -> GeomOp {
    let side = scale.sqrt();
    let ch = side * h as f64;
    let cw = side * w as f64;
    let (top, left) = match r {
        Some(r) => (
            r.random_range(0.0..=(h as f64 - ch)),
            r.random_range(0.0..=(w as f64 - cw)),
        ),
        None => ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0),
    };
    GeomOp::CropResize {
        top,
        left,
        height: ch,
        width: cw,
        scale,
    }
}

/// Flips, quarter-turn rotations and a random crop (area scale in
/// `crop_scale`) applied to image and mask, followed by image-only noise,
/// blur and sharpening.
///
/// A crop that would remove a class present in the input is redrawn up to
/// ten times; after that a centered crop of the last drawn scale is used.
pub fn template_augment_with(
    image: &GrayImage,
    mask: &LabelMask,
    cfg: &TemplateAugConfig,
    seed: u64,
) -> AugmentedView {
    let mut r = rng::rng_from_seed(seed);
    let mut geo = Vec::new();
    if r.random_bool(cfg.hflip_prob) {
        geo.push(GeomOp::FlipH);
    }
    if r.random_bool(cfg.vflip_prob) {
        geo.push(GeomOp::FlipV);
    }
    if r.random_bool(cfg.rotate_prob) {
        geo.push(GeomOp::Rot90 {
            quarter_turns: r.random_range(1..=3),
        });
    }
    let mut img = image.clone();
    let mut m = mask.clone();
    for g in &geo {
        img = geom_image(&img, g);
        m = geom_mask(&m, g);
    }
    let mut ts: Vec<Transform> = geo.into_iter().map(Transform::Geom).collect();

    if r.random_bool(cfg.crop_prob) {
        let present = m.classes_present();
        let (h, w) = (img.height(), img.width());
        let mut chosen = None;
        let mut last_scale = cfg.crop_scale.1;
        for _ in 0..CROP_ATTEMPTS {
            let scale = if cfg.crop_scale.0 < cfg.crop_scale.1 {
                r.random_range(cfg.crop_scale.0..cfg.crop_scale.1)
            } else {
                cfg.crop_scale.0
            };
            last_scale = scale;
            let op = crop_op(scale, h, w, Some(&mut r));
            let cm = geom_mask(&m, &op);
            if present.iter().all(|c| cm.count(*c) > 0) {
                chosen = Some((op, cm));
                break;
            }
        }
        let (op, cm) = chosen.unwrap_or_else(|| {
            let op = crop_op(last_scale, h, w, None);
            let cm = geom_mask(&m, &op);
            (op, cm)
        });
        img = geom_image(&img, &op);
        m = cm;
        ts.push(Transform::Geom(op));
    }

    let mut photo = Vec::new();
    if r.random_bool(cfg.noise_prob) && cfg.noise_sigma > 0.0 {
        photo.push(PhotoOp::Noise {
            sigma: r.random_range(0.0..=cfg.noise_sigma),
            seed: r.random(),
        });
    }
    if r.random_bool(cfg.blur_prob) {
        photo.push(PhotoOp::Blur {
            sigma: r.random_range(0.3..=1.0),
        });
    }
    if r.random_bool(cfg.sharpen_prob) {
        photo.push(PhotoOp::Sharpen {
            amount: r.random_range(0.3..=1.0),
        });
    }
    for p in &photo {
        img = photo_image(&img, p);
    }
    ts.extend(photo.into_iter().map(Transform::Photo));
    AugmentedView {
        image: img,
        mask: Some(m),
        transforms: ts,
    }
}

pub fn template_augment(image: &GrayImage, mask: &LabelMask, seed: u64) -> AugmentedView {
    template_augment_with(image, mask, &TemplateAugConfig::default(), seed)
}
