//! Desk-scale synthetic corpus: one blob per foreground class on a noisy
//! background, with a per-patient appearance style.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::augment::{gaussian_blur, Raster};
use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::rng::{self, Rng};

/// Mean intensity of each foreground class before per-patient jitter.
const CLASS_LEVELS: [f64; 4] = [0.85, 0.55, 0.70, 0.40];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_patients: usize,
    pub slices_per_patient: usize,
    pub num_classes: u8,
    pub size: usize,
    /// Fraction of patients held out as the test split.
    pub test_fraction: f64,
}

impl SynthConfig {
    pub fn new(
        seed: u64,
        num_patients: usize,
        slices_per_patient: usize,
        num_classes: u8,
        size: usize,
    ) -> Self {
        Self {
            seed,
            num_patients,
            slices_per_patient,
            num_classes,
            size,
            test_fraction: 0.2,
        }
    }
}

struct PatientStyle {
    background: f64,
    gradient: f64,
    gradient_dir: f64,
    levels: Vec<f64>,
    noise: f64,
    radius_scale: f64,
    max_distractors: usize,
}

impl PatientStyle {
    fn draw(r: &mut Rng, num_classes: u8) -> Self {
        Self {
            background: r.random_range(0.10..0.25),
            gradient: r.random_range(0.0..0.08),
            gradient_dir: r.random_range(0.0..2.0 * PI),
            levels: {
                let gain = r.random_range(0.85..1.15);
                (0..usize::from(num_classes))
                    .map(|c| (CLASS_LEVELS[c] * gain + r.random_range(-0.08..0.08)).clamp(0.3, 0.95))
                    .collect()
            },
            noise: r.random_range(0.03..0.06),
            radius_scale: r.random_range(0.85..1.15),
            max_distractors: r.random_range(1..=2),
        }
    }
}

/// A closed shape described by a radius as a function of angle around a
/// center. Odd classes are ellipses, even classes are lobed polygons.
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    rotation: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn draw(r: &mut Rng, size: usize, class_index: usize, scale: f64) -> Self {
        let s = size as f64;
        let radius = s * r.random_range(0.11..0.17) * scale;
        let margin = radius * 1.2 + 2.0;
        let lobed = class_index % 2 == 1;
        Self {
            cy: r.random_range(margin..(s - margin)),
            cx: r.random_range(margin..(s - margin)),
            radius,
            aspect: if lobed { 1.0 } else { r.random_range(0.6..1.0) },
            rotation: r.random_range(0.0..PI),
            harmonics: if lobed {
                [
                    (r.random_range(0.05..0.2), r.random_range(0.0..2.0 * PI)),
                    (r.random_range(0.05..0.15), r.random_range(0.0..2.0 * PI)),
                ]
            } else {
                [(0.0, 0.0), (0.0, 0.0)]
            },
        }
    }

    fn contains(&self, y: f64, x: f64, grow: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.rotation.sin_cos();
        let u = c * dx + s * dy;
        let v = (-s * dx + c * dy) / self.aspect;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let limit = self.radius
            * (1.0
                + self.harmonics[0].0 * (2.0 * theta + self.harmonics[0].1).cos()
                + self.harmonics[1].0 * (3.0 * theta + self.harmonics[1].1).cos());
        rho <= limit + grow
    }
}

fn overlaps_any(blob: &Blob, placed: &[Blob], size: usize) -> bool {
    (0..size * size).any(|i| {
        let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
        blob.contains(y, x, 2.0) && placed.iter().any(|p| p.contains(y, x, 2.0))
    })
}

/// Standard deviation of the partial-volume blur applied before noise.
const EDGE_BLUR: f64 = 0.7;

/// One slice: a blob per class, up to `max_distractors` smaller unlabeled
/// round structures at class-like intensities, a background gradient,
/// boundary blur and additive noise.
fn render_slice(
    r: &mut Rng,
    style: &PatientStyle,
    size: usize,
    num_classes: u8,
) -> (Vec<f64>, Vec<u8>) {
    let mut labels = vec![0u8; size * size];
    let mut placed: Vec<Blob> = Vec::new();
    for k in 0..usize::from(num_classes) {
        let mut blob = Blob::draw(r, size, k, style.radius_scale);
        for _ in 0..50 {
            if !overlaps_any(&blob, &placed, size) {
                break;
            }
            blob = Blob::draw(r, size, k, style.radius_scale);
        }
        for (i, l) in labels.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            if blob.contains(y, x, 0.0) {
                *l = (k + 1) as u8;
            }
        }
        placed.push(blob);
    }

    let mut level = vec![f64::NAN; size * size];
    let n_distractors = r.random_range(0..=style.max_distractors);
    for _ in 0..n_distractors {
        let s = size as f64;
        let radius = s * r.random_range(0.05..0.09);
        let margin = radius + 2.0;
        let d = Blob {
            cy: r.random_range(margin..(s - margin)),
            cx: r.random_range(margin..(s - margin)),
            radius,
            aspect: 1.0,
            rotation: 0.0,
            harmonics: [(0.0, 0.0), (0.0, 0.0)],
        };
        let mimic = style.levels[r.random_range(0..style.levels.len())];
        let value = (mimic + r.random_range(-0.12..0.12)).clamp(0.0, 1.0);
        if overlaps_any(&d, &placed, size) {
            continue;
        }
        for (i, v) in level.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            if d.contains(y, x, 0.0) {
                *v = value;
            }
        }
        placed.push(d);
    }

    let (gs, gc) = style.gradient_dir.sin_cos();
    let half = size as f64 / 2.0;
    let clean: Vec<f64> = labels
        .iter()
        .zip(&level)
        .enumerate()
        .map(|(i, (l, d))| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            if *l > 0 {
                style.levels[usize::from(*l) - 1]
            } else if !d.is_nan() {
                *d
            } else {
                style.background + style.gradient * ((y - half) * gs + (x - half) * gc) / half
            }
        })
        .collect();
    let blurred = gaussian_blur(
        &Raster {
            height: size,
            width: size,
            data: clean,
        },
        EDGE_BLUR,
    );
    let noise = Normal::new(0.0, style.noise).expect("positive noise sigma");
    let pixels = blurred
        .data
        .iter()
        .map(|v| (v + noise.sample(r)).clamp(0.0, 1.0))
        .collect();
    (pixels, labels)
}

/// Writes a synthetic corpus under `root` and returns its manifest.
///
/// Non-test patients are marked unlabeled; use `split_labeled` to pick the
/// labeled subset. The same configuration always produces byte-identical
/// files.
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if !(1..=4).contains(&cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in [1,4], got {}",
            cfg.num_classes
        )));
    }
    if cfg.size < 32 {
        return Err(Error::InvalidArgument(format!("size must be >= 32, got {}", cfg.size)));
    }
    if cfg.num_patients < 2 || cfg.slices_per_patient == 0 {
        return Err(Error::InvalidArgument(
            "need at least 2 patients and 1 slice per patient".into(),
        ));
    }
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut order: Vec<usize> = (0..cfg.num_patients).collect();
    order.shuffle(&mut rng::substream(cfg.seed, "synth/test_patients", 0));
    let n_test = ((cfg.num_patients as f64 * cfg.test_fraction).round() as usize)
        .clamp(1, cfg.num_patients - 1);
    let is_test: Vec<bool> = {
        let mut v = vec![false; cfg.num_patients];
        for p in &order[..n_test] {
            v[*p] = true;
        }
        v
    };

    let mut entries = Vec::new();
    for p in 0..cfg.num_patients {
        let patient = format!("P{p:03}");
        let mut style_rng = rng::substream(cfg.seed, "synth/style", p as u64);
        let style = PatientStyle::draw(&mut style_rng, cfg.num_classes);
        for s in 0..cfg.slices_per_patient {
            let mut r = rng::substream(
                cfg.seed,
                "synth/slice",
                (p * cfg.slices_per_patient + s) as u64,
            );
            let (pixels, labels) = render_slice(&mut r, &style, cfg.size, cfg.num_classes);
            let image = GrayImage::new(cfg.size, cfg.size, pixels)?;
            let mask = LabelMask::new(cfg.size, cfg.size, cfg.num_classes, labels)?;
            let name = format!("{patient}_s{s}.png");
            image.save_png(&images.join(&name))?;
            mask.save_png(&masks.join(&name))?;
            entries.push(ManifestEntry {
                image: format!("images/{name}"),
                mask: Some(format!("masks/{name}")),
                patient: patient.clone(),
                split: if is_test[p] { Split::Test } else { Split::Unlabeled },
            });
        }
    }

    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        num_classes: cfg.num_classes,
        classes: (1..=cfg.num_classes).map(|c| format!("class{c}")).collect(),
        entries,
    };
    manifest.validate(true)?;
    manifest.save()?;
    Ok(manifest)
}
