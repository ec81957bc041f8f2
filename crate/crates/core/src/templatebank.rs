//! Template bank: descriptor extraction, cosine retrieval and
//! temperature-softmax sampling over the three closest exemplars.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::rng;

pub const DESCRIPTOR_DIM: usize = 128;
const GRID: usize = 8;
const INTENSITY_BINS: usize = 32;
const ORIENTATION_BINS: usize = 32;
pub const SAMPLE_CANDIDATES: usize = 3;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const BANK_FILE: &str = "bank.json";

/// Unit-norm image descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("descriptor component".into()));
        }
        let n = norm(&v);
        if n == 0.0 {
            return Err(Error::InvalidArgument("zero descriptor".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &Descriptor) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Hand-crafted stand-in for a frozen foundation embedding: an 8x8 mean
/// intensity grid, a 32-bin intensity histogram and a 32-bin
/// magnitude-weighted gradient orientation histogram. Each block is
/// L2-normalized before the whole vector is.
pub fn compute_descriptor(image: &GrayImage) -> Descriptor {
    let (h, w) = (image.height(), image.width());
    let mut grid = vec![0.0; GRID * GRID];
    for gy in 0..GRID {
        let (y0, y1) = (gy * h / GRID, (gy + 1) * h / GRID);
        for gx in 0..GRID {
            let (x0, x1) = (gx * w / GRID, (gx + 1) * w / GRID);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += image.get(y, x);
                }
            }
            grid[gy * GRID + gx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }

    let mut hist = vec![0.0; INTENSITY_BINS];
    for p in image.pixels() {
        let b = ((p * INTENSITY_BINS as f64) as usize).min(INTENSITY_BINS - 1);
        hist[b] += 1.0;
    }

    let mut orient = vec![0.0; ORIENTATION_BINS];
    let at = |y: isize, x: isize| {
        image.get(
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        )
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y, x + 1) - at(y, x - 1);
            let gy = at(y + 1, x) - at(y - 1, x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let theta = gy.atan2(gx).rem_euclid(2.0 * PI);
                let b = ((theta / (2.0 * PI) * ORIENTATION_BINS as f64) as usize)
                    .min(ORIENTATION_BINS - 1);
                orient[b] += mag;
            }
        }
    }
    if orient.iter().all(|v| *v == 0.0) {
        orient.iter_mut().for_each(|v| *v = 1.0);
    }

    for block in [&mut grid, &mut hist, &mut orient] {
        normalize_in_place(block);
    }
    let mut v = grid;
    v.extend(hist);
    v.extend(orient);
    debug_assert_eq!(v.len(), DESCRIPTOR_DIM);
    Descriptor::from_vec(v).expect("histogram blocks are never all zero")
}

pub(crate) fn image_hash(image: &GrayImage) -> String {
    let mut h = Sha256::new();
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    for p in image.pixels() {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateEntry {
    pub image: GrayImage,
    pub mask: LabelMask,
    pub descriptor: Descriptor,
    pub patient: String,
    pub classes: BTreeSet<u8>,
    hash: String,
}

impl TemplateEntry {
    pub fn new(image: GrayImage, mask: LabelMask, patient: &str) -> Result<Self> {
        if !mask.same_shape_as(&image) {
            return Err(Error::Shape("template mask and image differ in size".into()));
        }
        if patient.trim().is_empty() {
            return Err(Error::Bank("template patient id is empty".into()));
        }
        let descriptor = compute_descriptor(&image);
        let classes = mask.classes_present().into_iter().collect();
        let hash = image_hash(&image);
        Ok(Self {
            image,
            mask,
            descriptor,
            patient: patient.to_string(),
            classes,
            hash,
        })
    }

    /// An entry whose descriptor is given rather than computed.
    pub fn with_descriptor(image: GrayImage, mask: LabelMask, patient: &str, descriptor: Descriptor) -> Result<Self> {
        Ok(Self {
            descriptor,
            ..Self::new(image, mask, patient)?
        })
    }

    pub fn image_hash(&self) -> &str {
        &self.hash
    }
}

/// Outcome of one template draw, kept for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub chosen: usize,
    pub candidates: Vec<usize>,
    pub similarities: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Softmax with temperature over `scores`, shifted by the max for
/// stability.
pub fn softmax_with_temperature(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    entries: Vec<TemplateEntry>,
    temperature: f64,
}

impl Default for TemplateBank {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPERATURE).expect("default temperature is positive")
    }
}

impl TemplateBank {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            entries: Vec::new(),
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TemplateEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &TemplateEntry {
        &self.entries[index]
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        *self = Self {
            entries: std::mem::take(&mut self.entries),
            ..Self::new(temperature)?
        };
        Ok(())
    }

    /// Appends an exemplar; the same image of the same patient is rejected.
    pub fn insert(&mut self, image: GrayImage, mask: LabelMask, patient: &str) -> Result<usize> {
        self.insert_entry(TemplateEntry::new(image, mask, patient)?)
    }

    /// [`TemplateBank::insert`] for a prebuilt entry.
    pub fn insert_entry(&mut self, entry: TemplateEntry) -> Result<usize> {
        if self
            .entries
            .iter()
            .any(|e| e.patient == entry.patient && e.hash == entry.hash)
        {
            return Err(Error::Bank(format!(
                "duplicate template for patient {} (image {})",
                entry.patient,
                &entry.hash[..12]
            )));
        }
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    /// Up to `k` most similar entries, similarity descending, ties to the
    /// lower index. With `class_id`, only entries containing that class are
    /// eligible.
    pub fn top_k(&self, query: &Descriptor, k: usize, class_id: Option<u8>) -> Result<Vec<(usize, f64)>> {
        self.top_k_excluding(query, k, class_id, &[])
    }

    /// [`TemplateBank::top_k`] with the entries in `exclude` left out.
    pub fn top_k_excluding(
        &self,
        query: &Descriptor,
        k: usize,
        class_id: Option<u8>,
        exclude: &[usize],
    ) -> Result<Vec<(usize, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::Bank("retrieval from an empty bank".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| !exclude.contains(i) && class_id.is_none_or(|c| e.classes.contains(&c)))
            .map(|(i, e)| (i, query.cosine(&e.descriptor)))
            .collect();
        if scored.is_empty() {
            return Err(Error::NoTemplateForClass(class_id.unwrap_or(0)));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Draws one of the three closest templates with probability
    /// proportional to `exp(s_i / temperature)`.
    pub fn sample(&self, query: &Descriptor, class_id: Option<u8>, seed: u64) -> Result<SampleDraw> {
        self.sample_excluding(query, class_id, seed, &[])
    }

    /// [`TemplateBank::sample`] over the entries not in `exclude`; falls
    /// back to the whole bank when the exclusion leaves no candidate.
    pub fn sample_excluding(
        &self,
        query: &Descriptor,
        class_id: Option<u8>,
        seed: u64,
        exclude: &[usize],
    ) -> Result<SampleDraw> {
        let top = match self.top_k_excluding(query, SAMPLE_CANDIDATES, class_id, exclude) {
            Err(Error::NoTemplateForClass(_)) if !exclude.is_empty() => {
                self.top_k(query, SAMPLE_CANDIDATES, class_id)?
            }
            other => other?,
        };
        let similarities: Vec<f64> = top.iter().map(|(_, s)| *s).collect();
        let probabilities = softmax_with_temperature(&similarities, self.temperature);
        let u: f64 = rng::rng_from_seed(seed).random();
        let mut acc = 0.0;
        let mut pick = top.len() - 1;
        for (i, p) in probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        Ok(SampleDraw {
            chosen: top[pick].0,
            candidates: top.iter().map(|(i, _)| *i).collect(),
            similarities,
            probabilities,
        })
    }

    /// A bank holding every masked slice of `split`, in manifest order.
    pub fn from_split(
        manifest: &crate::data::DatasetManifest,
        split: crate::data::Split,
        temperature: f64,
    ) -> Result<Self> {
        let mut bank = Self::new(temperature)?;
        for s in manifest.load_split(split)? {
            if let Some(mask) = s.mask {
                bank.insert(s.image, mask, &s.patient)?;
            }
        }
        Ok(bank)
    }

    /// Writes `images/`, `masks/` and `bank.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        for d in [&images, &masks] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut records = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let name = format!("t{i:04}.png");
            e.image.save_png(&images.join(&name))?;
            e.mask.save_png(&masks.join(&name))?;
            records.push(BankRecord {
                image: format!("images/{name}"),
                mask: format!("masks/{name}"),
                patient: e.patient.clone(),
                descriptor: e.descriptor.clone(),
            });
        }
        let num_classes = self.entries.first().map_or(1, |e| e.mask.num_classes());
        let file = BankFile {
            temperature: self.temperature,
            num_classes,
            entries: records,
        };
        let path = dir.join(BANK_FILE);
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a saved bank and checks every stored descriptor against the
    /// one recomputed from its image.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BANK_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: BankFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut bank = Self::new(file.temperature)?;
        for r in file.entries {
            let image = GrayImage::load_png(&dir.join(&r.image))?;
            let mask = LabelMask::load_png(&dir.join(&r.mask), file.num_classes)?;
            let idx = bank.insert(image, mask, &r.patient)?;
            let stored = &r.descriptor;
            let drift = stored
                .as_slice()
                .iter()
                .zip(bank.entries[idx].descriptor.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if stored.as_slice().len() != DESCRIPTOR_DIM || drift > 1e-9 {
                return Err(Error::Bank(format!(
                    "stored descriptor of {} does not match its image",
                    r.image
                )));
            }
        }
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
struct BankRecord {
    image: String,
    mask: String,
    patient: String,
    descriptor: Descriptor,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    temperature: f64,
    num_classes: u8,
    entries: Vec<BankRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64) -> GrayImage {
        let mut r = rng::rng_from_seed(seed);
        GrayImage::new(16, 16, (0..256).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn random_mask(seed: u64) -> LabelMask {
        let mut r = rng::rng_from_seed(seed);
        LabelMask::new(16, 16, 2, (0..256).map(|_| r.random_range(0..3u8)).collect()).unwrap()
    }

    #[test]
    fn descriptor_is_unit_norm() {
        for s in 0..5 {
            let d = compute_descriptor(&random_image(s));
            assert_eq!(d.as_slice().len(), DESCRIPTOR_DIM);
            assert!((norm(d.as_slice()) - 1.0).abs() < 1e-12);
        }
        let constant = GrayImage::filled(16, 16, 0.0).unwrap();
        assert!((norm(compute_descriptor(&constant).as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_is_one_and_negative_is_less() {
        let img = random_image(3);
        let d = compute_descriptor(&img);
        assert!((d.cosine(&compute_descriptor(&img)) - 1.0).abs() < 1e-12);
        assert!(d.cosine(&compute_descriptor(&img.negative())) < 1.0 - 1e-6);
    }

    #[test]
    fn insert_and_duplicates() {
        let mut bank = TemplateBank::default();
        assert_eq!(bank.insert(random_image(1), random_mask(1), "A").unwrap(), 0);
        assert_eq!(bank.len(), 1);
        assert!(bank.insert(random_image(1), random_mask(2), "A").is_err());
        bank.insert(random_image(1), random_mask(2), "B").unwrap();
        bank.insert(random_image(2), random_mask(2), "A").unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.entry(1).patient, "B");
    }

    #[test]
    fn truncation_and_class_filter() {
        let mut bank = TemplateBank::default();
        bank.insert(random_image(1), random_mask(1), "A").unwrap();
        bank.insert(random_image(2), LabelMask::empty(16, 16, 2), "B").unwrap();
        let q = compute_descriptor(&random_image(3));
        assert_eq!(bank.top_k(&q, 3, None).unwrap().len(), 2);
        assert_eq!(bank.top_k(&q, 3, Some(1)).unwrap(), vec![(0, q.cosine(&bank.entry(0).descriptor))]);
        assert!(matches!(
            TemplateBank::default().top_k(&q, 1, None),
            Err(Error::Bank(_))
        ));

        let mut only_bg = TemplateBank::default();
        only_bg.insert(random_image(2), LabelMask::empty(16, 16, 2), "B").unwrap();
        assert!(matches!(only_bg.top_k(&q, 1, Some(2)), Err(Error::NoTemplateForClass(2))));
    }

    #[test]
    fn single_entry_draw_is_certain() {
        let mut bank = TemplateBank::default();
        bank.insert(random_image(1), random_mask(1), "A").unwrap();
        let d = bank.sample(&compute_descriptor(&random_image(9)), None, 4).unwrap();
        assert_eq!(d.chosen, 0);
        assert_eq!(d.probabilities, vec![1.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = TemplateBank::new(0.2).unwrap();
        for s in 0..3 {
            let img = GrayImage::from_u8(16, 16, &random_image(s).to_u8()).unwrap();
            bank.insert(img, random_mask(s), &format!("P{s}")).unwrap();
        }
        bank.save(dir.path()).unwrap();
        assert_eq!(TemplateBank::load(dir.path()).unwrap(), bank);
    }
}
