//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the loss or metric code it
//! is compared against.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refseg_core::autograd::{Gradients, ParamSet};
use refseg_core::experiment::ExperimentConfig;
use refseg_core::image::{GrayImage, LabelMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> GrayImage {
    GrayImage::new(h, w, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

/// A few random rectangles and discs per class, so masks have real
/// boundaries rather than salt-and-pepper noise.
pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMask {
    let mut labels = vec![0u8; h * w];
    for c in 1..=classes {
        for _ in 0..r.random_range(0..3) {
            let cy = r.random_range(0..h) as f64;
            let cx = r.random_range(0..w) as f64;
            let rad = r.random_range(1.0..(h as f64 / 3.0));
            let disc = r.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let hit = if disc {
                        dy * dy + dx * dx <= rad * rad
                    } else {
                        dy.abs() <= rad && dx.abs() <= rad * 0.6
                    };
                    if hit {
                        labels[y * w + x] = c;
                    }
                }
            }
        }
    }
    LabelMask::new(h, w, classes, labels).unwrap()
}

/// Boundary pixels: foreground with a 4-neighbour off the class or off the
/// image.
fn boundary_points(m: &LabelMask, class_id: u8) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize) == class_id;
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(y + dy, x + dx)) {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// All-pairs nearest boundary distances, pooled both ways, 95th
/// percentile by linear interpolation at rank `0.95 (n - 1)`.
pub fn brute_hd95(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Option<f64> {
    let a = boundary_points(pred, class_id);
    let b = boundary_points(truth, class_id);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = a.iter().map(|p| nearest(p, &b)).chain(b.iter().map(|p| nearest(p, &a))).collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let hi = (lo + 1).min(d.len() - 1);
    Some(d[lo] + frac * (d[hi] - d[lo]))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary mask loss written term by term:
/// `l_dice (1 - 2 sum pm / (sum p + sum m + eps)) + l_bce * mean BCE`.
pub fn oracle_mask_loss(logits: &[f64], target: &[f64], l_dice: f64, l_bce: f64, eps: f64) -> f64 {
    let p: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sm = 0.0;
    let mut bce = 0.0;
    for (pi, mi) in p.iter().zip(target) {
        inter += pi * mi;
        sp += pi;
        sm += mi;
        bce -= mi * pi.ln() + (1.0 - mi) * (1.0 - pi).ln();
    }
    l_dice * (1.0 - 2.0 * inter / (sp + sm + eps)) + l_bce * bce / p.len() as f64
}

fn softmax_at(z: &[f64], k: usize, n: usize, i: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|c| z[c * n + i].exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Supervised student loss for one image with `[K, N]` logits:
/// pixel-mean cross-entropy plus soft Dice averaged over classes 1..K.
pub fn oracle_supervised(z: &[f64], k: usize, labels: &[u8], l_ce: f64, l_dice: f64, eps: f64) -> f64 {
    let n = labels.len();
    let probs: Vec<Vec<f64>> = (0..n).map(|i| softmax_at(z, k, n, i)).collect();
    let ce = -labels.iter().enumerate().map(|(i, y)| probs[i][*y as usize].ln()).sum::<f64>() / n as f64;
    let mut dice = 0.0;
    for c in 1..k {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let y = if labels[i] as usize == c { 1.0 } else { 0.0 };
            inter += probs[i][c] * y;
            sp += probs[i][c];
            sy += y;
        }
        dice += 1.0 - 2.0 * inter / (sp + sy + eps);
    }
    l_ce * ce + l_dice * dice / (k - 1) as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One unlabeled image for the joint-loss oracle: logits of both
/// branches, teacher probabilities, and optional assistant probabilities,
/// all `[K, N]` channel-major.
pub struct JointCase {
    pub k: usize,
    pub z_sf: Vec<f64>,
    pub z_si: Vec<f64>,
    pub teacher: Vec<f64>,
    pub assistant: Option<Vec<f64>>,
}

/// `1/(2B) sum_b 1/|I_b| sum_{i in I_b} sum_branch [a_t CE(hat y_t) + a_v CE(hat y_v)]`
/// with `I_b` the pixels where the teacher's max probability reaches
/// `tau`. Returns (teacher part, assistant part).
pub fn oracle_joint(cases: &[JointCase], tau: f64, a_t: f64, a_v: f64) -> (f64, f64) {
    let mut lt = 0.0;
    let mut lv = 0.0;
    for cs in cases {
        let k = cs.k;
        let n = cs.z_sf.len() / k;
        let col = |v: &[f64], i: usize| (0..k).map(|c| v[c * n + i]).collect::<Vec<f64>>();
        let conf: Vec<usize> = (0..n)
            .filter(|i| col(&cs.teacher, *i).iter().cloned().fold(0.0, f64::max) >= tau)
            .collect();
        if conf.is_empty() {
            continue;
        }
        let mut st = 0.0;
        let mut sv = 0.0;
        for &i in &conf {
            let yt = argmax(&col(&cs.teacher, i));
            let yv = cs.assistant.as_ref().map(|a| argmax(&col(a, i)));
            for z in [&cs.z_sf, &cs.z_si] {
                let p = softmax_at(z, k, n, i);
                st -= p[yt].ln();
                if let Some(yv) = yv {
                    sv -= p[yv].ln();
                }
            }
        }
        lt += a_t * st / conf.len() as f64;
        lv += a_v * sv / conf.len() as f64;
    }
    let s = 1.0 / (2.0 * cases.len() as f64);
    (lt * s, lv * s)
}

/// Teacher-only consistency loss: the joint oracle's structure with the
/// assistant removed and unit teacher weight.
pub fn oracle_unimatch(cases: &[JointCase], tau: f64) -> f64 {
    let mut total = 0.0;
    for cs in cases {
        let k = cs.k;
        let n = cs.z_sf.len() / k;
        let mut s = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let t: Vec<f64> = (0..k).map(|c| cs.teacher[c * n + i]).collect();
            if t.iter().cloned().fold(0.0, f64::max) < tau {
                continue;
            }
            count += 1;
            let y = argmax(&t);
            s -= softmax_at(&cs.z_sf, k, n, i)[y].ln() + softmax_at(&cs.z_si, k, n, i)[y].ln();
        }
        if count > 0 {
            total += s / count as f64;
        }
    }
    total / (2.0 * cases.len() as f64)
}

/// Random per-pixel distributions with a sharp winner on a random subset
/// of pixels, so both sides of a confidence threshold are exercised.
pub fn random_probs(r: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..n {
        let sharp = r.random_bool(0.5);
        let win = r.random_range(0..k);
        let raw: Vec<f64> = (0..k)
            .map(|c| {
                let base = r.random_range(0.01..1.0);
                if sharp && c == win {
                    base + 40.0
                } else {
                    base
                }
            })
            .collect();
        let s: f64 = raw.iter().sum();
        for c in 0..k {
            out[c * n + i] = raw[c] / s;
        }
    }
    out
}

/// Central differences on `picks` of `params`; returns the worst relative
/// error `|g - fd| / max(|g|, |fd|, floor)`.
pub fn fd_check(
    params: &ParamSet,
    grads: &Gradients,
    picks: &[(usize, usize)],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &(p, e) in picks {
        let mut ps = params.clone();
        let v = ps.flat_get(p, e);
        ps.flat_set(p, e, v + h);
        let up = loss(&ps);
        ps.flat_set(p, e, v - h);
        let down = loss(&ps);
        let fd = (up - down) / (2.0 * h);
        let g = grads.flat(p, e);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// `n` random (parameter, element) picks weighted toward large tensors.
pub fn random_picks(r: &mut ChaCha8Rng, params: &ParamSet, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| {
            let p = r.random_range(0..params.len());
            let e = r.random_range(0..params.get(p).data.len());
            (p, e)
        })
        .collect()
}

/// A seconds-scale configuration for pipeline tests.
pub fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset_root: root.join("data"),
        out_dir: root.join("out"),
        ratio: 0.25,
        ..ExperimentConfig::default()
    };
    cfg.corpus.patients = 6;
    cfg.corpus.slices_per_patient = 2;
    cfg.corpus.size = 32;
    cfg.segmenter.feature_channels = 8;
    cfg.segmenter.prompt_dim = 8;
    cfg.ssl.feature_channels = 8;
    cfg.stage1.steps = 4;
    cfg.ssl.iterations = 4;
    cfg.ssl.eval_every = 2;
    cfg
}

/// Byte-level digest of every file under `dir`, sorted by relative path.
pub fn tree_digest(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, refseg_core::checkpoint::file_sha256(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
