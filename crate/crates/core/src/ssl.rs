//! Stage 2: a student/EMA-teacher trainer with complementary channel
//! dropout on two strong views, supervised by the teacher's confident
//! hard labels and by the frozen assistant's labels under a cosine
//! schedule, with the teacher's maps fed back to the assistant as spatial
//! prompts late in training.

use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Gradients, ParamSet, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{self, DatasetManifest, Sample, Split, StrongAugConfig, WeakAugConfig};
use crate::error::{Error, Result};
use crate::image::{ClassProbMap, GrayImage, LabelMask, ProbMap};
use crate::metrics::{self, MetricReport};
use crate::nn::{self, softmax_channels, Builder, Decoder, Encoder};
use crate::rng;
use crate::segmenter::{self, PointPrompt, SegmenterConfig, SegmenterState, SpatialPrompt};
use crate::templatebank::TemplateBank;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `eta(t) = (1 - cos(pi t / T)) / 2`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    ProbMap,
    Box,
    Points,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleWeights {
    pub alpha_t: f64,
    pub alpha_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SSLConfig {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_u: f64,
    /// Confidence threshold on the teacher's max class probability.
    pub tau_c: f64,
    pub ema_decay: f64,
    pub iterations: usize,
    pub schedule: ScheduleKind,
    /// Fraction of `iterations` after which feedback prompts start.
    pub feedback_start: f64,
    pub feedback_kind: FeedbackKind,
    pub use_feedback: bool,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub dropout_prob: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub eps: f64,
    pub feature_channels: usize,
    pub num_classes: u8,
    /// Evaluate on the test split every this many iterations (0: only at
    /// the end).
    pub eval_every: usize,
    /// Replaces the schedule with constant weights when set.
    pub fixed_weights: Option<ScheduleWeights>,
}

impl Default for SSLConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_dice: 1.0,
            lambda_u: 1.0,
            tau_c: 0.95,
            ema_decay: 0.99,
            iterations: 300,
            schedule: ScheduleKind::Cosine,
            feedback_start: 0.25,
            feedback_kind: FeedbackKind::ProbMap,
            use_feedback: true,
            batch_labeled: 2,
            batch_unlabeled: 2,
            dropout_prob: 0.5,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            eps: 1e-6,
            feature_channels: 64,
            num_classes: 2,
            eval_every: 50,
            fixed_weights: None,
        }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.tau_c > 0.0 && self.tau_c < 1.0) {
            return bad(format!("tau_c must lie in (0,1), got {}", self.tau_c));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay must lie in [0,1], got {}", self.ema_decay));
        }
        if [self.lambda_ce, self.lambda_dice, self.lambda_u]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return bad("loss weights must be finite and >= 0".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.dropout_prob != 0.5 {
            return bad(format!(
                "complementary dropout is defined for p = 0.5, got {}",
                self.dropout_prob
            ));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) {
            return bad("learning rate and eps must be positive".into());
        }
        if self.feature_channels == 0 || self.num_classes == 0 {
            return bad("feature channels and classes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.feedback_start) {
            return bad(format!("feedback start must lie in [0,1], got {}", self.feedback_start));
        }
        if let Some(w) = self.fixed_weights {
            if !(0.0..=1.0).contains(&w.alpha_t) || (w.alpha_t + w.alpha_v - 1.0).abs() > 1e-12 {
                return bad(format!("fixed weights {w:?} must be a convex pair"));
            }
        }
        Ok(())
    }
}

/// Cosine ramp from the assistant (`alpha_v = 1` at `t = 0`) to the
/// teacher (`alpha_t = 1` at `t = T`); `t > T` is clamped to `T`.
pub fn schedule(t: usize, total: usize, kind: ScheduleKind) -> ScheduleWeights {
    let total = total.max(1);
    let t = t.min(total);
    let eta = match kind {
        ScheduleKind::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t as f64 / total as f64).cos()),
    };
    ScheduleWeights {
        alpha_t: eta,
        alpha_v: 1.0 - eta,
    }
}

#[derive(Debug, Clone, Copy)]
struct StudentLayout {
    encoder: Encoder,
    decoder: Decoder,
}

impl StudentLayout {
    fn build(cfg: &SSLConfig) -> (Self, Builder) {
        let mut b = Builder::default();
        let layout = Self {
            encoder: Encoder::new(&mut b, "student.encoder", 1, cfg.feature_channels),
            decoder: Decoder::new(&mut b, "student.decoder", cfg.feature_channels, 0, cfg.num_classes as usize + 1),
        };
        (layout, b)
    }
}

/// Encoder `g` and decoder `h` of the student; the teacher shares the
/// layout.
#[derive(Debug, Clone)]
pub struct StudentNet {
    pub params: ParamSet,
    layout: StudentLayout,
    classes: usize,
}

impl PartialEq for StudentNet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl StudentNet {
    pub fn init(cfg: &SSLConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, b) = StudentLayout::build(cfg);
        Ok(Self {
            params: b.materialize(rng::derive_seed(seed, "student.init", 0)),
            layout,
            classes: cfg.num_classes as usize + 1,
        })
    }

    pub fn from_params(cfg: &SSLConfig, params: ParamSet) -> Result<Self> {
        let (layout, b) = StudentLayout::build(cfg);
        b.check(&params)?;
        Ok(Self {
            params,
            layout,
            classes: cfg.num_classes as usize + 1,
        })
    }

    /// Background plus foreground classes.
    pub fn num_outputs(&self) -> usize {
        self.classes
    }

    pub fn save(&self, kind: &str, cfg: &SSLConfig, seed: u64, path: &Path) -> Result<()> {
        Checkpoint::new(kind, seed, cfg.clone(), self.params.clone()).save(path)
    }

    pub fn load(path: &Path, kind: &str) -> Result<(Self, SSLConfig, u64)> {
        let ck: Checkpoint<SSLConfig> = Checkpoint::load(path, kind)?;
        let net = Self::from_params(&ck.config, ck.params)?;
        Ok((net, ck.config, ck.seed))
    }

    fn encode_tape(&self, t: &mut Tape, image: &GrayImage) -> Var {
        let x = t.constant(Tensor {
            shape: vec![1, image.height(), image.width()],
            data: image.pixels().to_vec(),
        });
        self.layout.encoder.apply(t, x)
    }

    fn decode_tape(&self, t: &mut Tape, e: Var) -> Var {
        self.layout.decoder.apply(t, e, None)
    }

    /// Encoder features `g(x)`.
    pub fn encode(&self, image: &GrayImage) -> Tensor {
        let mut t = Tape::new(&self.params);
        let e = self.encode_tape(&mut t, image);
        t.value(e).clone()
    }

    /// `[C+1, H, W]` logits without dropout.
    pub fn logits(&self, image: &GrayImage) -> Tensor {
        let mut t = Tape::new(&self.params);
        let e = self.encode_tape(&mut t, image);
        let z = self.decode_tape(&mut t, e);
        t.value(z).clone()
    }

    pub fn predict_probs(&self, image: &GrayImage) -> Result<ClassProbMap> {
        let z = self.logits(image);
        if !z.is_finite() {
            return Err(Error::NonFinite("student logits".into()));
        }
        ClassProbMap::new(self.classes, image.height(), image.width(), softmax_channels(&z.data, self.classes))
    }

    pub fn predict_mask(&self, image: &GrayImage) -> Result<LabelMask> {
        Ok(self.predict_probs(image)?.to_mask())
    }
}

/// Bernoulli(0.5) keep flags, one per feature channel.
pub fn draw_channel_mask(channels: usize, seed: u64) -> Vec<bool> {
    let mut r = rng::rng_from_seed(seed);
    (0..channels).map(|_| r.random_bool(0.5)).collect()
}

fn mask_factors(mask: &[bool], keep: bool) -> Vec<f64> {
    mask.iter().map(|m| if *m == keep { 2.0 } else { 0.0 }).collect()
}

/// Result of [`student_forward_dual`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    pub channel_mask: Vec<bool>,
    pub e_s1: Tensor,
    pub e_s2: Tensor,
    pub p_sf: ClassProbMap,
    pub p_si: ClassProbMap,
}

fn dual_tape(net: &StudentNet, t: &mut Tape, x1: &GrayImage, x2: &GrayImage, mask: &[bool]) -> (Var, Var, Var, Var) {
    let g1 = net.encode_tape(t, x1);
    let g2 = net.encode_tape(t, x2);
    let e1 = t.scale_channels(g1, mask_factors(mask, true));
    let e2 = t.scale_channels(g2, mask_factors(mask, false));
    let z1 = net.decode_tape(t, e1);
    let z2 = net.decode_tape(t, e2);
    (e1, e2, z1, z2)
}

/// Decodes `g(x_s1) * M * 2` and `g(x_s2) * (1 - M) * 2` with one channel
/// mask `M` drawn from `seed`.
pub fn student_forward_dual(net: &StudentNet, x_s1: &GrayImage, x_s2: &GrayImage, seed: u64) -> Result<DualOutput> {
    if x_s1.height() != x_s2.height() || x_s1.width() != x_s2.width() {
        return Err(Error::Shape("strong views differ in size".into()));
    }
    let channel_mask = draw_channel_mask(net.feature_channels(), seed);
    let mut t = Tape::new(&net.params);
    let (e1, e2, z1, z2) = dual_tape(net, &mut t, x_s1, x_s2, &channel_mask);
    let (h, w) = (x_s1.height(), x_s1.width());
    let k = net.classes;
    Ok(DualOutput {
        e_s1: t.value(e1).clone(),
        e_s2: t.value(e2).clone(),
        p_sf: ClassProbMap::new(k, h, w, softmax_channels(&t.value(z1).data, k))?,
        p_si: ClassProbMap::new(k, h, w, softmax_channels(&t.value(z2).data, k))?,
        channel_mask,
    })
}

impl StudentNet {
    /// Width of `g(x)`, set by the encoder's last conv.
    pub fn feature_channels(&self) -> usize {
        let fuse_w = self
            .params
            .index("student.encoder.fuse.w")
            .expect("student layout has an encoder");
        self.params.get(fuse_w).shape[0]
    }
}

fn check_logits(z: &[f64], k: usize, n: usize) -> Result<()> {
    if z.len() != k * n {
        return Err(Error::Shape(format!("{} logits for {k} classes x {n} pixels", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("student logits".into()));
    }
    Ok(())
}

/// Pixel cross-entropy plus foreground-averaged soft Dice for one image,
/// with its gradient with respect to the `[K, N]` logits.
pub fn supervised_loss_grad(logits: &[f64], k: usize, labels: &[u8], cfg: &SSLConfig) -> Result<segmenter::LossGrad> {
    let n = labels.len();
    check_logits(logits, k, n)?;
    if k < 2 {
        return Err(Error::Shape("need background and at least one class".into()));
    }
    if labels.iter().any(|l| *l as usize >= k) {
        return Err(Error::InvalidArgument("label outside the logit classes".into()));
    }
    let p = softmax_channels(logits, k);
    let mut ce = 0.0;
    for (i, l) in labels.iter().enumerate() {
        ce -= p[*l as usize * n + i].max(f64::MIN_POSITIVE).ln();
    }
    ce /= n as f64;
    // d loss / d p for the Dice part, per class and pixel.
    let mut gp = vec![0.0; k * n];
    let mut dice = 0.0;
    let fg = (k - 1) as f64;
    for c in 1..k {
        let pc = &p[c * n..(c + 1) * n];
        let inter: f64 = pc.iter().zip(labels).filter(|(_, l)| **l as usize == c).map(|(v, _)| v).sum();
        let sp: f64 = pc.iter().sum();
        let sy = labels.iter().filter(|l| **l as usize == c).count() as f64;
        let den = sp + sy + cfg.eps;
        dice += (1.0 - 2.0 * inter / den) / fg;
        for i in 0..n {
            let y = f64::from(labels[i] as usize == c);
            gp[c * n + i] = cfg.lambda_dice * (-2.0 * (y * den - inter) / (den * den)) / fg;
        }
    }
    let mut grad = vec![0.0; k * n];
    for i in 0..n {
        let dot: f64 = (0..k).map(|c| gp[c * n + i] * p[c * n + i]).sum();
        for c in 0..k {
            let pc = p[c * n + i];
            let ce_g = (pc - f64::from(labels[i] as usize == c)) / n as f64;
            grad[c * n + i] = cfg.lambda_ce * ce_g + pc * (gp[c * n + i] - dot);
        }
    }
    Ok(segmenter::LossGrad {
        value: cfg.lambda_ce * ce + cfg.lambda_dice * dice,
        grad,
    })
}

/// Batch mean of [`supervised_loss_grad`] values.
pub fn supervised_loss(logits: &[Tensor], labels: &[LabelMask], cfg: &SSLConfig) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidArgument("supervised loss needs a non-empty aligned batch".into()));
    }
    let mut total = 0.0;
    for (z, y) in logits.iter().zip(labels) {
        total += supervised_loss_grad(&z.data, z.shape[0], y.labels(), cfg)?.value;
    }
    Ok(total / logits.len() as f64)
}

/// The teacher's half of a pseudo-label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLabel {
    pub probs: ClassProbMap,
    pub labels: LabelMask,
    pub confident: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistantLabel {
    pub probs: ClassProbMap,
    pub labels: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelPair {
    pub teacher: TeacherLabel,
    pub assistant: Option<AssistantLabel>,
}

/// Hard labels and the `max_c p >= tau_c` indicator from class
/// probabilities.
pub fn teacher_label_from_probs(probs: ClassProbMap, tau_c: f64) -> TeacherLabel {
    let confident = probs.max_prob().iter().map(|m| *m >= tau_c).collect();
    TeacherLabel {
        labels: probs.to_mask(),
        confident,
        probs,
    }
}

/// Teacher probabilities on the weak view, without dropout.
pub fn teacher_pseudo_label(teacher: &StudentNet, x_w: &GrayImage, cfg: &SSLConfig) -> Result<TeacherLabel> {
    Ok(teacher_label_from_probs(teacher.predict_probs(x_w)?, cfg.tau_c))
}

/// Per-pixel softmax over a fixed background logit of 0 and the
/// per-class foreground logits.
pub fn assemble_assistant(fg_logits: &[Vec<f64>], height: usize, width: usize, num_classes: u8) -> Result<AssistantLabel> {
    let n = height * width;
    if fg_logits.len() != num_classes as usize || fg_logits.iter().any(|z| z.len() != n) {
        return Err(Error::Shape("one full-size logit map per class expected".into()));
    }
    let mut z = vec![0.0; n];
    for c in fg_logits {
        z.extend_from_slice(c);
    }
    let probs = ClassProbMap::new(num_classes as usize + 1, height, width, softmax_channels(&z, num_classes as usize + 1))?;
    Ok(AssistantLabel {
        labels: probs.to_mask(),
        probs,
    })
}

/// The frozen assistant with its template bank.
#[derive(Debug, Clone, Copy)]
pub struct Assistant<'a> {
    pub state: &'a SegmenterState,
    pub config: &'a SegmenterConfig,
    pub bank: &'a TemplateBank,
}

/// Runs the assistant once per class (class-filtered retrieval) and
/// assembles a class distribution. `spatial[c - 1]` is the prompt for
/// class `c`.
pub fn assistant_pseudo_label(
    assistant: &Assistant,
    x: &GrayImage,
    spatial: &[SpatialPrompt],
    seed: u64,
) -> Result<AssistantLabel> {
    let c = assistant.config.num_classes;
    if spatial.len() != c as usize {
        return Err(Error::InvalidArgument(format!("{} spatial prompts for {c} classes", spatial.len())));
    }
    let mut maps = Vec::with_capacity(c as usize);
    for class_id in 1..=c {
        let (z, _) = segmenter::predict_logits(
            assistant.state,
            assistant.config,
            x,
            assistant.bank,
            class_id,
            &spatial[class_id as usize - 1],
            rng::derive_seed(seed, "assistant.class", class_id as u64),
        )?;
        maps.push(z.data);
    }
    assemble_assistant(&maps, x.height(), x.width(), c)
}

/// Spatial prompt for `class_id` built from the teacher's probabilities.
pub fn feedback_prompt(p_w: &ClassProbMap, class_id: u8, kind: FeedbackKind) -> Result<SpatialPrompt> {
    if class_id == 0 || class_id as usize >= p_w.channels() {
        return Err(Error::InvalidArgument(format!("no foreground channel for class {class_id}")));
    }
    let (h, w) = (p_w.height(), p_w.width());
    let ch = p_w.channel(class_id as usize);
    Ok(match kind {
        FeedbackKind::ProbMap => SpatialPrompt::ProbMap(ProbMap::new(h, w, ch.to_vec())?),
        FeedbackKind::Box => {
            let mut bounds: Option<(usize, usize, usize, usize)> = None;
            for (i, p) in ch.iter().enumerate() {
                if *p > 0.5 {
                    let (y, x) = (i / w, i % w);
                    bounds = Some(match bounds {
                        None => (y, x, y, x),
                        Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y), r.max(x)),
                    });
                }
            }
            match bounds {
                None => SpatialPrompt::None,
                Some((top, left, bottom, right)) => SpatialPrompt::Box {
                    top,
                    left,
                    bottom,
                    right,
                },
            }
        }
        FeedbackKind::Points => {
            let mut idx: Vec<usize> = (0..ch.len()).collect();
            idx.sort_by(|a, b| ch[*b].total_cmp(&ch[*a]).then(a.cmp(b)));
            SpatialPrompt::Points(
                idx.into_iter()
                    .take(5)
                    .map(|i| PointPrompt {
                        row: i / w,
                        col: i % w,
                        positive: true,
                    })
                    .collect(),
            )
        }
    })
}

/// `theta_t <- gamma theta_t + (1 - gamma) theta_s`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("ema decay {gamma} outside [0,1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    for id in 0..teacher.len() {
        let s = &student.get(id).data;
        for (t, s) in teacher.get_mut(id).data.iter_mut().zip(s) {
            *t = gamma * *t + (1.0 - gamma) * s;
        }
    }
    Ok(())
}

/// Unlabeled loss split into its teacher- and assistant-supervised parts
/// (each already weighted by its schedule weight).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    pub teacher: f64,
    pub assistant: f64,
}

struct JointImage {
    teacher: f64,
    assistant: f64,
    grad_sf: Vec<f64>,
    grad_si: Vec<f64>,
}

/// One image of the joint loss: hard cross-entropy of both dropout
/// branches against the teacher and assistant labels over confident
/// pixels, divided by the number of confident pixels.
fn joint_image(
    z_sf: &[f64],
    z_si: &[f64],
    k: usize,
    pair: &PseudoLabelPair,
    weights: ScheduleWeights,
) -> Result<JointImage> {
    let n = pair.teacher.confident.len();
    check_logits(z_sf, k, n)?;
    check_logits(z_si, k, n)?;
    let tl = pair.teacher.labels.labels();
    let al = match (&pair.assistant, weights.alpha_v != 0.0) {
        (Some(a), _) => Some(a.labels.labels()),
        (None, false) => None,
        (None, true) => {
            return Err(Error::InvalidArgument("assistant weight is positive but no assistant labels".into()))
        }
    };
    let mut out = JointImage {
        teacher: 0.0,
        assistant: 0.0,
        grad_sf: vec![0.0; k * n],
        grad_si: vec![0.0; k * n],
    };
    let count = pair.teacher.confident.iter().filter(|c| **c).count();
    if count == 0 {
        return Ok(out);
    }
    let inv = 1.0 / count as f64;
    let p_sf = softmax_channels(z_sf, k);
    let p_si = softmax_channels(z_si, k);
    for i in (0..n).filter(|i| pair.teacher.confident[*i]) {
        for (p, z, g) in [(&p_sf, z_sf, &mut out.grad_sf), (&p_si, z_si, &mut out.grad_si)] {
            let lse = {
                let m = (0..k).map(|c| z[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
                m + (0..k).map(|c| (z[c * n + i] - m).exp()).sum::<f64>().ln()
            };
            let yt = tl[i] as usize;
            out.teacher += weights.alpha_t * (lse - z[yt * n + i]) * inv;
            for c in 0..k {
                g[c * n + i] += weights.alpha_t * (p[c * n + i] - f64::from(c == yt)) * inv;
            }
            if let Some(al) = al {
                let yv = al[i] as usize;
                out.assistant += weights.alpha_v * (lse - z[yv * n + i]) * inv;
                for c in 0..k {
                    g[c * n + i] += weights.alpha_v * (p[c * n + i] - f64::from(c == yv)) * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Batch joint loss over `[K, H, W]` logits of both dropout branches,
/// normalized by `1 / (2 B_u)`.
pub fn joint_unlabeled_loss(
    z_sf: &[Tensor],
    z_si: &[Tensor],
    pairs: &[PseudoLabelPair],
    weights: ScheduleWeights,
) -> Result<JointLoss> {
    Ok(joint_unlabeled_loss_grad(z_sf, z_si, pairs, weights)?.0)
}

type BranchGrads = Vec<(Vec<f64>, Vec<f64>)>;

fn joint_unlabeled_loss_grad(
    z_sf: &[Tensor],
    z_si: &[Tensor],
    pairs: &[PseudoLabelPair],
    weights: ScheduleWeights,
) -> Result<(JointLoss, BranchGrads)> {
    if pairs.is_empty() || z_sf.len() != pairs.len() || z_si.len() != pairs.len() {
        return Err(Error::InvalidArgument("joint loss needs an aligned non-empty batch".into()));
    }
    let scale = 1.0 / (2.0 * pairs.len() as f64);
    let mut loss = JointLoss {
        total: 0.0,
        teacher: 0.0,
        assistant: 0.0,
    };
    let mut grads = Vec::with_capacity(pairs.len());
    for ((a, b), pair) in z_sf.iter().zip(z_si).zip(pairs) {
        let r = joint_image(&a.data, &b.data, a.shape[0], pair, weights)?;
        loss.teacher += r.teacher * scale;
        loss.assistant += r.assistant * scale;
        let sc = |v: Vec<f64>| v.into_iter().map(|g| g * scale).collect::<Vec<_>>();
        grads.push((sc(r.grad_sf), sc(r.grad_si)));
    }
    loss.total = loss.teacher + loss.assistant;
    Ok((loss, grads))
}

/// The teacher-only consistency loss: confident-pixel hard cross-entropy
/// of both branches against the teacher labels.
pub fn unimatch_loss(z_sf: &[Tensor], z_si: &[Tensor], teachers: &[TeacherLabel]) -> Result<f64> {
    if teachers.is_empty() || z_sf.len() != teachers.len() || z_si.len() != teachers.len() {
        return Err(Error::InvalidArgument("loss needs an aligned non-empty batch".into()));
    }
    let mut total = 0.0;
    for ((a, b), t) in z_sf.iter().zip(z_si).zip(teachers) {
        let k = a.shape[0];
        let n = t.confident.len();
        let conf: Vec<usize> = (0..n).filter(|i| t.confident[*i]).collect();
        if conf.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for z in [&a.data, &b.data] {
            let p = softmax_channels(z, k);
            for &i in &conf {
                s -= p[t.labels.labels()[i] as usize * n + i].ln();
            }
        }
        total += s / conf.len() as f64;
    }
    Ok(total / (2.0 * teachers.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SSLState {
    pub student: StudentNet,
    pub teacher: StudentNet,
    pub iteration: usize,
    adam: Option<Adam>,
}

impl SSLState {
    /// Fresh student, a teacher copied from it, and optimizer state.
    pub fn init(cfg: &SSLConfig, seed: u64) -> Result<Self> {
        let student = StudentNet::init(cfg, seed)?;
        let adam = match cfg.optimizer {
            OptimizerKind::Adam => Some(Adam::new(&student.params, cfg.learning_rate)),
            OptimizerKind::Sgd => None,
        };
        Ok(Self {
            teacher: student.clone(),
            student,
            iteration: 0,
            adam,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    pub iteration: usize,
    pub l_sup: f64,
    pub l_u_teacher: f64,
    pub l_u_assistant: f64,
    pub alpha_t: f64,
    pub alpha_v: f64,
    /// Test Dice per class when this iteration was evaluated.
    pub test_dice: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub state: SSLState,
    pub log: Vec<Stage2LogRow>,
    pub history: Vec<(usize, MetricReport)>,
}

impl Stage2Result {
    pub fn final_report(&self) -> Option<&MetricReport> {
        self.history.last().map(|(_, r)| r)
    }
}

/// Writes the training log as CSV; `header_comment` goes on a leading
/// `#` line.
pub fn write_stage2_csv(log: &[Stage2LogRow], num_classes: u8, path: &Path, header_comment: Option<&str>) -> Result<()> {
    let mut out = Vec::new();
    if let Some(c) = header_comment {
        writeln!(out, "# {c}").expect("write to vec");
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut head: Vec<String> = ["iteration", "l_sup", "l_u_teacher", "l_u_assistant", "alpha_t", "alpha_v"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        head.extend((1..=num_classes).map(|c| format!("test_dice_class{c}")));
        w.write_record(&head)?;
        for r in log {
            let mut rec = vec![
                r.iteration.to_string(),
                r.l_sup.to_string(),
                r.l_u_teacher.to_string(),
                r.l_u_assistant.to_string(),
                r.alpha_t.to_string(),
                r.alpha_v.to_string(),
            ];
            for c in 0..num_classes as usize {
                rec.push(r.test_dice.as_ref().map(|d| d[c].to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Student predictions on `samples` scored against their masks.
pub fn evaluate_net(net: &StudentNet, samples: &[Sample], class_names: &[String]) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        let truth = s
            .mask
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no mask to evaluate against", s.name)))?;
        preds.push(net.predict_mask(&s.image)?);
        truths.push(truth);
    }
    metrics::evaluate(&preds, &truths, class_names)
}

struct Data {
    labeled: Vec<(GrayImage, LabelMask)>,
    unlabeled: Vec<GrayImage>,
    test: Vec<Sample>,
    classes: Vec<String>,
}

fn load_data(manifest: &DatasetManifest) -> Result<Data> {
    let labeled: Vec<(GrayImage, LabelMask)> = manifest
        .load_split(Split::Labeled)?
        .into_iter()
        .filter_map(|s| s.mask.map(|m| (s.image, m)))
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs labeled slices".into()));
    }
    Ok(Data {
        labeled,
        unlabeled: manifest.load_split(Split::Unlabeled)?.into_iter().map(|s| s.image).collect(),
        test: manifest.load_split(Split::Test)?,
        classes: manifest.classes.clone(),
    })
}

/// Mean supervised loss over a labeled batch and its parameter gradient.
pub fn supervised_batch_grad(net: &StudentNet, batch: &[(GrayImage, LabelMask)], cfg: &SSLConfig) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty labeled batch".into()));
    }
    let mut grads = Gradients::zeros_like(&net.params);
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (img, y) in batch {
        let mut tape = Tape::new(&net.params);
        let e = net.encode_tape(&mut tape, img);
        let z = net.decode_tape(&mut tape, e);
        let lg = supervised_loss_grad(&tape.value(z).data, net.classes, y.labels(), cfg)?;
        let shape = tape.shape(z).to_vec();
        let node = tape.fused_scalar(z, lg.value, Tensor { shape, data: lg.grad });
        grads.accumulate(&tape.backward(node)?, inv);
        total += lg.value * inv;
    }
    Ok((total, grads))
}

/// One unlabeled example after pseudo-labeling: two strong views, the
/// seed of their channel mask, and the labels supervising them.
#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub strong1: GrayImage,
    pub strong2: GrayImage,
    pub dropout_seed: u64,
    pub pair: PseudoLabelPair,
}

/// Joint unlabeled loss over a batch and the gradient of its total.
pub fn unlabeled_batch_grad(
    net: &StudentNet,
    items: &[UnlabeledItem],
    weights: ScheduleWeights,
) -> Result<(JointLoss, Gradients)> {
    let mut tape = Tape::new(&net.params);
    let mut z_vars = Vec::with_capacity(items.len());
    for it in items {
        let m = draw_channel_mask(net.feature_channels(), it.dropout_seed);
        let (_, _, z1, z2) = dual_tape(net, &mut tape, &it.strong1, &it.strong2, &m);
        z_vars.push((z1, z2));
    }
    let z_sf: Vec<Tensor> = z_vars.iter().map(|(a, _)| tape.value(*a).clone()).collect();
    let z_si: Vec<Tensor> = z_vars.iter().map(|(_, b)| tape.value(*b).clone()).collect();
    let pairs: Vec<PseudoLabelPair> = items.iter().map(|it| it.pair.clone()).collect();
    let (jl, jg) = joint_unlabeled_loss_grad(&z_sf, &z_si, &pairs, weights)?;
    let mut terms = Vec::with_capacity(2 * items.len());
    for ((z1, z2), (g1, g2)) in z_vars.iter().zip(jg) {
        for (z, g) in [(*z1, g1), (*z2, g2)] {
            let shape = tape.shape(z).to_vec();
            // Values are reported through `jl`; only gradients flow here.
            terms.push((tape.fused_scalar(z, 0.0, Tensor { shape, data: g }), 1.0));
        }
    }
    let total = tape.weighted_sum(&terms);
    Ok((jl, tape.backward(total)?))
}

/// Supervised part of one iteration over a weakly augmented labeled
/// batch.
fn labeled_step(net: &StudentNet, data: &Data, cfg: &SSLConfig, seed: u64, t: usize) -> Result<(f64, Gradients)> {
    let mut r = rng::substream(seed, "stage2.labeled", t as u64);
    let batch: Vec<(GrayImage, LabelMask)> = (0..cfg.batch_labeled)
        .map(|b| {
            let (img, mask) = &data.labeled[r.random_range(0..data.labeled.len())];
            let view = data::weak_augment_with(
                img,
                Some(mask),
                &WeakAugConfig::default(),
                rng::derive_seed(seed, "stage2.labeled.weak", (t * cfg.batch_labeled + b) as u64),
            );
            let y = view.mask.expect("weak view keeps the mask");
            (view.image, y)
        })
        .collect();
    supervised_batch_grad(net, &batch, cfg)
}

fn finish_step(state: &mut SSLState, mut grads: Gradients, cfg: &SSLConfig, t: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged { step: t, loss });
    }
    if cfg.clip_norm > 0.0 {
        nn::clip_grad_norm(&mut grads, cfg.clip_norm);
    }
    match &mut state.adam {
        Some(adam) => adam.step(&mut state.student.params, &grads),
        None => state.student.params.sgd_step(&grads, cfg.learning_rate),
    }
    ema_update(&mut state.teacher.params, &state.student.params, cfg.ema_decay)?;
    state.iteration = t + 1;
    Ok(())
}

fn maybe_eval(
    state: &SSLState,
    data: &Data,
    cfg: &SSLConfig,
    t: usize,
    history: &mut Vec<(usize, MetricReport)>,
) -> Result<Option<Vec<f64>>> {
    let done = t + 1;
    let due = done == cfg.iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
    if !due || data.test.is_empty() {
        return Ok(None);
    }
    let rep = evaluate_net(&state.student, &data.test, &data.classes)?;
    info!("iteration {done}: test mean dice {:.4}", rep.mean_dice);
    let d = rep.dice_per_class();
    history.push((done, rep));
    Ok(Some(d))
}

/// Supervised-only training with the same labeled sampling as
/// [`train_stage2`].
pub fn train_supervised_only(manifest: &DatasetManifest, cfg: &SSLConfig, seed: u64) -> Result<Stage2Result> {
    cfg.validate()?;
    let data = load_data(manifest)?;
    let mut state = SSLState::init(cfg, seed)?;
    let mut log = Vec::new();
    let mut history = Vec::new();
    for t in 0..cfg.iterations {
        let (l_sup, grads) = labeled_step(&state.student, &data, cfg, seed, t)?;
        finish_step(&mut state, grads, cfg, t, l_sup)?;
        let w = schedule(t, cfg.iterations, cfg.schedule);
        let test_dice = maybe_eval(&state, &data, cfg, t, &mut history)?;
        log.push(Stage2LogRow {
            iteration: t,
            l_sup,
            l_u_teacher: 0.0,
            l_u_assistant: 0.0,
            alpha_t: w.alpha_t,
            alpha_v: w.alpha_v,
            test_dice,
        });
    }
    Ok(Stage2Result { state, log, history })
}

/// Stage-2 training. Without an assistant the schedule is pinned to
/// `(alpha_t, alpha_v) = (1, 0)`, which is the teacher-only baseline.
pub fn train_stage2(
    manifest: &DatasetManifest,
    assistant: Option<Assistant>,
    cfg: &SSLConfig,
    seed: u64,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if let Some(a) = &assistant {
        if a.config.num_classes != cfg.num_classes {
            return Err(Error::InvalidArgument("assistant and student disagree on class count".into()));
        }
        if a.bank.is_empty() {
            return Err(Error::Bank("stage 2 needs a non-empty template bank".into()));
        }
    }
    let data = load_data(manifest)?;
    if cfg.lambda_u > 0.0 && data.unlabeled.is_empty() {
        return Err(Error::InvalidArgument("no unlabeled slices for the unlabeled loss".into()));
    }
    let mut state = SSLState::init(cfg, seed)?;
    let strong = StrongAugConfig::default();
    let feedback_from = (cfg.feedback_start * cfg.iterations as f64).ceil() as usize;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut history = Vec::new();
    for t in 0..cfg.iterations {
        let (l_sup, mut grads) = labeled_step(&state.student, &data, cfg, seed, t)?;
        let weights = match (&assistant, cfg.fixed_weights) {
            (None, _) => ScheduleWeights {
                alpha_t: 1.0,
                alpha_v: 0.0,
            },
            (Some(_), Some(w)) => w,
            (Some(_), None) => schedule(t, cfg.iterations, cfg.schedule),
        };
        let mut joint = JointLoss {
            total: 0.0,
            teacher: 0.0,
            assistant: 0.0,
        };
        if cfg.lambda_u > 0.0 {
            let mut r = rng::substream(seed, "stage2.unlabeled", t as u64);
            let mut items = Vec::with_capacity(cfg.batch_unlabeled);
            for b in 0..cfg.batch_unlabeled {
                let item = (t * cfg.batch_unlabeled + b) as u64;
                let x_u = &data.unlabeled[r.random_range(0..data.unlabeled.len())];
                let weak = data::weak_augment_with(
                    x_u,
                    None,
                    &WeakAugConfig::default(),
                    rng::derive_seed(seed, "stage2.weak", item),
                );
                let teacher = teacher_pseudo_label(&state.teacher, &weak.image, cfg)?;
                let assistant_label = match &assistant {
                    Some(a) if weights.alpha_v > 0.0 => {
                        let prompts = (1..=cfg.num_classes)
                            .map(|c| {
                                if cfg.use_feedback && t >= feedback_from {
                                    feedback_prompt(&teacher.probs, c, cfg.feedback_kind)
                                } else {
                                    Ok(SpatialPrompt::None)
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Some(assistant_pseudo_label(
                            a,
                            &weak.image,
                            &prompts,
                            rng::derive_seed(seed, "stage2.assistant", item),
                        )?)
                    }
                    _ => None,
                };
                let s1 = data::strong_augment_with(&weak, &strong, rng::derive_seed(seed, "stage2.strong1", item));
                let s2 = data::strong_augment_with(&weak, &strong, rng::derive_seed(seed, "stage2.strong2", item));
                items.push(UnlabeledItem {
                    strong1: s1.image,
                    strong2: s2.image,
                    dropout_seed: rng::derive_seed(seed, "stage2.dropout", item),
                    pair: PseudoLabelPair {
                        teacher,
                        assistant: assistant_label,
                    },
                });
            }
            let (jl, jg) = unlabeled_batch_grad(&state.student, &items, weights)?;
            joint = jl;
            grads.accumulate(&jg, cfg.lambda_u);
        }
        let loss = l_sup + cfg.lambda_u * joint.total;
        finish_step(&mut state, grads, cfg, t, loss)?;
        if t % 25 == 0 {
            debug!(
                "stage2 it {t}: sup {l_sup:.4} u_teacher {:.4} u_assistant {:.4} alpha_v {:.3}",
                joint.teacher, joint.assistant, weights.alpha_v
            );
        }
        let test_dice = maybe_eval(&state, &data, cfg, t, &mut history)?;
        log.push(Stage2LogRow {
            iteration: t,
            l_sup,
            l_u_teacher: joint.teacher,
            l_u_assistant: joint.assistant,
            alpha_t: weights.alpha_t,
            alpha_v: weights.alpha_v,
            test_dice,
        });
    }
    Ok(Stage2Result { state, log, history })
}
