//! The reference-guided assistant: a shared conv encoder for the query
//! and the template (image plus class mask), a class prompt token that is
//! projected and broadcast-added to the query features, multi-head
//! cross-attention from query features to template memory, and a decoder
//! that can additionally take a spatial prompt raster.
//!
//! The assistant decodes one class at a time and emits a single logit map.
//! A pooled linear head over the prompt and attended features stands in
//! for the language model's text output and is trained with a one-token
//! cross-entropy.

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamSet, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{self, gaussian_blur_raster, DatasetManifest, Raster, Split, StrongAugConfig};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask, ProbMap};
use crate::nn::{self, Builder, Decoder, Encoder, Init, Linear};
use crate::rng;
use crate::templatebank::{compute_descriptor, SampleDraw, TemplateBank, TemplateEntry};
use crate::tensor::{avg_pool, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub feature_channels: usize,
    pub feature_stride: usize,
    pub prompt_dim: usize,
    pub heads: usize,
    pub num_classes: u8,
    pub lambda_txt: f64,
    pub lambda_mask: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub eps: f64,
    pub use_prompt: bool,
    pub use_memory: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            feature_stride: 4,
            prompt_dim: 64,
            heads: 4,
            num_classes: 2,
            lambda_txt: 1.0,
            lambda_mask: 1.0,
            lambda_dice: 0.5,
            lambda_bce: 0.5,
            eps: 1e-6,
            use_prompt: true,
            use_memory: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.feature_channels == 0 || self.prompt_dim == 0 || self.heads == 0 {
            return bad("segmenter dims must be positive".into());
        }
        if self.feature_channels % self.heads != 0 {
            return bad(format!(
                "{} feature channels do not split into {} heads",
                self.feature_channels, self.heads
            ));
        }
        if self.feature_stride != 4 {
            return bad(format!("feature stride {} unsupported (only 4)", self.feature_stride));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        let weights = [self.lambda_txt, self.lambda_mask, self.lambda_dice, self.lambda_bce];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!("loss weights must be finite and >= 0, got {weights:?}"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }

    fn check_class(&self, class_id: u8) -> Result<()> {
        if class_id == 0 || class_id > self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class_id} outside 1..={}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    encoder: Encoder,
    tokens: usize,
    proj1: Linear,
    proj2: Linear,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    decoder: Decoder,
    class_head: Linear,
}

/// Channels of the stride-4 spatial prompt input: pooled raster and a
/// presence flag.
const SPATIAL_CHANNELS: usize = 2;

impl Layout {
    fn build(cfg: &SegmenterConfig) -> (Self, Builder) {
        let mut b = Builder::default();
        let cf = cfg.feature_channels;
        let attn_std = 1.0 / (cf as f64).sqrt();
        let layout = Self {
            encoder: Encoder::new(&mut b, "encoder", 2, cf),
            tokens: b.param(
                "prompt.tokens",
                &[cfg.num_classes as usize, cfg.prompt_dim],
                Init::Normal(1.0),
            ),
            proj1: Linear::new(&mut b, "prompt.proj1", cfg.prompt_dim, cf),
            proj2: Linear::new(&mut b, "prompt.proj2", cf, cf),
            wq: b.param("attn.wq", &[cf, cf], Init::Normal(attn_std)),
            wk: b.param("attn.wk", &[cf, cf], Init::Normal(attn_std)),
            wv: b.param("attn.wv", &[cf, cf], Init::Normal(attn_std)),
            wo: b.param("attn.wo", &[cf, cf], Init::Zeros),
            decoder: Decoder::new(&mut b, "decoder", 2 * cf + SPATIAL_CHANNELS, 2, 1),
            class_head: Linear::new(&mut b, "class_head", 2 * cf, cfg.num_classes as usize + 1),
        };
        (layout, b)
    }
}

/// Trainable parameters of the assistant.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterState {
    pub params: ParamSet,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // Layouts are a pure function of the config.
        true
    }
}

impl SegmenterState {
    pub fn init(cfg: &SegmenterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, b) = Layout::build(cfg);
        Ok(Self {
            params: b.materialize(rng::derive_seed(seed, "segmenter.init", 0)),
            layout,
        })
    }

    /// Wraps loaded parameters after checking them against `cfg`.
    pub fn from_params(cfg: &SegmenterConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let (layout, b) = Layout::build(cfg);
        b.check(&params)?;
        Ok(Self { params, layout })
    }

    pub fn save(&self, cfg: &SegmenterConfig, seed: u64, path: &std::path::Path) -> Result<()> {
        Checkpoint::new("segmenter", seed, cfg.clone(), self.params.clone()).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, SegmenterConfig, u64)> {
        let ck: Checkpoint<SegmenterConfig> = Checkpoint::load(path, "segmenter")?;
        let state = Self::from_params(&ck.config, ck.params)?;
        Ok((state, ck.config, ck.seed))
    }

    /// Id of the cross-attention output map, exposed for tests that
    /// perturb it.
    pub fn attention_output_param(&self) -> usize {
        self.layout.wo
    }

    pub fn prompt_token_param(&self) -> usize {
        self.layout.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum SpatialPrompt {
    #[default]
    None,
    ProbMap(ProbMap),
    /// Inclusive pixel bounds.
    Box {
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    },
    Points(Vec<PointPrompt>),
}

/// Radius (standard deviation, pixels) of the bump drawn for a point.
pub const POINT_SIGMA: f64 = 2.0;

impl SpatialPrompt {
    pub fn is_none(&self) -> bool {
        matches!(self, SpatialPrompt::None)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match self {
            SpatialPrompt::None => Ok(()),
            SpatialPrompt::ProbMap(p) => {
                if p.height() != height || p.width() != width {
                    return Err(Error::Shape(format!(
                        "prompt raster {}x{} for a {height}x{width} image",
                        p.height(),
                        p.width()
                    )));
                }
                Ok(())
            }
            SpatialPrompt::Box {
                top,
                left,
                bottom,
                right,
            } => {
                if top > bottom || left > right || *bottom >= height || *right >= width {
                    return Err(Error::InvalidArgument(format!(
                        "box ({top},{left})-({bottom},{right}) outside a {height}x{width} image"
                    )));
                }
                Ok(())
            }
            SpatialPrompt::Points(pts) => {
                if let Some(p) = pts.iter().find(|p| p.row >= height || p.col >= width) {
                    return Err(Error::InvalidArgument(format!(
                        "point ({},{}) outside a {height}x{width} image",
                        p.row, p.col
                    )));
                }
                Ok(())
            }
        }
    }

    /// Soft mask in `[0,1]`, or `None` for [`SpatialPrompt::None`]. Boxes
    /// fill their interior with 1; positive points add Gaussian bumps and
    /// negative points suppress around themselves.
    pub fn rasterize(&self, height: usize, width: usize) -> Result<Option<Vec<f64>>> {
        self.validate(height, width)?;
        Ok(match self {
            SpatialPrompt::None => None,
            SpatialPrompt::ProbMap(p) => Some(p.probs().to_vec()),
            SpatialPrompt::Box {
                top,
                left,
                bottom,
                right,
            } => Some(
                (0..height * width)
                    .map(|i| {
                        let (y, x) = (i / width, i % width);
                        f64::from((*top..=*bottom).contains(&y) && (*left..=*right).contains(&x))
                    })
                    .collect(),
            ),
            SpatialPrompt::Points(pts) => {
                let mut pos = vec![0.0f64; height * width];
                let mut keep = vec![1.0f64; height * width];
                for p in pts {
                    for (i, (a, k)) in pos.iter_mut().zip(keep.iter_mut()).enumerate() {
                        let dy = (i / width) as f64 - p.row as f64;
                        let dx = (i % width) as f64 - p.col as f64;
                        let g = (-(dy * dy + dx * dx) / (2.0 * POINT_SIGMA * POINT_SIGMA)).exp();
                        if p.positive {
                            *a = a.max(g);
                        } else {
                            *k *= 1.0 - g;
                        }
                    }
                }
                Some(pos.iter().zip(&keep).map(|(a, k)| a * k).collect())
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterOutputs {
    pub f_img: Tensor,
    /// Projected prompt vector, when the prompt path is on.
    pub h_seg: Option<Tensor>,
    pub p: Tensor,
    pub f_memory: Option<Tensor>,
    pub q: Tensor,
    /// `[H, W]` logits for the requested class.
    pub logits: Tensor,
    pub class_logits: Vec<f64>,
}

/// Template image and class mask as fed to the memory path.
#[derive(Debug, Clone, Copy)]
pub struct TemplateInput<'a> {
    pub image: &'a GrayImage,
    pub mask: &'a LabelMask,
}

impl<'a> From<&'a TemplateEntry> for TemplateInput<'a> {
    fn from(e: &'a TemplateEntry) -> Self {
        Self {
            image: &e.image,
            mask: &e.mask,
        }
    }
}

struct TapeOut {
    f_img: Var,
    h_seg: Option<Var>,
    p: Var,
    f_memory: Option<Var>,
    q: Var,
    logits: Var,
    class_logits: Var,
}

fn stack2(a: &[f64], b: &[f64], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend_from_slice(a);
    data.extend_from_slice(b);
    Tensor {
        shape: vec![2, h, w],
        data,
    }
}

/// Multi-head attention in `[C, N]` token layout: queries from `x`,
/// keys/values from `mem`, output map `wo`, residual onto `x`.
fn cross_attention(t: &mut Tape, l: &Layout, heads: usize, x: Var, mem: Var) -> Var {
    let shape = t.shape(x).to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let m_shape = t.shape(mem).to_vec();
    let nm = m_shape[1] * m_shape[2];
    let xt = t.reshape(x, &[c, n]);
    let mt = t.reshape(mem, &[c, nm]);
    let (wq, wk, wv, wo) = (t.param(l.wq), t.param(l.wk), t.param(l.wv), t.param(l.wo));
    let qm = t.matmul(wq, xt, false, false);
    let km = t.matmul(wk, mt, false, false);
    let vm = t.matmul(wv, mt, false, false);
    let dh = c / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_rows(qm, h * dh, dh);
        let kh = t.slice_rows(km, h * dh, dh);
        let vh = t.slice_rows(vm, h * dh, dh);
        let s = t.matmul(qh, kh, true, false);
        let s = t.scale(s, inv);
        let a = t.softmax_rows(s);
        outs.push(t.matmul(vh, a, false, true));
    }
    let cat = t.concat(&outs);
    let o = t.matmul(wo, cat, false, false);
    let o = t.reshape(o, &shape);
    t.add(x, o)
}

#[allow(clippy::too_many_arguments)]
fn forward_tape(
    t: &mut Tape,
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    image: &GrayImage,
    template: Option<TemplateInput>,
    class_id: u8,
    raster: Option<&[f64]>,
    embedding: Option<&[f64]>,
) -> Result<TapeOut> {
    cfg.check_class(class_id)?;
    let l = &state.layout;
    let (h, w) = (image.height(), image.width());
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!("image sides {h}x{w} must be multiples of 8")));
    }
    if state.params.get(l.tokens).shape[0] != cfg.num_classes as usize
        || state.params.get(l.wq).shape[0] != cfg.feature_channels
    {
        return Err(Error::Shape("segmenter state does not match its config".into()));
    }
    let zeros = vec![0.0; h * w];
    let x = t.constant(stack2(image.pixels(), &zeros, h, w));
    let f_img = l.encoder.apply(t, x);

    let (h_seg, p) = if cfg.use_prompt {
        let tok = match embedding {
            Some(e) => {
                if e.len() != cfg.prompt_dim {
                    return Err(Error::Shape(format!(
                        "external embedding has {} values, prompt dim is {}",
                        e.len(),
                        cfg.prompt_dim
                    )));
                }
                t.constant(Tensor {
                    shape: vec![cfg.prompt_dim],
                    data: e.to_vec(),
                })
            }
            None => {
                let table = t.param(l.tokens);
                let row = t.slice_rows(table, class_id as usize - 1, 1);
                t.reshape(row, &[cfg.prompt_dim])
            }
        };
        let a = l.proj1.apply(t, tok);
        let a = t.silu(a);
        let h_seg = l.proj2.apply(t, a);
        (Some(h_seg), t.add_channel(f_img, h_seg))
    } else {
        (None, f_img)
    };

    let (f_memory, q) = if cfg.use_memory {
        let tpl = template.ok_or_else(|| {
            Error::InvalidArgument("the memory path is on but no template was given".into())
        })?;
        if tpl.image.height() != h || tpl.image.width() != w || !tpl.mask.same_shape_as(tpl.image) {
            return Err(Error::Shape("template size differs from the query".into()));
        }
        let m = t.constant(stack2(tpl.image.pixels(), &tpl.mask.binary(class_id), h, w));
        let f_mem = l.encoder.apply(t, m);
        (Some(f_mem), cross_attention(t, l, cfg.heads, f_img, f_mem))
    } else {
        (None, f_img)
    };

    let (hq, wq) = (h / 4, w / 4);
    let spatial = match raster {
        Some(r) => {
            let rt = Tensor {
                shape: vec![1, h, w],
                data: r.to_vec(),
            };
            let mut d = avg_pool(&rt, 4).data;
            d.extend(std::iter::repeat_n(1.0, hq * wq));
            Tensor {
                shape: vec![SPATIAL_CHANNELS, hq, wq],
                data: d,
            }
        }
        None => Tensor::zeros(&[SPATIAL_CHANNELS, hq, wq]),
    };
    let sp = t.constant(spatial);
    let dec_in = t.concat(&[p, q, sp]);
    let guide = stack2(image.pixels(), raster.unwrap_or(&zeros), h, w);
    let out = l.decoder.apply(t, dec_in, Some(&guide));
    let logits = t.reshape(out, &[h, w]);

    let pq = t.concat(&[p, q]);
    let pooled = t.channel_mean(pq);
    let class_logits = l.class_head.apply(t, pooled);
    Ok(TapeOut {
        f_img,
        h_seg,
        p,
        f_memory,
        q,
        logits,
        class_logits,
    })
}

fn collect(t: &Tape, o: &TapeOut) -> SegmenterOutputs {
    SegmenterOutputs {
        f_img: t.value(o.f_img).clone(),
        h_seg: o.h_seg.map(|v| t.value(v).clone()),
        p: t.value(o.p).clone(),
        f_memory: o.f_memory.map(|v| t.value(v).clone()),
        q: t.value(o.q).clone(),
        logits: t.value(o.logits).clone(),
        class_logits: t.value(o.class_logits).data.clone(),
    }
}

/// One conditioned forward pass for `class_id` (1-based).
pub fn forward(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    image: &GrayImage,
    template: Option<&TemplateEntry>,
    class_id: u8,
    spatial: &SpatialPrompt,
) -> Result<SegmenterOutputs> {
    forward_with(state, cfg, image, template.map(TemplateInput::from), class_id, spatial, None)
}

/// [`forward`] with an explicit template pair and an optional external
/// prompt embedding that replaces the learned class token.
pub fn forward_with(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    image: &GrayImage,
    template: Option<TemplateInput>,
    class_id: u8,
    spatial: &SpatialPrompt,
    embedding: Option<&[f64]>,
) -> Result<SegmenterOutputs> {
    let raster = spatial.rasterize(image.height(), image.width())?;
    let mut t = Tape::new(&state.params);
    let o = forward_tape(&mut t, state, cfg, image, template, class_id, raster.as_deref(), embedding)?;
    let out = collect(&t, &o);
    if !out.logits.is_finite() {
        return Err(Error::NonFinite("segmenter logits".into()));
    }
    Ok(out)
}

/// Scalar loss value with its gradient with respect to the input it was
/// computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Dice plus mean binary cross-entropy on sigmoid probabilities.
pub fn mask_loss(logits: &[f64], target: &[f64], cfg: &SegmenterConfig) -> Result<f64> {
    Ok(mask_loss_grad(logits, target, cfg)?.value)
}

pub fn mask_loss_grad(logits: &[f64], target: &[f64], cfg: &SegmenterConfig) -> Result<LossGrad> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            target.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask logits".into()));
    }
    if target.iter().any(|m| *m != 0.0 && *m != 1.0) {
        return Err(Error::InvalidArgument("mask target must be binary".into()));
    }
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|z| nn_sigmoid(*z)).collect();
    let inter: f64 = probs.iter().zip(target).map(|(p, m)| p * m).sum();
    let sum_m: f64 = target.iter().sum();
    let sum_p: f64 = probs.iter().sum();
    let den = sum_m + sum_p + cfg.eps;
    let dice = 1.0 - 2.0 * inter / den;
    let bce: f64 = logits
        .iter()
        .zip(target)
        .map(|(z, m)| nn::softplus(*z) - m * z)
        .sum::<f64>()
        / n;
    let value = cfg.lambda_dice * dice + cfg.lambda_bce * bce;
    let grad = logits
        .iter()
        .zip(target)
        .zip(&probs)
        .map(|((_, m), p)| {
            let d_dice = -2.0 * (m * den - inter) / (den * den);
            cfg.lambda_dice * d_dice * p * (1.0 - p) + cfg.lambda_bce * (p - m) / n
        })
        .collect();
    Ok(LossGrad { value, grad })
}

fn nn_sigmoid(z: f64) -> f64 {
    crate::autograd::sigmoid(z)
}

/// Cross-entropy of the pooled class logits against `class_id`.
pub fn text_loss(class_logits: &[f64], class_id: u8) -> Result<f64> {
    Ok(text_loss_grad(class_logits, class_id)?.value)
}

pub fn text_loss_grad(class_logits: &[f64], class_id: u8) -> Result<LossGrad> {
    let k = class_id as usize;
    if k >= class_logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} outside {} class logits",
            class_logits.len()
        )));
    }
    let m = class_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = class_logits.iter().map(|v| (v - m).exp()).sum();
    let lse = m + z.ln();
    let grad = class_logits
        .iter()
        .enumerate()
        .map(|(i, v)| (v - lse).exp() - f64::from(i == k))
        .collect();
    Ok(LossGrad {
        value: lse - class_logits[k],
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub total: f64,
    pub text: f64,
    pub mask: f64,
}

/// Weighted sum of the text and mask terms.
pub fn stage1_loss(
    outputs: &SegmenterOutputs,
    target: &LabelMask,
    class_id: u8,
    cfg: &SegmenterConfig,
) -> Result<Stage1Loss> {
    cfg.check_class(class_id)?;
    let text = text_loss(&outputs.class_logits, class_id)?;
    let mask = mask_loss(&outputs.logits.data, &target.binary(class_id), cfg)?;
    Ok(Stage1Loss {
        total: cfg.lambda_txt * text + cfg.lambda_mask * mask,
        text,
        mask,
    })
}

/// One training example for stage 1.
#[derive(Debug, Clone)]
pub struct Stage1Example<'a> {
    pub image: &'a GrayImage,
    pub target: &'a LabelMask,
    pub class_id: u8,
    pub template: Option<TemplateInput<'a>>,
    pub spatial: SpatialPrompt,
}

/// Loss and parameter gradients for one example.
pub fn stage1_loss_and_grad(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    ex: &Stage1Example,
) -> Result<(Stage1Loss, Gradients)> {
    let raster = ex.spatial.rasterize(ex.image.height(), ex.image.width())?;
    let mut t = Tape::new(&state.params);
    let o = forward_tape(&mut t, state, cfg, ex.image, ex.template, ex.class_id, raster.as_deref(), None)?;
    let target = ex.target.binary(ex.class_id);
    let ml = mask_loss_grad(&t.value(o.logits).data, &target, cfg)?;
    let tl = text_loss_grad(&t.value(o.class_logits).data, ex.class_id)?;
    let shape_l = t.shape(o.logits).to_vec();
    let shape_c = t.shape(o.class_logits).to_vec();
    let mnode = t.fused_scalar(o.logits, ml.value, Tensor { shape: shape_l, data: ml.grad });
    let tnode = t.fused_scalar(o.class_logits, tl.value, Tensor { shape: shape_c, data: tl.grad });
    let total = t.weighted_sum(&[(tnode, cfg.lambda_txt), (mnode, cfg.lambda_mask)]);
    let loss = Stage1Loss {
        total: t.value(total).item(),
        text: tl.value,
        mask: ml.value,
    };
    Ok((loss, t.backward(total)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Options {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Probability that an example carries a simulated teacher map as
    /// its spatial prompt.
    pub spatial_prompt_prob: f64,
    /// Photometric jitter on query images.
    pub query_photometric: bool,
    pub seed: u64,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            batch_size: 2,
            clip_norm: 5.0,
            spatial_prompt_prob: 0.5,
            query_photometric: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogRow {
    pub step: usize,
    pub total: f64,
    pub text: f64,
    pub mask: f64,
}

/// A degraded copy of `target`: shifted up to two pixels, blurred, and
/// pulled toward 0.5 by a random confidence, standing in for a teacher
/// probability map.
pub fn simulated_prob_map(target: &[f64], height: usize, width: usize, seed: u64) -> ProbMap {
    let mut r = rng::rng_from_seed(seed);
    let dy: i64 = r.random_range(-2..=2);
    let dx: i64 = r.random_range(-2..=2);
    let sigma: f64 = r.random_range(0.5..=2.0);
    let conf: f64 = r.random_range(0.6..=1.0);
    let shifted: Vec<f64> = (0..height * width)
        .map(|i| {
            let y = (i / width) as i64 - dy;
            let x = (i % width) as i64 - dx;
            if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
                0.0
            } else {
                target[y as usize * width + x as usize]
            }
        })
        .collect();
    let blurred = gaussian_blur_raster(
        &Raster {
            height,
            width,
            data: shifted,
        },
        sigma,
    );
    let probs = blurred
        .data
        .iter()
        .map(|v| (0.5 + (v - 0.5) * conf).clamp(0.0, 1.0))
        .collect();
    ProbMap::new(height, width, probs).expect("values clamped to [0,1]")
}

/// Trains the assistant on the labeled split. Each example draws a
/// labeled slice and a class, a template of that class from the bank
/// (excluding the slice itself when another candidate exists), augments
/// query and template, and runs one forward/backward pass.
pub fn train_stage1(
    manifest: &DatasetManifest,
    bank: &TemplateBank,
    cfg: &SegmenterConfig,
    opts: &Stage1Options,
) -> Result<(SegmenterState, Vec<Stage1LogRow>)> {
    cfg.validate()?;
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    let labeled = manifest.load_split(Split::Labeled)?;
    let examples: Vec<(&GrayImage, &LabelMask)> = labeled
        .iter()
        .filter_map(|s| s.mask.as_ref().map(|m| (&s.image, m)))
        .collect();
    if examples.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs labeled slices".into()));
    }
    if cfg.use_memory && bank.is_empty() {
        return Err(Error::Bank("stage 1 needs a non-empty template bank".into()));
    }
    let self_index: Vec<Option<usize>> = examples
        .iter()
        .map(|(img, _)| {
            let h = crate::templatebank::image_hash(img);
            bank.entries().iter().position(|e| e.image_hash() == h)
        })
        .collect();
    // The pooled head has no class signal without the prompt path.
    let eff = SegmenterConfig {
        lambda_txt: if cfg.use_prompt { cfg.lambda_txt } else { 0.0 },
        ..cfg.clone()
    };
    let mut state = SegmenterState::init(cfg, opts.seed)?;
    let photometric = StrongAugConfig {
        cutout_prob: 0.0,
        ..StrongAugConfig::default()
    };
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut grads = Gradients::zeros_like(&state.params);
        let mut sum = Stage1Loss {
            total: 0.0,
            text: 0.0,
            mask: 0.0,
        };
        for b in 0..opts.batch_size {
            let item = (step * opts.batch_size + b) as u64;
            let mut r = rng::substream(opts.seed, "stage1.example", item);
            let idx = r.random_range(0..examples.len());
            let class_id = r.random_range(1..=cfg.num_classes);
            let (img, mask) = examples[idx];
            let weak = data::weak_augment_with(
                img,
                Some(mask),
                &data::WeakAugConfig::default(),
                rng::derive_seed(opts.seed, "stage1.weak", item),
            );
            let query = if opts.query_photometric {
                data::strong_augment_with(&weak, &photometric, rng::derive_seed(opts.seed, "stage1.photo", item))
            } else {
                weak
            };
            let qmask = query.mask.clone().expect("weak view keeps the mask");
            let tpl_view = if cfg.use_memory {
                let draw = bank.sample_excluding(
                    &compute_descriptor(img),
                    Some(class_id),
                    rng::derive_seed(opts.seed, "stage1.template", item),
                    &self_index[idx].into_iter().collect::<Vec<_>>(),
                )?;
                let e = bank.entry(draw.chosen);
                Some(data::template_augment(
                    &e.image,
                    &e.mask,
                    rng::derive_seed(opts.seed, "stage1.template_aug", item),
                ))
            } else {
                None
            };
            let spatial = if r.random_bool(opts.spatial_prompt_prob) {
                SpatialPrompt::ProbMap(simulated_prob_map(
                    &qmask.binary(class_id),
                    qmask.height(),
                    qmask.width(),
                    rng::derive_seed(opts.seed, "stage1.spatial", item),
                ))
            } else {
                SpatialPrompt::None
            };
            let ex = Stage1Example {
                image: &query.image,
                target: &qmask,
                class_id,
                template: tpl_view.as_ref().map(|v| TemplateInput {
                    image: &v.image,
                    mask: v.mask.as_ref().expect("template view keeps the mask"),
                }),
                spatial,
            };
            let (l, g) = stage1_loss_and_grad(&state, &eff, &ex)?;
            if !l.total.is_finite() || !g.is_finite() {
                return Err(Error::Diverged { step, loss: l.total });
            }
            let inv = 1.0 / opts.batch_size as f64;
            grads.accumulate(&g, inv);
            sum.total += l.total * inv;
            sum.text += l.text * inv;
            sum.mask += l.mask * inv;
        }
        if opts.clip_norm > 0.0 {
            nn::clip_grad_norm(&mut grads, opts.clip_norm);
        }
        state.params.sgd_step(&grads, opts.learning_rate);
        if !state.params.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        if step % 50 == 0 {
            debug!("stage1 step {step}: loss {:.4} (mask {:.4}, text {:.4})", sum.total, sum.mask, sum.text);
        }
        log.push(Stage1LogRow {
            step,
            total: sum.total,
            text: sum.text,
            mask: sum.mask,
        });
    }
    Ok((state, log))
}

/// Foreground logits for `class_id` with a template drawn from `bank`.
pub fn predict_logits(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    image: &GrayImage,
    bank: &TemplateBank,
    class_id: u8,
    spatial: &SpatialPrompt,
    seed: u64,
) -> Result<(Tensor, Option<SampleDraw>)> {
    let draw = if cfg.use_memory {
        let d = bank.sample(&compute_descriptor(image), Some(class_id), seed)?;
        debug!(
            "class {class_id}: template {} from {:?} (p = {:?})",
            d.chosen, d.candidates, d.probabilities
        );
        Some(d)
    } else {
        None
    };
    let tpl = draw.as_ref().map(|d| bank.entry(d.chosen));
    let out = forward(state, cfg, image, tpl, class_id, spatial)?;
    Ok((out.logits, draw))
}

/// Foreground probability map for `class_id`.
pub fn predict(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    image: &GrayImage,
    bank: &TemplateBank,
    class_id: u8,
    spatial: &SpatialPrompt,
    seed: u64,
) -> Result<(ProbMap, Option<SampleDraw>)> {
    let (logits, draw) = predict_logits(state, cfg, image, bank, class_id, spatial, seed)?;
    let probs = logits.data.iter().map(|z| nn_sigmoid(*z)).collect();
    Ok((ProbMap::new(image.height(), image.width(), probs)?, draw))
}

/// Label map from per-class predictions: a pixel takes the most probable
/// class whose probability exceeds 0.5, ties to the lower class.
pub fn predict_mask(
    state: &SegmenterState,
    cfg: &SegmenterConfig,
    image: &GrayImage,
    bank: &TemplateBank,
    seed: u64,
) -> Result<LabelMask> {
    let n = image.height() * image.width();
    let mut best = vec![0.5f64; n];
    let mut labels = vec![0u8; n];
    for c in 1..=cfg.num_classes {
        let (p, _) = predict(
            state,
            cfg,
            image,
            bank,
            c,
            &SpatialPrompt::None,
            rng::derive_seed(seed, "predict.class", c as u64),
        )?;
        for (i, v) in p.probs().iter().enumerate() {
            if *v > best[i] {
                best[i] = *v;
                labels[i] = c;
            }
        }
    }
    LabelMask::new(image.height(), image.width(), cfg.num_classes, labels)
}
