//! Parameter layouts and the small conv blocks shared by both networks.

use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{avg_pool, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    He(usize),
    Normal(f64),
    Zeros,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Records parameter names, shapes and initializers in a fixed order so
/// a layout can either be materialized from a seed or checked against a
/// loaded [`ParamSet`].
#[derive(Debug, Default, Clone)]
pub(crate) struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    pub(crate) fn param(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub(crate) fn materialize(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, s) in self.specs.iter().enumerate() {
            let n: usize = s.shape.iter().product();
            let std = match s.init {
                Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
                Init::Normal(std) => std,
                Init::Zeros => 0.0,
            };
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                let mut r = rng::substream(seed, &s.name, i as u64);
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut r)).collect()
            };
            ps.add(&s.name, Tensor { shape: s.shape.clone(), data });
        }
        ps
    }

    pub(crate) fn check(&self, ps: &ParamSet) -> Result<()> {
        if ps.len() != self.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                ps.len()
            )));
        }
        for (i, s) in self.specs.iter().enumerate() {
            if ps.name(i) != s.name || ps.get(i).shape != s.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {} {:?}",
                    s.name,
                    s.shape,
                    ps.name(i),
                    ps.get(i).shape
                )));
            }
        }
        if !ps.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn new(b: &mut Builder, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        Self {
            w: b.param(&format!("{name}.w"), &[co, ci, k, k], Init::He(ci * k * k)),
            b: b.param(&format!("{name}.b"), &[co], Init::Zeros),
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
    out: usize,
}

impl Linear {
    pub(crate) fn new(b: &mut Builder, name: &str, input: usize, out: usize) -> Self {
        Self {
            w: b.param(&format!("{name}.w"), &[out, input], Init::He(input)),
            b: b.param(&format!("{name}.b"), &[out], Init::Zeros),
            out,
        }
    }

    /// `W x + b` for a vector `x`.
    pub(crate) fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.value(x).len();
        let col = t.reshape(x, &[n, 1]);
        let w = t.param(self.w);
        let y = t.matmul(w, col, false, false);
        let y = t.reshape(y, &[self.out]);
        let b = t.param(self.b);
        t.add(y, b)
    }
}

/// Widths of the three stride-2 stages before the last one.
pub(crate) const ENC_WIDTHS: [usize; 2] = [16, 32];

/// Three stride-2 conv blocks, then one 2x upsample merged with the
/// stride-4 activations: output is `[C_f, H/4, W/4]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Encoder {
    c1: Conv,
    c2: Conv,
    c3: Conv,
    fuse: Conv,
}

impl Encoder {
    pub(crate) fn new(b: &mut Builder, name: &str, in_ch: usize, cf: usize) -> Self {
        let [w1, w2] = ENC_WIDTHS;
        Self {
            c1: Conv::new(b, &format!("{name}.c1"), in_ch, w1, 3, 2),
            c2: Conv::new(b, &format!("{name}.c2"), w1, w2, 3, 2),
            c3: Conv::new(b, &format!("{name}.c3"), w2, cf, 3, 2),
            fuse: Conv::new(b, &format!("{name}.fuse"), cf + w2, cf, 1, 1),
        }
    }

    pub(crate) fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let a1 = self.c1.apply(t, x);
        let a1 = t.silu(a1);
        let a2 = self.c2.apply(t, a1);
        let a2 = t.silu(a2);
        let a3 = self.c3.apply(t, a2);
        let a3 = t.silu(a3);
        let up = t.upsample2(a3);
        let cat = t.concat(&[up, a2]);
        let f = self.fuse.apply(t, cat);
        t.silu(f)
    }
}

/// Decoder widths at stride 4, 2 and 1.
pub(crate) const DEC_WIDTHS: [usize; 3] = [24, 16, 8];

/// Two upsample-conv blocks from stride 4 to full resolution. Optional
/// guide rasters (image, prompt) are concatenated at every scale.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Decoder {
    fuse: Conv,
    up1: Conv,
    up2: Conv,
    head: Conv,
}

impl Decoder {
    /// `guides` is the number of full-resolution guide channels that get
    /// pooled and concatenated at the two upsampled scales.
    pub(crate) fn new(b: &mut Builder, name: &str, in_ch: usize, guides: usize, out: usize) -> Self {
        let [d0, d1, d2] = DEC_WIDTHS;
        Self {
            fuse: Conv::new(b, &format!("{name}.fuse"), in_ch, d0, 1, 1),
            up1: Conv::new(b, &format!("{name}.up1"), d0 + guides, d1, 3, 1),
            up2: Conv::new(b, &format!("{name}.up2"), d1 + guides, d2, 3, 1),
            head: Conv::new(b, &format!("{name}.head"), d2, out, 1, 1),
        }
    }

    /// `x` is `[in_ch, H/4, W/4]`; `guide` is `[guides, H, W]` or `None`
    /// when the decoder was built without guides.
    pub(crate) fn apply(&self, t: &mut Tape, x: Var, guide: Option<&Tensor>) -> Var {
        let h = self.fuse.apply(t, x);
        let h = t.silu(h);
        let h = t.upsample2(h);
        let h = match guide {
            Some(g) => {
                let g2 = t.constant(avg_pool(g, 2));
                t.concat(&[h, g2])
            }
            None => h,
        };
        let h = self.up1.apply(t, h);
        let h = t.silu(h);
        let h = t.upsample2(h);
        let h = match guide {
            Some(g) => {
                let g1 = t.constant(g.clone());
                t.concat(&[h, g1])
            }
            None => h,
        };
        let h = self.up2.apply(t, h);
        let h = t.silu(h);
        self.head.apply(t, h)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-pixel softmax over the channels of a `[K, N]` logit block, written
/// channel-major.
pub fn softmax_channels(logits: &[f64], k: usize) -> Vec<f64> {
    let n = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for i in 0..n {
        let m = (0..k).map(|c| logits[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (logits[c * n + i] - m).exp();
            out[c * n + i] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + i] /= z;
        }
    }
    out
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut crate::autograd::Gradients, max_norm: f64) -> f64 {
    let norm = grads
        .by_param
        .iter()
        .flatten()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.by_param.iter_mut().flatten() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
