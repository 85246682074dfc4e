//! A small fully-convolutional segmentation network.
//!
//! `hidden` 3x3 convolutions (each followed by optional normalization and
//! tanh) feed a 1x1 head that emits one logit per foreground class. The loss
//! is multi-label sigmoid focal cross-entropy, summed over classes and
//! averaged over pixels; background pixels have an all-zero target.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Evaluation, Model, ModelError, Result, TrainConfig};
use crate::data::SynthImage;
use crate::metrics;
use crate::params::{ParameterSet, Tensor, TensorKind};
use crate::seed::rng;

const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Batch statistics in training, running statistics at evaluation.
    BatchStats,
    /// Per-sample statistics over channel groups; no running state.
    GroupStats,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Height, width, channels.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub channel_widths: Vec<usize>,
    pub normalization: Normalization,
    #[serde(default = "default_groups")]
    pub group_count: usize,
}

fn default_groups() -> usize {
    2
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_shape: [16, 16, 1],
            num_classes: 7,
            channel_widths: vec![8, 8],
            normalization: Normalization::GroupStats,
            group_count: 2,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 {
            return bad("input height and width must be positive".into());
        }
        if c != 1 {
            return bad(format!("single-channel inputs only, got {c} channels"));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return bad("num_classes must lie in 1..=254".into());
        }
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return bad("channel_widths must be a nonempty list of positive widths".into());
        }
        if self.group_count == 0 {
            return bad("group_count must be positive".into());
        }
        if self.normalization == Normalization::GroupStats {
            if let Some(w) = self.channel_widths.iter().find(|&&w| w % self.group_count != 0) {
                return bad(format!("group_count {} does not divide width {w}", self.group_count));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    weight: Slot,
    bias: Slot,
    gamma: Option<Slot>,
    beta: Option<Slot>,
    running_mean: Option<Slot>,
    running_var: Option<Slot>,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    spec: ModelSpec,
    template: ParameterSet,
    layers: Vec<LayerSlots>,
    head_weight: Slot,
    head_bias: Slot,
}

fn slots_of(set: &ParameterSet) -> BTreeMap<String, Slot> {
    let mut offset = 0;
    set.iter()
        .map(|(name, t)| {
            let slot = Slot { offset, len: t.len() };
            offset += t.len();
            (name.clone(), slot)
        })
        .collect()
}

impl SegNet {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let template = Self::build_params(&spec, 0);
        let tr = slots_of(&template.trainable());
        let bf = slots_of(&template.buffers());
        let mut cin = spec.input_shape[2];
        let layers = spec
            .channel_widths
            .iter()
            .enumerate()
            .map(|(l, &cout)| {
                let name = |s: &str| format!("layer{l}.{s}");
                let slots = LayerSlots {
                    weight: tr[&name("conv.weight")],
                    bias: tr[&name("conv.bias")],
                    gamma: tr.get(&name("norm.gamma")).copied(),
                    beta: tr.get(&name("norm.beta")).copied(),
                    running_mean: bf.get(&name("norm.running_mean")).copied(),
                    running_var: bf.get(&name("norm.running_var")).copied(),
                    cin,
                    cout,
                };
                cin = cout;
                slots
            })
            .collect();
        Ok(Self { head_weight: tr["head.weight"], head_bias: tr["head.bias"], spec, template, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn build_params(spec: &ModelSpec, seed: u64) -> ParameterSet {
        let mut rng = rng(seed);
        let mut set = ParameterSet::new();
        let mut xavier = |shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
            Tensor::trainable(shape, values).expect("consistent shape")
        };
        let mut cin = spec.input_shape[2];
        for (l, &cout) in spec.channel_widths.iter().enumerate() {
            let weight = xavier(vec![cout, cin, 3, 3], cin * 9, cout * 9);
            let mut put = |s: &str, t: Tensor| set.insert(format!("layer{l}.{s}"), t).expect("unique");
            put("conv.weight", weight);
            put("conv.bias", Tensor::zeros(vec![cout], TensorKind::Trainable));
            if spec.normalization != Normalization::None {
                put("norm.gamma", Tensor::trainable(vec![cout], vec![1.0; cout]).expect("shape"));
                put("norm.beta", Tensor::zeros(vec![cout], TensorKind::Trainable));
            }
            if spec.normalization == Normalization::BatchStats {
                put("norm.running_mean", Tensor::zeros(vec![cout], TensorKind::PersistentBuffer));
                put("norm.running_var", Tensor::buffer(vec![cout], vec![1.0; cout]).expect("shape"));
            }
            cin = cout;
        }
        let k = spec.num_classes;
        let head = xavier(vec![k, cin, 1, 1], cin, k);
        set.insert("head.weight", head).expect("unique");
        set.insert("head.bias", Tensor::zeros(vec![k], TensorKind::Trainable)).expect("unique");
        set
    }

    fn check_images(&self, images: &[&SynthImage]) -> Result<()> {
        let [h, w, _] = self.spec.input_shape;
        for im in images {
            if im.height != h || im.width != w || im.intensity.len() != h * w || im.mask.len() != h * w {
                return Err(ModelError::ShapeMismatch(format!(
                    "image {}x{} does not match model input {h}x{w}",
                    im.height, im.width
                )));
            }
            if let Some(&m) = im.mask.iter().find(|&&m| m as usize > self.spec.num_classes) {
                return Err(ModelError::ShapeMismatch(format!(
                    "mask label {m} exceeds {} classes",
                    self.spec.num_classes
                )));
            }
        }
        Ok(())
    }

    fn check_flat(&self, trainable: &[f64], buffers: &[f64]) -> Result<()> {
        let nt = self.template.trainable().num_values();
        let nb = self.template.buffers().num_values();
        if trainable.len() != nt || buffers.len() != nb {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {nt} trainable and {nb} buffer values, got {} and {}",
                trainable.len(),
                buffers.len()
            )));
        }
        Ok(())
    }

    /// Forward pass; in training mode the running statistics are advanced.
    fn forward(&self, theta: &[f64], buffers: &mut [f64], images: &[&SynthImage], train: bool) -> Trace {
        let [h, w, _] = self.spec.input_shape;
        let dims = Dims { batch: images.len(), h, w };
        let mut x: Vec<f64> = images.iter().flat_map(|im| im.intensity.iter().map(|&v| v as f64)).collect();
        let mut layers = Vec::with_capacity(self.layers.len());
        for slots in &self.layers {
            let z = conv_forward(
                &x,
                dims,
                slots.cin,
                slots.cout,
                3,
                &theta[range(slots.weight)],
                &theta[range(slots.bias)],
            );
            let (normed, norm) = match self.spec.normalization {
                Normalization::None => (z.clone(), None),
                Normalization::BatchStats => {
                    let (rm, rv) = (slots.running_mean.expect("bn"), slots.running_var.expect("bn"));
                    let cache = if train {
                        let cache = batch_stats(&z, dims, slots.cout);
                        for c in 0..slots.cout {
                            let m = &mut buffers[rm.offset + c];
                            *m = RUNNING_MOMENTUM * *m + (1.0 - RUNNING_MOMENTUM) * cache.mean[c];
                            let v = &mut buffers[rv.offset + c];
                            *v = RUNNING_MOMENTUM * *v + (1.0 - RUNNING_MOMENTUM) * cache.var[c];
                        }
                        cache
                    } else {
                        running_stats(&z, dims, slots.cout, &buffers[range(rm)], &buffers[range(rv)])
                    };
                    (affine(&cache.xhat, dims, slots.cout, theta, slots), Some(cache))
                }
                Normalization::GroupStats => {
                    let cache = group_stats(&z, dims, slots.cout, self.spec.group_count);
                    (affine(&cache.xhat, dims, slots.cout, theta, slots), Some(cache))
                }
            };
            let a: Vec<f64> = normed.iter().map(|v| v.tanh()).collect();
            layers.push(LayerTrace { input: x, norm, act: a.clone(), cout: slots.cout });
            x = a;
        }
        let cin = self.layers.last().map_or(1, |l| l.cout);
        let logits = conv_forward(
            &x,
            dims,
            cin,
            self.spec.num_classes,
            1,
            &theta[range(self.head_weight)],
            &theta[range(self.head_bias)],
        );
        Trace { dims, layers, head_input: x, logits }
    }

    fn backward(&self, theta: &[f64], trace: &Trace, dlogits: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; theta.len()];
        let dims = trace.dims;
        let cin = self.layers.last().map_or(1, |l| l.cout);
        let mut dx = conv_backward(
            &trace.head_input,
            dlogits,
            dims,
            cin,
            self.spec.num_classes,
            1,
            &theta[range(self.head_weight)],
            &mut grad,
            self.head_weight,
            self.head_bias,
            true,
        );
        for (slots, layer) in self.layers.iter().zip(&trace.layers).rev() {
            // tanh'
            let dn: Vec<f64> = dx.iter().zip(&layer.act).map(|(d, a)| d * (1.0 - a * a)).collect();
            let dz = match &layer.norm {
                None => dn,
                Some(cache) => {
                    let (gs, bs) = (slots.gamma.expect("norm"), slots.beta.expect("norm"));
                    let hw = dims.h * dims.w;
                    let mut dxhat = vec![0.0; dn.len()];
                    for b in 0..dims.batch {
                        for c in 0..layer.cout {
                            let base = (b * layer.cout + c) * hw;
                            let gamma = theta[gs.offset + c];
                            let (mut dg, mut db) = (0.0, 0.0);
                            for i in base..base + hw {
                                dg += dn[i] * cache.xhat[i];
                                db += dn[i];
                                dxhat[i] = dn[i] * gamma;
                            }
                            grad[gs.offset + c] += dg;
                            grad[bs.offset + c] += db;
                        }
                    }
                    norm_backward(&dxhat, cache)
                }
            };
            let need_dx = !std::ptr::eq(slots, &self.layers[0]);
            dx = conv_backward(
                &layer.input,
                &dz,
                dims,
                slots.cin,
                slots.cout,
                3,
                &theta[range(slots.weight)],
                &mut grad,
                slots.weight,
                slots.bias,
                need_dx,
            );
        }
        grad
    }

    /// Evaluation-mode loss and per-pixel class probabilities, laid out
    /// `[image][y][x][class]`.
    pub fn forward_loss(
        &self,
        params: &ParameterSet,
        batch: &[&SynthImage],
        cfg: &TrainConfig,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        params.check_structure(&self.template)?;
        self.check_images(batch)?;
        let theta = params.trainable().to_flat_f64();
        let mut buffers = params.buffers().to_flat_f64();
        let trace = self.forward(&theta, &mut buffers, batch, false);
        let (loss, _) = focal_loss_masks(
            &trace.logits,
            &masks(batch),
            trace.dims,
            self.spec.num_classes,
            cfg.focal_alpha,
            cfg.focal_gamma,
        );
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        Ok((loss, scores_hwc(&trace.logits, trace.dims, self.spec.num_classes)))
    }

    /// Predicted label masks: background unless some class probability reaches 0.5.
    pub fn predict(&self, params: &ParameterSet, images: &[&SynthImage]) -> Result<Vec<Vec<u8>>> {
        params.check_structure(&self.template)?;
        self.check_images(images)?;
        let theta = params.trainable().to_flat_f64();
        let mut buffers = params.buffers().to_flat_f64();
        let trace = self.forward(&theta, &mut buffers, images, false);
        Ok(predict_masks(&trace.logits, trace.dims, self.spec.num_classes))
    }
}

fn range(slot: Slot) -> std::ops::Range<usize> {
    slot.offset..slot.offset + slot.len
}

fn masks<'a>(images: &[&'a SynthImage]) -> Vec<&'a [u8]> {
    images.iter().map(|im| im.mask.as_slice()).collect()
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    h: usize,
    w: usize,
}

struct NormCache {
    xhat: Vec<f64>,
    /// Inverse standard deviation per normalization set.
    inv_std: Vec<f64>,
    /// Per-set mean and variance (used for running statistics).
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Element index ranges making up each set.
    sets: Vec<Vec<std::ops::Range<usize>>>,
    /// Whether gradients flow through the statistics (training mode).
    batch_dependent: bool,
}

struct LayerTrace {
    input: Vec<f64>,
    norm: Option<NormCache>,
    act: Vec<f64>,
    cout: usize,
}

struct Trace {
    dims: Dims,
    layers: Vec<LayerTrace>,
    head_input: Vec<f64>,
    logits: Vec<f64>,
}

fn conv_forward(x: &[f64], d: Dims, cin: usize, cout: usize, k: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let hw = h * w;
    let pad = k / 2;
    let mut out = vec![0.0; d.batch * cout * hw];
    for b in 0..d.batch {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * hw..(b * cout + o + 1) * hw];
            dst.fill(bias[o]);
            for i in 0..cin {
                let src = &x[(b * cin + i) * hw..(b * cin + i + 1) * hw];
                for ky in 0..k {
                    let (y0, y1) = valid(ky, pad, h);
                    for kx in 0..k {
                        let (x0, x1) = valid(kx, pad, w);
                        let wv = weight[((o * cin + i) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let sy = y + ky - pad;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                            for (o, s) in drow.iter_mut().zip(srow) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows/cols `[lo, hi)` whose tap `kk` lands inside the input.
fn valid(kk: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (n + pad).saturating_sub(kk).min(n);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    dout: &[f64],
    d: Dims,
    cin: usize,
    cout: usize,
    k: usize,
    weight: &[f64],
    grad: &mut [f64],
    wslot: Slot,
    bslot: Slot,
    need_dx: bool,
) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let hw = h * w;
    let pad = k / 2;
    let mut dx = if need_dx { vec![0.0; d.batch * cin * hw] } else { Vec::new() };
    for b in 0..d.batch {
        for o in 0..cout {
            let g = &dout[(b * cout + o) * hw..(b * cout + o + 1) * hw];
            grad[bslot.offset + o] += g.iter().sum::<f64>();
            for i in 0..cin {
                let src = &x[(b * cin + i) * hw..(b * cin + i + 1) * hw];
                for ky in 0..k {
                    let (y0, y1) = valid(ky, pad, h);
                    for kx in 0..k {
                        let (x0, x1) = valid(kx, pad, w);
                        let widx = ((o * cin + i) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - pad;
                            let grow = &g[y * w + x0..y * w + x1];
                            let soff = sy * w + x0 + kx - pad;
                            let srow = &src[soff..soff + (x1 - x0)];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            if need_dx {
                                let base = (b * cin + i) * hw + soff;
                                for (dst, gv) in dx[base..base + (x1 - x0)].iter_mut().zip(grow) {
                                    *dst += wv * gv;
                                }
                            }
                        }
                        grad[wslot.offset + widx] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn normalize_sets(z: &[f64], sets: Vec<Vec<std::ops::Range<usize>>>) -> NormCache {
    let mut xhat = vec![0.0; z.len()];
    let (mut inv_std, mut mean, mut var) = (Vec::new(), Vec::new(), Vec::new());
    for set in &sets {
        let count: usize = set.iter().map(|r| r.len()).sum();
        let m = set.iter().flat_map(|r| z[r.clone()].iter()).sum::<f64>() / count as f64;
        let v = set.iter().flat_map(|r| z[r.clone()].iter()).map(|x| (x - m).powi(2)).sum::<f64>() / count as f64;
        let inv = 1.0 / (v + NORM_EPS).sqrt();
        for r in set {
            for i in r.clone() {
                xhat[i] = (z[i] - m) * inv;
            }
        }
        inv_std.push(inv);
        mean.push(m);
        var.push(v);
    }
    NormCache { xhat, inv_std, mean, var, sets, batch_dependent: true }
}

fn channel_sets(d: Dims, c: usize) -> Vec<Vec<std::ops::Range<usize>>> {
    let hw = d.h * d.w;
    (0..c).map(|ch| (0..d.batch).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect()).collect()
}

fn batch_stats(z: &[f64], d: Dims, c: usize) -> NormCache {
    normalize_sets(z, channel_sets(d, c))
}

fn running_stats(z: &[f64], d: Dims, c: usize, mean: &[f64], var: &[f64]) -> NormCache {
    let hw = d.h * d.w;
    let mut xhat = vec![0.0; z.len()];
    for b in 0..d.batch {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + NORM_EPS).sqrt();
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                xhat[i] = (z[i] - mean[ch]) * inv;
            }
        }
    }
    NormCache {
        xhat,
        inv_std: var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
        mean: mean.to_vec(),
        var: var.to_vec(),
        sets: channel_sets(d, c),
        batch_dependent: false,
    }
}

fn group_stats(z: &[f64], d: Dims, c: usize, groups: usize) -> NormCache {
    let hw = d.h * d.w;
    let per = c / groups;
    let sets = (0..d.batch)
        .flat_map(|b| {
            (0..groups).map(move |g| std::iter::once((b * c + g * per) * hw..(b * c + (g + 1) * per) * hw).collect())
        })
        .collect();
    normalize_sets(z, sets)
}

fn affine(xhat: &[f64], d: Dims, c: usize, theta: &[f64], slots: &LayerSlots) -> Vec<f64> {
    let hw = d.h * d.w;
    let (gs, bs) = (slots.gamma.expect("norm"), slots.beta.expect("norm"));
    let mut out = vec![0.0; xhat.len()];
    for b in 0..d.batch {
        for ch in 0..c {
            let (g, be) = (theta[gs.offset + ch], theta[bs.offset + ch]);
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                out[i] = g * xhat[i] + be;
            }
        }
    }
    out
}

/// Gradient through `xhat = (z - mean) * inv_std` with set statistics.
fn norm_backward(dxhat: &[f64], cache: &NormCache) -> Vec<f64> {
    let mut dz = vec![0.0; dxhat.len()];
    for (s, set) in cache.sets.iter().enumerate() {
        let inv = cache.inv_std[s];
        if !cache.batch_dependent {
            for r in set {
                for i in r.clone() {
                    dz[i] = dxhat[i] * inv;
                }
            }
            continue;
        }
        let count = set.iter().map(|r| r.len()).sum::<usize>() as f64;
        let (mut sum, mut sum_x) = (0.0, 0.0);
        for r in set {
            for i in r.clone() {
                sum += dxhat[i];
                sum_x += dxhat[i] * cache.xhat[i];
            }
        }
        for r in set {
            for i in r.clone() {
                dz[i] = inv / count * (count * dxhat[i] - sum - cache.xhat[i] * sum_x);
            }
        }
    }
    dz
}

fn log_sigmoid(z: f64) -> f64 {
    // log(1 / (1 + e^-z)) = -softplus(-z)
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss for one logit `s` with binary target; returns (loss, dloss/ds).
fn focal_element(s: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (signed, alpha_t, sign) = if target { (s, alpha, 1.0) } else { (-s, 1.0 - alpha, -1.0) };
    let q = sigmoid(signed);
    let one_minus_q = sigmoid(-signed);
    let log_q = log_sigmoid(signed);
    let modulator = if gamma == 0.0 { 1.0 } else { one_minus_q.powf(gamma) };
    let loss = -alpha_t * modulator * log_q;
    let dloss = sign * alpha_t * (gamma * modulator * q * log_q - modulator * one_minus_q);
    (loss, dloss)
}

fn focal_loss_masks(
    logits: &[f64],
    masks: &[&[u8]],
    d: Dims,
    classes: usize,
    alpha: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let hw = d.h * d.w;
    let pixels = (d.batch * hw) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, mask) in masks.iter().enumerate().take(d.batch) {
        for k in 0..classes {
            let base = (b * classes + k) * hw;
            for p in 0..hw {
                let target = mask[p] as usize == k + 1;
                let (l, g) = focal_element(logits[base + p], target, alpha, gamma);
                loss += l;
                grad[base + p] = g / pixels;
            }
        }
    }
    (loss / pixels, grad)
}

/// Sigmoid focal cross-entropy over logits laid out `[image][class][y][x]`
/// against label masks; summed over classes, averaged over pixels.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn focal_loss(
    logits: &[f64],
    masks: &[&[u8]],
    hw: (usize, usize),
    classes: usize,
    alpha: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let d = Dims { batch: masks.len(), h: hw.0, w: hw.1 };
    focal_loss_masks(logits, masks, d, classes, alpha, gamma)
}

fn scores_hwc(logits: &[f64], d: Dims, classes: usize) -> Vec<Vec<f64>> {
    let hw = d.h * d.w;
    (0..d.batch)
        .map(|b| {
            let mut out = vec![0.0; hw * classes];
            for k in 0..classes {
                for p in 0..hw {
                    out[p * classes + k] = sigmoid(logits[(b * classes + k) * hw + p]);
                }
            }
            out
        })
        .collect()
}

fn predict_masks(logits: &[f64], d: Dims, classes: usize) -> Vec<Vec<u8>> {
    let hw = d.h * d.w;
    (0..d.batch)
        .map(|b| {
            (0..hw)
                .map(|p| {
                    let (best, score) = (0..classes)
                        .map(|k| (k, logits[(b * classes + k) * hw + p]))
                        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                    if score >= 0.0 {
                        (best + 1) as u8
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect()
}

impl Model for SegNet {
    type Sample = SynthImage;

    fn init_params(&self, seed: u64) -> ParameterSet {
        Self::build_params(&self.spec, seed)
    }

    fn loss_grad(
        &self,
        trainable: &[f64],
        buffers: &mut [f64],
        batch: &[&SynthImage],
        cfg: &TrainConfig,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_flat(trainable, buffers)?;
        self.check_images(batch)?;
        if batch.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let trace = self.forward(trainable, buffers, batch, true);
        let (loss, dlogits) = focal_loss_masks(
            &trace.logits,
            &masks(batch),
            trace.dims,
            self.spec.num_classes,
            cfg.focal_alpha,
            cfg.focal_gamma,
        );
        Ok((loss, self.backward(trainable, &trace, &dlogits)))
    }

    fn evaluate(&self, params: &ParameterSet, samples: &[SynthImage], cfg: &TrainConfig) -> Result<Evaluation> {
        params.check_structure(&self.template)?;
        let theta = params.trainable().to_flat_f64();
        let mut buffers = params.buffers().to_flat_f64();
        let refs: Vec<&SynthImage> = samples.iter().collect();
        self.check_images(&refs)?;
        let mut preds = Vec::with_capacity(samples.len());
        let mut loss = 0.0;
        for chunk in refs.chunks(16) {
            let trace = self.forward(&theta, &mut buffers, chunk, false);
            let (l, _) = focal_loss_masks(
                &trace.logits,
                &masks(chunk),
                trace.dims,
                self.spec.num_classes,
                cfg.focal_alpha,
                cfg.focal_gamma,
            );
            loss += l * chunk.len() as f64;
            preds.extend(predict_masks(&trace.logits, trace.dims, self.spec.num_classes));
        }
        let truth: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
        let report =
            if samples.is_empty() { None } else { Some(metrics::evaluate(&preds, &truth, self.spec.num_classes + 1)?) };
        Ok(Evaluation { loss: loss / samples.len().max(1) as f64, samples: samples.len(), report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::local_objective;

    fn image(h: usize, w: usize, seed: u64, classes: usize) -> SynthImage {
        let mut r = rng(seed);
        let mask: Vec<u8> = (0..h * w).map(|_| r.random_range(0..=classes as u8)).collect();
        let intensity = mask.iter().map(|&m| m as f32 * 0.3 + r.random_range(-0.2f32..0.2)).collect();
        SynthImage { height: h, width: w, intensity, mask }
    }

    fn spec(norm: Normalization) -> ModelSpec {
        ModelSpec {
            input_shape: [4, 4, 1],
            num_classes: 3,
            channel_widths: vec![4, 4],
            normalization: norm,
            group_count: 2,
        }
    }

    fn check_gradient(norm: Normalization, batch: usize, prox_mu: f64) {
        let net = SegNet::new(spec(norm)).unwrap();
        let params = net.init_params(5);
        let mut theta = params.trainable().to_flat_f64();
        // Nonzero biases and affine terms so no parameter sits at a symmetric point.
        let mut r = rng(99);
        for v in theta.iter_mut() {
            *v += r.random_range(-0.1..0.1);
        }
        let buffers = params.buffers().to_flat_f64();
        let images: Vec<SynthImage> = (0..batch).map(|i| image(4, 4, 40 + i as u64, 3)).collect();
        let refs: Vec<&SynthImage> = images.iter().collect();
        let cfg = TrainConfig { prox_mu, ..TrainConfig::default() };
        let reference: Vec<f64> = theta.iter().map(|v| v * 0.5).collect();

        let objective = |t: &[f64]| {
            let mut b = buffers.clone();
            local_objective(&net, t, &mut b, &refs, &cfg, Some(&reference)).unwrap()
        };
        let (_, grad) = objective(&theta);
        let step = 1e-4;
        for i in 0..theta.len() {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[i] += step;
            lo[i] -= step;
            let fd = (objective(&hi).0 - objective(&lo).0) / (2.0 * step);
            let err = (fd - grad[i]).abs();
            assert!(
                err <= 1e-3 * fd.abs().max(grad[i].abs()) + 1e-8,
                "{norm:?} param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradient_check_group_stats() {
        check_gradient(Normalization::GroupStats, 2, 0.0);
    }

    #[test]
    fn gradient_check_batch_stats() {
        check_gradient(Normalization::BatchStats, 2, 0.0);
    }

    #[test]
    fn gradient_check_no_norm() {
        check_gradient(Normalization::None, 1, 0.0);
    }

    #[test]
    fn gradient_check_with_proximal_term() {
        check_gradient(Normalization::GroupStats, 1, 0.7);
    }

    #[test]
    fn buffer_entries_depend_on_normalization() {
        let gn = SegNet::new(spec(Normalization::GroupStats)).unwrap().init_params(0);
        assert!(!gn.has_buffers());
        let bn = SegNet::new(spec(Normalization::BatchStats)).unwrap().init_params(0);
        assert_eq!(bn.buffers().len(), 2 * 2);
        assert!(bn.buffers().names().all(|n| n.ends_with("running_mean") || n.ends_with("running_var")));
    }

    #[test]
    fn group_count_must_divide_widths() {
        let mut s = spec(Normalization::GroupStats);
        s.group_count = 3;
        assert!(matches!(SegNet::new(s), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn zero_logits_half_alpha_no_focus() {
        // Scalar oracle: -0.5 * ln(0.5) per element, one class.
        let masks: Vec<&[u8]> = vec![&[1, 0, 1, 0]];
        let (loss, _) = focal_loss(&[0.0; 4], &masks, (2, 2), 1, 0.5, 0.0);
        assert!((loss - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let masks: Vec<&[u8]> = vec![&[1, 2, 0, 2]];
        let mut logits = vec![-60.0; 8];
        logits[0] = 60.0; // class 1, pixel 0
        logits[4 + 1] = 60.0; // class 2, pixel 1
        logits[4 + 3] = 60.0; // class 2, pixel 3
        let (loss, _) = focal_loss(&logits, &masks, (2, 2), 2, 0.25, 2.0);
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn focal_gradient_matches_finite_difference() {
        for &(s, t, a, g) in &[(0.3, true, 0.25, 2.0), (-1.2, false, 0.25, 2.0), (2.0, false, 0.6, 0.5)] {
            let (_, d) = focal_element(s, t, a, g);
            let fd = (focal_element(s + 1e-6, t, a, g).0 - focal_element(s - 1e-6, t, a, g).0) / 2e-6;
            assert!((d - fd).abs() < 1e-7, "{d} vs {fd}");
        }
    }

    #[test]
    fn forward_loss_shapes_and_errors() {
        let net = SegNet::new(spec(Normalization::BatchStats)).unwrap();
        let params = net.init_params(1);
        let im = image(4, 4, 3, 3);
        let (loss, scores) = net.forward_loss(&params, &[&im], &TrainConfig::default()).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].len(), 4 * 4 * 3);
        let wrong = image(5, 4, 3, 3);
        assert!(matches!(
            net.forward_loss(&params, &[&wrong], &TrainConfig::default()),
            Err(ModelError::ShapeMismatch(_))
        ));
        let other = SegNet::new(spec(Normalization::GroupStats)).unwrap().init_params(1);
        assert!(net.forward_loss(&other, &[&im], &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_moves_running_statistics() {
        let net = SegNet::new(spec(Normalization::BatchStats)).unwrap();
        let params = net.init_params(1);
        let theta = params.trainable().to_flat_f64();
        let mut buffers = params.buffers().to_flat_f64();
        let before = buffers.clone();
        let im = image(4, 4, 3, 3);
        net.loss_grad(&theta, &mut buffers, &[&im], &TrainConfig::default()).unwrap();
        assert_ne!(before, buffers);
    }
}
