//! Feed-forward tanh networks with hand-written backprop.
//!
//! Two network kinds exist and never share weights:
//! - [`NetKind::Gfn`]: outputs `[policy logits (A) | log F(s)]` plus a free
//!   scalar `log Z` stored as the last parameter.
//! - [`NetKind::Q`]: outputs `[Q(s, a) for a in 0..A]`.
//!
//! All layers but the last use `tanh`; the output layer is linear.

mod adam;
pub mod gradcheck;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use adam::{Adam, LearningRates};

/// Sentinel reported for Q-values of invalid actions.
pub const INVALID_Q: f64 = f64::NAN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Gfn,
    Q,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: NetKind,
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub action_count: usize,
}

impl NetSpec {
    pub fn gfn(input_width: usize, hidden: &[usize], action_count: usize) -> Self {
        Self { kind: NetKind::Gfn, input_width, hidden: hidden.to_vec(), action_count }
    }

    pub fn q(input_width: usize, hidden: &[usize], action_count: usize) -> Self {
        Self { kind: NetKind::Q, input_width, hidden: hidden.to_vec(), action_count }
    }

    pub fn output_width(&self) -> usize {
        match self.kind {
            NetKind::Gfn => self.action_count + 1,
            NetKind::Q => self.action_count,
        }
    }

    /// `(fan_in, fan_out)` for every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width];
        widths.extend(&self.hidden);
        widths.push(self.output_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn has_log_z(&self) -> bool {
        self.kind == NetKind::Gfn
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum();
        dense + usize::from(self.has_log_z())
    }

    pub fn log_z_index(&self) -> Option<usize> {
        self.has_log_z().then(|| self.param_count() - 1)
    }

    /// Index of `log F(s)` in the raw output vector (GFN nets only).
    pub fn log_flow_output(&self) -> Option<usize> {
        (self.kind == NetKind::Gfn).then_some(self.action_count)
    }

    /// Zero tensor shaped like the raw output vector, for head gradients.
    pub fn zero_output(&self) -> Vec<f64> {
        vec![0.0; self.output_width()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub layer_shapes: Vec<(usize, usize)>,
}

impl ParamSet {
    pub fn zeros(net: &NetSpec) -> Self {
        Self { values: vec![0.0; net.param_count()], layer_shapes: net.layer_shapes() }
    }

    /// Hidden layers uniform in `±1/sqrt(fan_in)`, zero biases, zero output
    /// layer (so an untrained net is uniform over valid actions), `log Z = 0`.
    pub fn init<R: Rng>(net: &NetSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(net);
        let shapes = net.layer_shapes();
        let last = shapes.len() - 1;
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let n = fan_in * fan_out;
            if l != last {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for w in &mut p.values[offset..offset + n] {
                    *w = rng.gen_range(-bound..bound);
                }
            }
            offset += n + fan_out;
        }
        p
    }

    /// Every parameter, including the output layer, uniform in `±scale`.
    /// Used by gradient checks, where a zero output layer would hide bugs.
    pub fn random<R: Rng>(net: &NetSpec, rng: &mut R, scale: f64) -> Self {
        let mut p = Self::zeros(net);
        for v in &mut p.values {
            *v = rng.gen_range(-scale..scale);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, net: &NetSpec) -> Result<()> {
        if self.values.len() != net.param_count() || self.layer_shapes != net.layer_shapes() {
            return Err(Error::Shape(format!(
                "parameter set with {} values does not fit a net with {}",
                self.values.len(),
                net.param_count()
            )));
        }
        Ok(())
    }

    pub fn log_z(&self, net: &NetSpec) -> Option<f64> {
        net.log_z_index().map(|i| self.values[i])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-layer outputs of one forward pass; `layers[0]` is the input.
#[derive(Debug, Clone)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
    input_support: Vec<usize>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }
}

/// Head views of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `-inf` at invalid actions; empty for Q nets.
    pub policy_logits: Vec<f64>,
    pub log_flow: Option<f64>,
    /// [`INVALID_Q`] at invalid actions; empty for GFN nets.
    pub q_values: Vec<f64>,
    pub cache: Activations,
}

impl ForwardResult {
    /// Masked softmax of the policy logits.
    pub fn policy_probs(&self) -> Vec<f64> {
        log_softmax(&self.policy_logits).into_iter().map(f64::exp).collect()
    }
}

/// Log-softmax treating `-inf` entries as masked out.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return logits.to_vec();
    }
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Raw forward pass without head masking.
pub fn forward_raw(net: &NetSpec, params: &ParamSet, x: &[f64]) -> Activations {
    let w = &params.values;
    let shapes = &params.layer_shapes;
    let last = shapes.len() - 1;
    let input_support: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
    let mut layers = Vec::with_capacity(shapes.len() + 1);
    layers.push(x.to_vec());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let a = &layers[l];
        let bias = offset + fan_in * fan_out;
        let mut out = w[bias..bias + fan_out].to_vec();
        if l == 0 {
            for (o, y) in out.iter_mut().enumerate() {
                let row = &w[offset + o * fan_in..offset + (o + 1) * fan_in];
                *y += input_support.iter().map(|&i| row[i] * a[i]).sum::<f64>();
            }
        } else {
            for (o, y) in out.iter_mut().enumerate() {
                let row = &w[offset + o * fan_in..offset + (o + 1) * fan_in];
                *y += row.iter().zip(a).map(|(r, v)| r * v).sum::<f64>();
            }
        }
        if l != last {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        layers.push(out);
        offset = bias + fan_out;
    }
    debug_assert_eq!(layers.last().unwrap().len(), net.output_width());
    Activations { layers, input_support }
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
/// Does not touch the `log Z` slot.
pub fn backward_raw(params: &ParamSet, acts: &Activations, d_out: &[f64], grad: &mut [f64]) {
    let w = &params.values;
    let shapes = &params.layer_shapes;
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(i, o) in shapes {
        offsets.push(offset);
        offset += i * o + o;
    }
    let mut delta = d_out.to_vec();
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        let off = offsets[l];
        let a = &acts.layers[l];
        let bias = off + fan_in * fan_out;
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            grad[bias + o] += d;
            let g = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
            if l == 0 {
                for &i in &acts.input_support {
                    g[i] += d * a[i];
                }
            } else {
                for (gi, ai) in g.iter_mut().zip(a) {
                    *gi += d * ai;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; fan_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[off + o * fan_in..off + (o + 1) * fan_in];
            for (p, r) in prev.iter_mut().zip(row) {
                *p += r * d;
            }
        }
        for (p, ai) in prev.iter_mut().zip(a) {
            *p *= 1.0 - ai * ai;
        }
        delta = prev;
    }
}

/// Forward pass with heads split out and invalid actions masked.
pub fn forward(net: &NetSpec, params: &ParamSet, x: &[f64], valid_mask: &[bool]) -> Result<ForwardResult> {
    if x.len() != net.input_width {
        return Err(Error::Shape(format!("input width {} != {}", x.len(), net.input_width)));
    }
    if valid_mask.len() != net.action_count {
        return Err(Error::Shape(format!(
            "mask length {} != action count {}",
            valid_mask.len(),
            net.action_count
        )));
    }
    params.check(net)?;
    let cache = forward_raw(net, params, x);
    Ok(split_heads(net, cache, valid_mask))
}

pub(crate) fn split_heads(net: &NetSpec, cache: Activations, valid_mask: &[bool]) -> ForwardResult {
    let out = cache.output();
    let a = net.action_count;
    let masked = |v: &[f64], sentinel: f64| -> Vec<f64> {
        v.iter().zip(valid_mask).map(|(&x, &ok)| if ok { x } else { sentinel }).collect()
    };
    match net.kind {
        NetKind::Gfn => ForwardResult {
            policy_logits: masked(&out[..a], f64::NEG_INFINITY),
            log_flow: Some(out[a]),
            q_values: Vec::new(),
            cache,
        },
        NetKind::Q => ForwardResult {
            policy_logits: Vec::new(),
            log_flow: None,
            q_values: masked(&out[..a], INVALID_Q),
            cache,
        },
    }
}

/// One training example for [`backward`]: an input and `d loss / d output`.
#[derive(Debug, Clone)]
pub struct HeadGradient {
    pub input: Vec<f64>,
    pub output_grad: Vec<f64>,
}

/// Gradient of `sum_i <output_grad_i, net(input_i)> + log_z_grad * log Z`.
pub fn backward(net: &NetSpec, params: &ParamSet, batch: &[HeadGradient], log_z_grad: f64) -> Result<Vec<f64>> {
    params.check(net)?;
    let mut grad = vec![0.0; net.param_count()];
    for item in batch {
        if item.input.len() != net.input_width || item.output_grad.len() != net.output_width() {
            return Err(Error::Shape("head gradient does not match the net".into()));
        }
        let acts = forward_raw(net, params, &item.input);
        backward_raw(params, &acts, &item.output_grad, &mut grad);
    }
    if let Some(i) = net.log_z_index() {
        grad[i] += log_z_grad;
    }
    Ok(grad)
}

/// Gradient of `-log softmax(logits)[taken]` style terms: returns
/// `d/d logits (weight * log p[taken])` for masked logits.
pub(crate) fn log_prob_grad(logits: &[f64], taken: usize, weight: f64, out: &mut [f64]) {
    let logp = log_softmax(logits);
    for (i, o) in out.iter_mut().enumerate().take(logits.len()) {
        if logits[i] == f64::NEG_INFINITY {
            continue;
        }
        let indicator = if i == taken { 1.0 } else { 0.0 };
        *o += weight * (indicator - logp[i].exp());
    }
}
