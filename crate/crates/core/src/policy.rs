//! Behavior distributions built from a forward policy and action values.
//!
//! Every variant first clips valid Q-values at [`MaskGuard::q_clip_min`] and
//! never prunes the Q-argmax (lowest index on ties).

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ActionId;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixVariant {
    #[default]
    PurePf,
    /// `(1 - p) P_F + p onehot(argmax Q)`.
    PGreedy,
    /// Prune the `floor(p A)` lowest-Q actions, renormalize `P_F`.
    PQuantile,
    /// Prune actions with `Q < p max Q`, renormalize `P_F`.
    POfMax,
    /// Prune actions with `Q < p`, renormalize `P_F`.
    PThresh,
    SoftQ { temperature: f64 },
    /// Even mixture of `P_F` and `softmax(Q / T)`.
    SoftQMixed { temperature: f64 },
    /// `P_F` for the first `round(N p)` steps, then greedy in `Q`.
    GfnThenQ,
    GreedyQ,
}

impl MixVariant {
    pub fn name(&self) -> &'static str {
        match self {
            MixVariant::PurePf => "pure_pf",
            MixVariant::PGreedy => "p_greedy",
            MixVariant::PQuantile => "p_quantile",
            MixVariant::POfMax => "p_of_max",
            MixVariant::PThresh => "p_thresh",
            MixVariant::SoftQ { .. } => "soft_q",
            MixVariant::SoftQMixed { .. } => "soft_q_mixed",
            MixVariant::GfnThenQ => "gfn_then_q",
            MixVariant::GreedyQ => "greedy_q",
        }
    }

    /// Parses a variant name. Soft-Q variants start at temperature 1.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "pure_pf" => MixVariant::PurePf,
            "p_greedy" => MixVariant::PGreedy,
            "p_quantile" => MixVariant::PQuantile,
            "p_of_max" => MixVariant::POfMax,
            "p_thresh" => MixVariant::PThresh,
            "soft_q" => MixVariant::SoftQ { temperature: 1.0 },
            "soft_q_mixed" => MixVariant::SoftQMixed { temperature: 1.0 },
            "gfn_then_q" => MixVariant::GfnThenQ,
            "greedy_q" => MixVariant::GreedyQ,
            other => return Err(Error::Config(format!("unknown mixing variant `{other}`"))),
        })
    }

    /// Whether `p` changes the distribution.
    pub fn uses_p(&self) -> bool {
        matches!(
            self,
            MixVariant::PGreedy | MixVariant::PQuantile | MixVariant::POfMax | MixVariant::PThresh | MixVariant::GfnThenQ
        )
    }

    /// Applies one grid value of a sweep: `p` for the p-variants, the
    /// temperature for the soft-Q variants.
    pub fn at_grid_value(self, v: f64) -> (Self, f64) {
        match self {
            MixVariant::SoftQ { .. } => (MixVariant::SoftQ { temperature: v }, 0.0),
            MixVariant::SoftQMixed { .. } => (MixVariant::SoftQMixed { temperature: v }, 0.0),
            other => (other, v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MixVariant::SoftQ { temperature } | MixVariant::SoftQMixed { temperature }
                if !(temperature > 0.0 && temperature.is_finite()) =>
            {
                Err(Error::Config(format!("soft-Q temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGuard {
    pub q_clip_min: f64,
    pub pofmax_activation_threshold: f64,
}

impl Default for MaskGuard {
    fn default() -> Self {
        Self { q_clip_min: 0.0, pofmax_activation_threshold: 1e-5 }
    }
}

/// Position of the current state within a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MixContext {
    pub depth: usize,
    /// Maximum trajectory length of the environment.
    pub horizon: usize,
}

/// `probs` is the behavior distribution; `kept` marks valid actions that
/// survived pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct Behavior {
    pub probs: Vec<f64>,
    pub kept: Vec<bool>,
}

impl Behavior {
    pub fn pruned(&self, valid_mask: &[bool]) -> Vec<usize> {
        (0..valid_mask.len()).filter(|&i| valid_mask[i] && !self.kept[i]).collect()
    }
}

const SUM_TOLERANCE: f64 = 1e-9;

fn check_inputs(pf: &[f64], q: &[f64], valid: &[bool]) -> Result<()> {
    if pf.len() != valid.len() || q.len() != valid.len() {
        return Err(Error::Shape(format!(
            "pf ({}), q ({}) and mask ({}) lengths differ",
            pf.len(),
            q.len(),
            valid.len()
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptyActionSet);
    }
    let mut sum = 0.0;
    for i in 0..valid.len() {
        if valid[i] {
            if !q[i].is_finite() {
                return Err(Error::NonFinite(format!("Q-value of valid action {i} is {}", q[i])));
            }
            if !(pf[i] >= 0.0) {
                return Err(Error::InvalidPolicy(format!("P_F({i}) = {}", pf[i])));
            }
            sum += pf[i];
        } else if pf[i] != 0.0 {
            return Err(Error::InvalidPolicy(format!("P_F puts {} on invalid action {i}", pf[i])));
        }
    }
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidPolicy(format!("P_F sums to {sum}")));
    }
    Ok(())
}

fn argmax(q: &[f64], valid: &[bool]) -> usize {
    let mut best = usize::MAX;
    for i in 0..q.len() {
        if valid[i] && (best == usize::MAX || q[i] > q[best]) {
            best = i;
        }
    }
    best
}

fn onehot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn softmax_q(q: &[f64], valid: &[bool], temperature: f64) -> Vec<f64> {
    let m = q.iter().zip(valid).filter(|(_, &ok)| ok).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q
        .iter()
        .zip(valid)
        .map(|(&x, &ok)| if ok { ((x - m) / temperature).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn restrict(pf: &[f64], kept: &[bool]) -> Result<Vec<f64>> {
    let mass: f64 = pf.iter().zip(kept).filter(|(_, &k)| k).map(|(&x, _)| x).sum();
    if !(mass > 0.0) {
        return Err(Error::Degenerate("P_F has no mass on the unpruned actions".into()));
    }
    Ok(pf.iter().zip(kept).map(|(&x, &k)| if k { x / mass } else { 0.0 }).collect())
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    v
}

/// Builds the behavior distribution and the set of unpruned actions.
pub fn behavior(
    variant: MixVariant,
    p: f64,
    ctx: MixContext,
    guard: &MaskGuard,
    pf: &[f64],
    q: &[f64],
    valid: &[bool],
) -> Result<Behavior> {
    check_inputs(pf, q, valid)?;
    variant.validate()?;
    if variant.uses_p() && !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p={p} outside [0, 1]")));
    }
    let n = valid.len();
    let q: Vec<f64> = q.iter().zip(valid).map(|(&x, &ok)| if ok { x.max(guard.q_clip_min) } else { 0.0 }).collect();
    let best = argmax(&q, valid);
    let prune_below = |cut: f64| -> Vec<bool> { (0..n).map(|i| valid[i] && (q[i] >= cut || i == best)).collect() };

    let (probs, kept) = match variant {
        MixVariant::PurePf => (pf.to_vec(), valid.to_vec()),
        MixVariant::PGreedy => {
            let mut v: Vec<f64> = pf.iter().map(|x| (1.0 - p) * x).collect();
            v[best] += p;
            (v, valid.to_vec())
        }
        MixVariant::PQuantile => {
            let mut sorted: Vec<f64> = (0..n).filter(|&i| valid[i]).map(|i| q[i]).collect();
            sorted.sort_by(f64::total_cmp);
            let a = sorted.len();
            // The epsilon absorbs p*A landing just below an integer.
            let masked = ((p * a as f64 + 1e-9).floor() as usize).min(a - 1);
            let kept = prune_below(sorted[masked]);
            (restrict(pf, &kept)?, kept)
        }
        MixVariant::POfMax => {
            let cut = p * q[best];
            let kept = if cut > guard.pofmax_activation_threshold { prune_below(cut) } else { valid.to_vec() };
            (restrict(pf, &kept)?, kept)
        }
        MixVariant::PThresh => {
            let kept = prune_below(p);
            (restrict(pf, &kept)?, kept)
        }
        MixVariant::SoftQ { temperature } => (softmax_q(&q, valid, temperature), valid.to_vec()),
        MixVariant::SoftQMixed { temperature } => {
            let s = softmax_q(&q, valid, temperature);
            (pf.iter().zip(s).map(|(a, b)| 0.5 * a + 0.5 * b).collect(), valid.to_vec())
        }
        MixVariant::GfnThenQ => {
            let switch = (ctx.horizon as f64 * p).round() as usize;
            if ctx.depth < switch {
                (pf.to_vec(), valid.to_vec())
            } else {
                (onehot(n, best), valid.to_vec())
            }
        }
        MixVariant::GreedyQ => (onehot(n, best), valid.to_vec()),
    };
    Ok(Behavior { probs: normalize(probs), kept })
}

/// The behavior distribution alone; see [`behavior`].
pub fn mu_distribution(
    variant: MixVariant,
    p: f64,
    ctx: MixContext,
    pf: &[f64],
    q: &[f64],
    valid: &[bool],
) -> Result<Vec<f64>> {
    behavior(variant, p, ctx, &MaskGuard::default(), pf, q, valid).map(|b| b.probs)
}

/// With probability `epsilon` picks uniformly among the valid actions,
/// otherwise draws from `dist`. No exploration draw is made when
/// `epsilon == 0`.
pub fn sample_action<R: Rng + ?Sized>(dist: &[f64], valid: &[bool], rng: &mut R, epsilon: f64) -> Result<ActionId> {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let choices: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        if choices.is_empty() {
            return Err(Error::EmptyActionSet);
        }
        return Ok(ActionId(choices[rng.gen_range(0..choices.len())]));
    }
    let w = WeightedIndex::new(dist).map_err(|e| Error::InvalidPolicy(e.to_string()))?;
    Ok(ActionId(w.sample(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PSchedule {
    Constant {
        final_p: f64,
    },
    /// Half-period cosine ramp from 0 to `final_p` over `total_steps`.
    CosineAnneal {
        final_p: f64,
        #[serde(default = "default_anneal_steps")]
        total_steps: u64,
    },
    /// 0 before `step_count`, `final_p` from then on.
    Stepwise {
        final_p: f64,
        #[serde(default = "default_step_count")]
        step_count: u64,
    },
}

fn default_anneal_steps() -> u64 {
    1500
}

fn default_step_count() -> u64 {
    500
}

impl PSchedule {
    pub fn cosine(final_p: f64) -> Self {
        PSchedule::CosineAnneal { final_p, total_steps: default_anneal_steps() }
    }

    pub fn final_p(&self) -> f64 {
        match *self {
            PSchedule::Constant { final_p }
            | PSchedule::CosineAnneal { final_p, .. }
            | PSchedule::Stepwise { final_p, .. } => final_p,
        }
    }

    /// Constant for p-greedy, cosine annealing for the pruning variants.
    pub fn default_for(variant: MixVariant, final_p: f64) -> Self {
        match variant {
            MixVariant::PQuantile | MixVariant::POfMax => PSchedule::cosine(final_p),
            _ => PSchedule::Constant { final_p },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.final_p();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("final_p={p} outside [0, 1]")));
        }
        if let PSchedule::CosineAnneal { total_steps: 0, .. } = self {
            return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
        }
        Ok(())
    }
}

pub fn schedule_value(sched: &PSchedule, step: u64) -> f64 {
    match *sched {
        PSchedule::Constant { final_p } => final_p,
        PSchedule::CosineAnneal { final_p, total_steps } => {
            if step >= total_steps {
                return final_p;
            }
            let frac = step as f64 / total_steps as f64;
            final_p * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
        }
        PSchedule::Stepwise { final_p, step_count } => {
            if step < step_count {
                0.0
            } else {
                final_p
            }
        }
    }
}

#[cfg(test)]
mod tests;
