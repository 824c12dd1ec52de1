//! Inference-time analyses of a trained pair of networks: p sweeps, Q
//! calibration, pruned-action rollouts and policy-shift lower bounds.
//!
//! Sample `i` of every probe draws from a stream keyed by `i` alone, so
//! cells that differ only in the policy share random numbers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Actor;
use crate::env::State;
use crate::metrics::{mean_stat, pairwise_mean_similarity, spearman, ModeTracker};
use crate::par::{self, Execution};
use crate::policy::{self, MixVariant};
use crate::{Error, Result, SCHEMA_VERSION};

const STREAM_SWEEP: u64 = 10;
const STREAM_CALIBRATION: u64 = 11;
const STREAM_PRUNED: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: String,
    pub temperature: Option<f64>,
    pub p: f64,
    pub samples: usize,
    pub mean_reward: f64,
    pub reward_stderr: f64,
    /// Mean pairwise edit similarity of the top-k samples by reward.
    pub mean_similarity: f64,
    pub modes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepSettings {
    pub samples: usize,
    pub top_k: usize,
    pub mode_reward_threshold: f64,
    pub seed: u64,
}

/// Samples every `(variant, p)` cell with `epsilon = 0`.
pub fn inference_sweep(
    actor: &Actor<'_>,
    cells: &[(MixVariant, f64)],
    settings: SweepSettings,
    exec: Execution,
) -> Result<Vec<SweepCell>> {
    let env = actor.env;
    cells
        .iter()
        .map(|&(variant, p)| {
            let a = actor.with(variant, p);
            let trajs = super::sample_batch(&a, settings.samples, 0.0, settings.seed, &[STREAM_SWEEP], exec)?;
            let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
            let objects: Vec<(Vec<u8>, f64)> =
                trajs.iter().map(|t| (env.object_symbols(t.terminal()), t.reward)).collect();
            let mut modes = ModeTracker::new(settings.mode_reward_threshold, env.mode_edit_threshold());
            modes.update_modes(objects.iter().map(|(o, r)| (o.as_slice(), *r)));
            let stat = mean_stat(&rewards);
            let mean_similarity = pairwise_mean_similarity(&objects, settings.top_k, env.symbol_len())?;
            let temperature = match variant {
                MixVariant::SoftQ { temperature } | MixVariant::SoftQMixed { temperature } => Some(temperature),
                _ => None,
            };
            Ok(SweepCell {
                variant: variant.name().to_string(),
                temperature,
                p,
                samples: settings.samples,
                mean_reward: stat.mean,
                reward_stderr: stat.stderr,
                mean_similarity,
                modes: modes.count(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub trajectory: usize,
    pub depth: usize,
    pub state: String,
    pub action: usize,
    pub q_pred: f64,
    pub q_hat: f64,
    pub stderr: f64,
}

impl CalibrationRecord {
    /// `q_pred <= q_hat + 3 stderr`.
    pub fn is_lower_bound(&self) -> bool {
        self.q_pred <= self.q_hat + 3.0 * self.stderr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub variant: String,
    pub p_train: f64,
    pub p_rollout: f64,
    pub records: Vec<CalibrationRecord>,
    /// `None` when either column is constant.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationSettings {
    pub trajectories: usize,
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self { trajectories: 64, rollouts: 512, seed: 0 }
    }
}

/// Compares `Q(s, a)` with Monte-Carlo returns. Each probed state comes from
/// a trajectory sampled under `actor`; one action is drawn at that state and
/// the return is estimated from rollouts under `actor` at `p_rollout`, which
/// also picks the action. `epsilon` is 0 throughout.
pub fn probe_q_calibration(
    actor: &Actor<'_>,
    p_rollout: f64,
    settings: CalibrationSettings,
    exec: Execution,
) -> Result<CalibrationReport> {
    if settings.rollouts == 0 {
        return Err(Error::Config("calibration needs at least one rollout per state".into()));
    }
    let env = actor.env;
    let rollout_actor = actor.with(actor.variant, p_rollout);
    let records = par::try_map_indexed(exec, settings.trajectories, |i| {
        let mut rng = par::stream_rng(settings.seed, &[STREAM_CALIBRATION, i as u64]);
        let traj = actor.sample_trajectory(&mut rng, 0.0)?;
        let t = rng.gen_range(0..traj.len());
        let s = &traj.states[t];
        let d = rollout_actor.decide(s)?;
        let a = policy::sample_action(&d.behavior.probs, &d.valid, &mut rng, 0.0)?;
        let q_pred = actor.scorer.q_values(s, &d.valid)?[a.0];
        let child = env.apply(s, a)?;
        let returns = (0..settings.rollouts)
            .map(|_| rollout_actor.rollout_reward(&child, &mut rng, 0.0))
            .collect::<Result<Vec<f64>>>()?;
        let stat = mean_stat(&returns);
        Ok::<_, Error>(CalibrationRecord {
            trajectory: i,
            depth: t,
            state: env.label(s),
            action: a.0,
            q_pred,
            q_hat: stat.mean,
            stderr: stat.stderr,
        })
    })?;
    let (pred, hat): (Vec<f64>, Vec<f64>) = records.iter().map(|r| (r.q_pred, r.q_hat)).unzip();
    Ok(CalibrationReport {
        schema_version: SCHEMA_VERSION,
        variant: actor.variant.name().to_string(),
        p_train: actor.p,
        p_rollout,
        spearman: spearman(&pred, &hat).ok(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangedPRow {
    pub p_prime: f64,
    pub spearman: Option<f64>,
    /// Fraction of probes with `q_pred <= q_hat + 3 stderr`.
    pub lower_bound_rate: f64,
    pub probes: usize,
}

/// Calibration against returns of the same mixing rule at other `p` values.
pub fn probe_changed_p(
    actor: &Actor<'_>,
    p_grid: &[f64],
    settings: CalibrationSettings,
    exec: Execution,
) -> Result<Vec<ChangedPRow>> {
    p_grid
        .iter()
        .map(|&p_prime| {
            let rep = probe_q_calibration(actor, p_prime, settings, exec)?;
            let n = rep.records.len();
            let hits = rep.records.iter().filter(|r| r.is_lower_bound()).count();
            Ok(ChangedPRow {
                p_prime,
                spearman: rep.spearman,
                lower_bound_rate: if n == 0 { f64::NAN } else { hits as f64 / n as f64 },
                probes: n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Sample from the behavior policy.
    Normal,
    /// After `t` steps, take the most `P_F`-probable pruned action.
    BestPruned,
    /// After `t` steps, take the most `P_F`-probable action.
    BestActions,
    PurePf,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Normal, Regime::BestPruned, Regime::BestActions, Regime::PurePf];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Normal => "normal",
            Regime::BestPruned => "best_pruned",
            Regime::BestActions => "best_actions",
            Regime::PurePf => "pure_pf",
        }
    }
}

fn argmax_where(values: &[f64], keep: impl Fn(usize) -> bool) -> Option<usize> {
    (0..values.len()).filter(|&i| keep(i)).fold(None, |best, i| match best {
        Some(b) if values[b] >= values[i] => Some(b),
        _ => Some(i),
    })
}

/// Default switch-step range `[2, N - 2]` for horizon `N`.
pub fn default_switch_range(horizon: usize) -> (usize, usize) {
    (2.min(horizon), horizon.saturating_sub(2).max(2.min(horizon)))
}

/// Terminal rewards of `samples` rollouts under `regime`. Pruning follows
/// the actor's variant (normally p-of-max); the switch step is drawn from
/// `switch_range` inclusive.
pub fn probe_pruned_actions(
    actor: &Actor<'_>,
    regime: Regime,
    samples: usize,
    switch_range: (usize, usize),
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    let (lo, hi) = switch_range;
    if lo > hi {
        return Err(Error::Config(format!("empty switch range [{lo}, {hi}]")));
    }
    let env = actor.env;
    let pure = actor.with(MixVariant::PurePf, 0.0);
    par::try_map_indexed(exec, samples, |i| {
        let mut rng = par::stream_rng(seed, &[STREAM_PRUNED, i as u64]);
        let switch = rng.gen_range(lo..=hi);
        let mut s: State = env.initial_state();
        let mut depth = 0;
        while !s.is_terminal() {
            let a = match regime {
                Regime::PurePf => {
                    let d = pure.decide(&s)?;
                    policy::sample_action(&d.behavior.probs, &d.valid, &mut rng, 0.0)?
                }
                Regime::Normal => {
                    let d = actor.decide(&s)?;
                    policy::sample_action(&d.behavior.probs, &d.valid, &mut rng, 0.0)?
                }
                Regime::BestPruned | Regime::BestActions if depth >= switch => {
                    let d = actor.decide(&s)?;
                    let pruned = |j: usize| d.valid[j] && !d.behavior.kept[j];
                    let pick = if regime == Regime::BestPruned { argmax_where(&d.pf, pruned) } else { None };
                    let pick = pick.or_else(|| argmax_where(&d.pf, |j| d.valid[j])).ok_or(Error::EmptyActionSet)?;
                    crate::env::ActionId(pick)
                }
                Regime::BestPruned | Regime::BestActions => {
                    let d = actor.decide(&s)?;
                    policy::sample_action(&d.behavior.probs, &d.valid, &mut rng, 0.0)?
                }
            };
            s = env.apply(&s, a)?;
            depth += 1;
        }
        Ok::<_, Error>(env.reward(&s)?.value)
    })
}
