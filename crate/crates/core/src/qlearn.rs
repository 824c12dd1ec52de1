//! n-step TD regression of `Q` against an EMA target network.
//!
//! With `gamma = 1` and reward only at terminals, the n-step target for
//! transition `t` of a length-`T` trajectory is the terminal reward when the
//! horizon reaches the end (`t + n >= T`) and otherwise
//! `max_a Q_target(s_{t+n}, a)` over valid actions.

use serde::{Deserialize, Serialize};

use crate::approx::{self, NetSpec, ParamSet};
use crate::env::{EnvSpec, Trajectory};
use crate::gfn::LossOutput;
use crate::par::{self, Execution};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QLossKind {
    #[default]
    Mse,
    /// Huber with unit threshold.
    Huber,
}

/// Value used for `s_{t+n}` when the horizon stops short of the terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// `max_a Q_target(s_{t+n}, a)` over valid actions.
    #[default]
    Max,
    /// `Q_target(s_{t+n}, a_{t+n})` for the action the trajectory took.
    Taken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QConfig {
    /// `None` means the environment's maximum trajectory length.
    pub n_step: Option<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub loss: QLossKind,
    pub bootstrap: Bootstrap,
    /// Regress `R^beta` instead of the raw reward.
    pub beta_scaled_targets: bool,
}

impl Default for QConfig {
    fn default() -> Self {
        Self { n_step: None, gamma: 1.0, tau: 0.95, epsilon: 0.1, loss: QLossKind::Mse, bootstrap: Bootstrap::Max, beta_scaled_targets: false }
    }
}

impl QConfig {
    pub fn horizon(&self, env: &EnvSpec) -> usize {
        self.n_step.unwrap_or_else(|| env.max_trajectory_len())
    }

    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        let n = self.horizon(env);
        if n == 0 || n > env.max_trajectory_len() {
            return Err(Error::Config(format!(
                "n_step={n} must lie in 1..={}",
                env.max_trajectory_len()
            )));
        }
        if self.gamma != 1.0 {
            return Err(Error::Config("only gamma = 1 is supported".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau={} outside [0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon={} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }

    fn terminal_value(&self, traj: &Trajectory) -> f64 {
        if self.beta_scaled_targets {
            traj.log_reward_beta.exp()
        } else {
            traj.reward
        }
    }
}

/// Slowly tracking copy of the online Q parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetParams(pub ParamSet);

/// `max_a Q(s, a)` over the valid actions of a non-terminal state.
pub fn max_q(env: &EnvSpec, net: &NetSpec, params: &ParamSet, s: &crate::env::State) -> Result<f64> {
    let mask = env.valid_mask(s)?;
    let r = approx::forward(net, params, &env.encode(s).0, &mask)?;
    Ok(r
        .q_values
        .iter()
        .zip(&mask)
        .filter(|(_, &ok)| ok)
        .map(|(&q, _)| q)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// One target per transition of `traj`.
pub fn nstep_targets(cfg: &QConfig, env: &EnvSpec, net: &NetSpec, target: &TargetParams, traj: &Trajectory) -> Result<Vec<f64>> {
    let n = cfg.horizon(env);
    let big_t = traj.len();
    let terminal = cfg.terminal_value(traj);
    (0..big_t)
        .map(|t| {
            if t + n >= big_t {
                return Ok(terminal);
            }
            let s = &traj.states[t + n];
            match cfg.bootstrap {
                Bootstrap::Max => max_q(env, net, &target.0, s),
                Bootstrap::Taken => {
                    let out = approx::forward_raw(net, &target.0, &env.encode(s).0);
                    Ok(out.output()[traj.actions[t + n].0])
                }
            }
        })
        .collect()
}

fn pointwise(kind: QLossKind, diff: f64) -> (f64, f64) {
    match kind {
        QLossKind::Mse => (diff * diff, 2.0 * diff),
        QLossKind::Huber => {
            if diff.abs() <= 1.0 {
                (0.5 * diff * diff, diff)
            } else {
                (diff.abs() - 0.5, diff.signum())
            }
        }
    }
}

/// Mean over all transitions in the batch of `loss(Q(s_t, a_t) - target_t)`.
/// Only the taken-action output receives gradient.
pub fn q_loss(
    cfg: &QConfig,
    env: &EnvSpec,
    net: &NetSpec,
    params: &ParamSet,
    target: &TargetParams,
    batch: &[Trajectory],
    exec: Execution,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty trajectory batch".into()));
    }
    let transitions: usize = batch.iter().map(Trajectory::len).sum();
    let scale = 1.0 / transitions as f64;
    let parts = par::try_map_indexed(exec, batch.len(), |i| {
        let traj = &batch[i];
        let targets = nstep_targets(cfg, env, net, target, traj)?;
        let mut grad = vec![0.0; net.param_count()];
        let mut loss = 0.0;
        let mut x = vec![0.0; env.encoding_width()];
        let mut d_out = net.zero_output();
        for ((s, a), g) in traj.states.iter().zip(&traj.actions).zip(targets) {
            env.encode_into(s, &mut x);
            let acts = approx::forward_raw(net, params, &x);
            let (l, dl) = pointwise(cfg.loss, acts.output()[a.0] - g);
            loss += l * scale;
            d_out.iter_mut().for_each(|v| *v = 0.0);
            d_out[a.0] = dl * scale;
            approx::backward_raw(params, &acts, &d_out, &mut grad);
        }
        Ok::<_, Error>((loss, grad))
    })?;
    let mut out = LossOutput { loss: 0.0, grad: vec![0.0; net.param_count()] };
    for (l, g) in parts {
        out.loss += l;
        out.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// `target <- tau * target + (1 - tau) * online`, elementwise.
pub fn ema_update(target: &mut TargetParams, online: &ParamSet, tau: f64) -> Result<()> {
    if target.0.layer_shapes != online.layer_shapes || target.0.len() != online.len() {
        return Err(Error::Shape("target and online Q parameters differ in shape".into()));
    }
    for (t, &o) in target.0.values.iter_mut().zip(&online.values) {
        *t = tau * *t + (1.0 - tau) * o;
    }
    Ok(())
}
