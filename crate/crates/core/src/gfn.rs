//! Trajectory balance and SubTB(1) with a uniform backward policy.
//!
//! Both losses return the batch-mean loss together with its gradient over the
//! full GFN parameter vector (including `log Z`).

use serde::{Deserialize, Serialize};

use crate::approx::{self, log_softmax, NetSpec, ParamSet};
use crate::env::{EnvSpec, Trajectory};
use crate::par::{self, Execution};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Tb,
    #[serde(rename = "subtb1")]
    SubTb1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GfnConfig {
    pub objective: Objective,
    /// Sub-trajectory weighting; only `1.0` (equal weights) is supported.
    pub subtb_lambda: f64,
    /// The backward policy is always uniform over parent edges.
    pub uniform_pb: bool,
}

impl Default for GfnConfig {
    fn default() -> Self {
        Self { objective: Objective::Tb, subtb_lambda: 1.0, uniform_pb: true }
    }
}

impl GfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objective == Objective::SubTb1 && self.subtb_lambda != 1.0 {
            return Err(Error::Config("SubTB(1) requires subtb_lambda = 1".into()));
        }
        if !self.uniform_pb {
            return Err(Error::Config("only a uniform backward policy is supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLogProbs {
    pub total: f64,
    pub per_step: Vec<f64>,
}

impl StepLogProbs {
    fn from_steps(per_step: Vec<f64>) -> Self {
        Self { total: per_step.iter().sum(), per_step }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Forward passes over the non-terminal states of one trajectory.
struct TrajectoryPass {
    passes: Vec<approx::ForwardResult>,
    log_pf: Vec<f64>,
    log_pb: Vec<f64>,
}

fn run_trajectory(env: &EnvSpec, net: &NetSpec, params: &ParamSet, traj: &Trajectory) -> Result<TrajectoryPass> {
    let mut x = vec![0.0; env.encoding_width()];
    let mut passes = Vec::with_capacity(traj.len());
    let mut log_pf = Vec::with_capacity(traj.len());
    for (s, &a) in traj.states.iter().zip(&traj.actions) {
        let mask = env.valid_mask(s)?;
        if !mask.get(a.0).copied().unwrap_or(false) {
            return Err(Error::InvalidAction { action: a.0, state: env.label(s) });
        }
        env.encode_into(s, &mut x);
        let r = approx::forward(net, params, &x, &mask)?;
        log_pf.push(log_softmax(&r.policy_logits)[a.0]);
        passes.push(r);
    }
    Ok(TrajectoryPass { passes, log_pf, log_pb: log_pb_steps(env, traj) })
}

fn log_pb_steps(env: &EnvSpec, traj: &Trajectory) -> Vec<f64> {
    traj.states[1..]
        .iter()
        .map(|s| -(env.parent_edge_count(s) as f64).ln())
        .collect()
}

/// `log P_F(a_t | s_t)` at every step, from masked logits.
pub fn log_pf_trajectory(env: &EnvSpec, net: &NetSpec, params: &ParamSet, traj: &Trajectory) -> Result<StepLogProbs> {
    Ok(StepLogProbs::from_steps(run_trajectory(env, net, params, traj)?.log_pf))
}

/// `log P_B(s_t | s_{t+1})` under the uniform backward policy.
pub fn log_pb_trajectory(env: &EnvSpec, traj: &Trajectory) -> StepLogProbs {
    StepLogProbs::from_steps(log_pb_steps(env, traj))
}

fn check_batch(batch: &[Trajectory]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty trajectory batch".into()));
    }
    Ok(())
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, param_count: usize) -> LossOutput {
    let mut grad = vec![0.0; param_count];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    LossOutput { loss, grad }
}

/// Mean over the batch of
/// `(log Z + sum log P_F - beta log R - sum log P_B)^2`.
pub fn tb_loss(env: &EnvSpec, net: &NetSpec, params: &ParamSet, batch: &[Trajectory], exec: Execution) -> Result<LossOutput> {
    check_batch(batch)?;
    let z_index = net.log_z_index().ok_or_else(|| Error::Shape("TB needs a GFN net".into()))?;
    let log_z = params.values[z_index];
    let scale = 1.0 / batch.len() as f64;
    let parts = par::try_map_indexed(exec, batch.len(), |i| {
        let traj = &batch[i];
        let pass = run_trajectory(env, net, params, traj)?;
        let delta = log_z + pass.log_pf.iter().sum::<f64>() - traj.log_reward_beta - pass.log_pb.iter().sum::<f64>();
        let coef = 2.0 * delta * scale;
        let mut grad = vec![0.0; net.param_count()];
        grad[z_index] = coef;
        let mut d_out = net.zero_output();
        for (r, &a) in pass.passes.iter().zip(&traj.actions) {
            d_out.iter_mut().for_each(|v| *v = 0.0);
            approx::log_prob_grad(&r.policy_logits, a.0, coef, &mut d_out);
            approx::backward_raw(params, &r.cache, &d_out, &mut grad);
        }
        Ok::<_, Error>((delta * delta * scale, grad))
    })?;
    Ok(reduce(parts, net.param_count()))
}

/// Equal-weight mean over every sub-trajectory `(n, m)`, `0 <= n < m <= T`, of
/// `(log F(s_n) + sum log P_F - log F(s_m) - sum log P_B)^2`, then over the
/// batch. Interior flows come from the flow head; the terminal flow is fixed
/// to `beta log R`.
pub fn subtb_loss(env: &EnvSpec, net: &NetSpec, params: &ParamSet, batch: &[Trajectory], exec: Execution) -> Result<LossOutput> {
    check_batch(batch)?;
    let flow_out = net.log_flow_output().ok_or_else(|| Error::Shape("SubTB needs a GFN net".into()))?;
    let scale = 1.0 / batch.len() as f64;
    let parts = par::try_map_indexed(exec, batch.len(), |i| {
        let traj = &batch[i];
        let t_len = traj.len();
        let pass = run_trajectory(env, net, params, traj)?;
        let mut log_f: Vec<f64> = pass.passes.iter().map(|r| r.log_flow.unwrap()).collect();
        log_f.push(traj.log_reward_beta);
        // prefix[k] = sum_{i<k} (log P_F - log P_B)
        let mut prefix = vec![0.0; t_len + 1];
        for k in 0..t_len {
            prefix[k + 1] = prefix[k] + pass.log_pf[k] - pass.log_pb[k];
        }
        let pairs = (t_len * (t_len + 1) / 2) as f64;
        let mut loss = 0.0;
        let mut d_log_f = vec![0.0; t_len + 1];
        let mut d_log_pf = vec![0.0; t_len];
        for n in 0..t_len {
            for m in n + 1..=t_len {
                let delta = log_f[n] + prefix[m] - prefix[n] - log_f[m];
                loss += delta * delta;
                let c = 2.0 * delta * scale / pairs;
                d_log_f[n] += c;
                d_log_f[m] -= c;
                for d in &mut d_log_pf[n..m] {
                    *d += c;
                }
            }
        }
        let mut grad = vec![0.0; net.param_count()];
        let mut d_out = net.zero_output();
        for (k, (r, &a)) in pass.passes.iter().zip(&traj.actions).enumerate() {
            d_out.iter_mut().for_each(|v| *v = 0.0);
            approx::log_prob_grad(&r.policy_logits, a.0, d_log_pf[k], &mut d_out);
            d_out[flow_out] += d_log_f[k];
            approx::backward_raw(params, &r.cache, &d_out, &mut grad);
        }
        Ok::<_, Error>((loss * scale / pairs, grad))
    })?;
    Ok(reduce(parts, net.param_count()))
}

/// Dispatches on the configured objective.
pub fn loss(cfg: &GfnConfig, env: &EnvSpec, net: &NetSpec, params: &ParamSet, batch: &[Trajectory], exec: Execution) -> Result<LossOutput> {
    match cfg.objective {
        Objective::Tb => tb_loss(env, net, params, batch, exec),
        Objective::SubTb1 => subtb_loss(env, net, params, batch, exec),
    }
}

#[cfg(test)]
mod tests;
