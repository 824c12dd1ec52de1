//! Joint training loop: sample a minibatch from the behavior policy, take a
//! GFlowNet step and an n-step Q step on that same minibatch, move the target
//! network, log one record.
//!
//! Randomness is drawn from per-trajectory streams keyed by the seed and the
//! iteration number, so the run state needs no RNG of its own and a resumed
//! run replays exactly.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::approx::{self, Adam, LearningRates, NetSpec, ParamSet};
use crate::env::{ActionId, EnvSpec, OracleGraph, State, Trajectory};
use crate::gfn::{self, GfnConfig};
use crate::metrics::{MetricRecord, ModeTracker, RunMetrics};
use crate::oracle::PolicyTable;
use crate::par::{self, Execution};
use crate::policy::{self, schedule_value, Behavior, MaskGuard, MixContext, MixVariant, PSchedule};
use crate::qlearn::{self, QConfig, TargetParams};
use crate::{Error, Result, SCHEMA_VERSION};

mod probes;
pub use probes::*;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gfn_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { gfn_hidden: vec![64, 64], q_hidden: vec![64, 64] }
    }
}

impl ModelConfig {
    pub fn nets(&self, env: &EnvSpec) -> (NetSpec, NetSpec) {
        (
            NetSpec::gfn(env.encoding_width(), &self.gfn_hidden, env.action_count()),
            NetSpec::q(env.encoding_width(), &self.q_hidden, env.action_count()),
        )
    }
}

/// Shape of the `p` schedule; the final value is [`TrainConfig::p`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Cosine annealing for p-quantile and p-of-max, constant otherwise.
    #[default]
    Auto,
    Constant,
    CosineAnneal {
        #[serde(default = "default_anneal_steps")]
        total_steps: u64,
    },
    Stepwise {
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

/// Multiplier applied to every learning rate as training progresses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp from 1 at step 0 to `final_fraction` at the last iteration.
    Linear { final_fraction: f64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64, iterations: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear { final_fraction } => {
                let span = iterations.saturating_sub(1).max(1) as f64;
                let frac = (step as f64 / span).min(1.0);
                1.0 - (1.0 - final_fraction) * frac
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Adam step size for the GFlowNet weights.
    pub lr: f64,
    pub lr_q: f64,
    pub lr_log_z: f64,
    pub lr_schedule: LrSchedule,
    pub variant: MixVariant,
    /// Final value of the mixing parameter.
    pub p: f64,
    pub p_schedule: ScheduleKind,
    pub gfn: GfnConfig,
    pub q: QConfig,
    pub guard: MaskGuard,
    pub gfn_updates_per_iter: u32,
    pub q_updates_per_iter: u32,
    pub seed: u64,
    pub workers: usize,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub record_wall_time: bool,
    /// Defaults to the environment's mode threshold.
    pub mode_reward_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            lr: 1e-4,
            lr_q: 1e-4,
            lr_log_z: 1e-2,
            lr_schedule: LrSchedule::Constant,
            variant: MixVariant::PurePf,
            p: 0.0,
            p_schedule: ScheduleKind::Auto,
            gfn: GfnConfig::default(),
            q: QConfig::default(),
            guard: MaskGuard::default(),
            gfn_updates_per_iter: 1,
            q_updates_per_iter: 1,
            seed: 0,
            workers: 1,
            checkpoint_every: 0,
            record_wall_time: false,
            mode_reward_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> PSchedule {
        let final_p = self.p;
        match self.p_schedule {
            ScheduleKind::Auto => PSchedule::default_for(self.variant, final_p),
            ScheduleKind::Constant => PSchedule::Constant { final_p },
            ScheduleKind::CosineAnneal { total_steps } => PSchedule::CosineAnneal { final_p, total_steps },
            ScheduleKind::Stepwise { step_count } => PSchedule::Stepwise { final_p, step_count },
        }
    }

    pub fn execution(&self) -> Execution {
        Execution::from_workers(self.workers)
    }

    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        for (name, lr) in [("lr", self.lr), ("lr_q", self.lr_q), ("lr_log_z", self.lr_log_z)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name}={lr} must be a finite non-negative number")));
            }
        }
        if let LrSchedule::Linear { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::Config(format!("lr final_fraction={final_fraction} outside [0, 1]")));
            }
        }
        self.variant.validate()?;
        self.schedule().validate()?;
        self.gfn.validate()?;
        self.q.validate(env)?;
        Ok(())
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed iterations.
    pub step: u64,
    pub gfn: ParamSet,
    pub gfn_opt: Adam,
    pub q: ParamSet,
    pub q_opt: Adam,
    pub target: TargetParams,
    pub modes: ModeTracker,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: RunState,
}

/// Source of forward-policy probabilities and action values for a state.
pub trait Scorer: Sync {
    /// `P_F(. | s)`, zero on invalid actions.
    fn forward_probs(&self, s: &State, valid: &[bool]) -> Result<Vec<f64>>;
    /// `Q(s, .)`; entries for invalid actions are ignored.
    fn q_values(&self, s: &State, valid: &[bool]) -> Result<Vec<f64>>;
}

/// Scores states with a GFlowNet and a Q network.
#[derive(Debug, Clone, Copy)]
pub struct NetScorer<'a> {
    pub env: &'a EnvSpec,
    pub gfn_net: &'a NetSpec,
    pub gfn: &'a ParamSet,
    pub q_net: &'a NetSpec,
    pub q: &'a ParamSet,
}

impl Scorer for NetScorer<'_> {
    fn forward_probs(&self, s: &State, valid: &[bool]) -> Result<Vec<f64>> {
        Ok(approx::forward(self.gfn_net, self.gfn, &self.env.encode(s).0, valid)?.policy_probs())
    }

    fn q_values(&self, s: &State, valid: &[bool]) -> Result<Vec<f64>> {
        Ok(approx::forward(self.q_net, self.q, &self.env.encode(s).0, valid)?.q_values)
    }
}

/// Scores states from enumerated tables, e.g. oracle flows and exact `Q`.
#[derive(Debug, Clone, Copy)]
pub struct TableScorer<'a> {
    pub graph: &'a OracleGraph,
    pub policy: &'a PolicyTable,
    pub q: &'a [Vec<f64>],
}

impl TableScorer<'_> {
    fn row(&self, s: &State) -> Result<usize> {
        self.graph.id(s).ok_or_else(|| Error::InvalidState(format!("state {s:?} is not in the table")))
    }
}

impl Scorer for TableScorer<'_> {
    fn forward_probs(&self, s: &State, _valid: &[bool]) -> Result<Vec<f64>> {
        Ok(self.policy[self.row(s)?].clone())
    }

    fn q_values(&self, s: &State, _valid: &[bool]) -> Result<Vec<f64>> {
        Ok(self.q[self.row(s)?].clone())
    }
}

/// A behavior policy: a scorer plus a mixing rule.
#[derive(Clone, Copy)]
pub struct Actor<'a> {
    pub env: &'a EnvSpec,
    pub scorer: &'a dyn Scorer,
    pub variant: MixVariant,
    pub p: f64,
    pub guard: MaskGuard,
}

/// What the actor sees in one state.
#[derive(Debug, Clone)]
pub struct Decision {
    pub valid: Vec<bool>,
    pub pf: Vec<f64>,
    pub behavior: Behavior,
}

fn uniform_over(valid: &[bool]) -> Vec<f64> {
    let k = valid.iter().filter(|&&v| v).count() as f64;
    valid.iter().map(|&v| if v { 1.0 / k } else { 0.0 }).collect()
}

impl<'a> Actor<'a> {
    pub fn with(&self, variant: MixVariant, p: f64) -> Actor<'a> {
        Actor { variant, p, ..*self }
    }

    pub fn decide(&self, s: &State) -> Result<Decision> {
        let valid = self.env.valid_mask(s)?;
        let needs_pf = !matches!(self.variant, MixVariant::SoftQ { .. } | MixVariant::GreedyQ);
        let pf = if needs_pf { self.scorer.forward_probs(s, &valid)? } else { uniform_over(&valid) };
        let q = if self.variant == MixVariant::PurePf { vec![0.0; valid.len()] } else { self.scorer.q_values(s, &valid)? };
        let ctx = MixContext { depth: self.env.depth(s), horizon: self.env.max_trajectory_len() };
        let behavior = policy::behavior(self.variant, self.p, ctx, &self.guard, &pf, &q, &valid)?;
        Ok(Decision { valid, pf, behavior })
    }

    /// Follows the actor from `start` to a terminal state. Returns the
    /// visited states (including `start`) and the actions taken.
    pub fn rollout<R: rand::Rng + ?Sized>(
        &self,
        start: &State,
        rng: &mut R,
        epsilon: f64,
    ) -> Result<(Vec<State>, Vec<ActionId>)> {
        let mut states = vec![start.clone()];
        let mut actions = Vec::new();
        let mut s = start.clone();
        while !s.is_terminal() {
            let d = self.decide(&s)?;
            let a = policy::sample_action(&d.behavior.probs, &d.valid, rng, epsilon)?;
            s = self.env.apply(&s, a)?;
            actions.push(a);
            states.push(s.clone());
        }
        Ok((states, actions))
    }

    pub fn sample_trajectory<R: rand::Rng + ?Sized>(&self, rng: &mut R, epsilon: f64) -> Result<Trajectory> {
        let (states, actions) = self.rollout(&self.env.initial_state(), rng, epsilon)?;
        let r = self.env.reward(states.last().expect("rollout keeps its start state"))?;
        Ok(Trajectory { states, actions, reward: r.value, log_reward_beta: r.log_beta })
    }

    /// Terminal reward of one rollout from `start`.
    pub fn rollout_reward<R: rand::Rng + ?Sized>(&self, start: &State, rng: &mut R, epsilon: f64) -> Result<f64> {
        let (states, _) = self.rollout(start, rng, epsilon)?;
        Ok(self.env.reward(states.last().expect("rollout keeps its start state"))?.value)
    }
}

/// Samples `count` trajectories; trajectory `i` draws from the stream keyed
/// by `(seed, purpose, step, i)`.
pub fn sample_batch(
    actor: &Actor<'_>,
    count: usize,
    epsilon: f64,
    seed: u64,
    key: &[u64],
    exec: Execution,
) -> Result<Vec<Trajectory>> {
    par::try_map_indexed(exec, count, |i| {
        let mut coords = key.to_vec();
        coords.push(i as u64);
        actor.sample_trajectory(&mut par::stream_rng(seed, &coords), epsilon)
    })
}

/// Per-state `P_F` table over an enumerated graph.
pub fn forward_policy_table(graph: &OracleGraph, env: &EnvSpec, scorer: &dyn Scorer) -> Result<PolicyTable> {
    table_from(graph, |s| scorer.forward_probs(s, &env.valid_mask(s)?))
}

/// Per-state behavior table, including uniform `epsilon` exploration.
pub fn behavior_policy_table(graph: &OracleGraph, actor: &Actor<'_>, epsilon: f64) -> Result<PolicyTable> {
    table_from(graph, |s| {
        let d = actor.decide(s)?;
        let u = uniform_over(&d.valid);
        Ok(d.behavior.probs.iter().zip(u).map(|(m, u)| (1.0 - epsilon) * m + epsilon * u).collect())
    })
}

fn table_from(graph: &OracleGraph, mut row: impl FnMut(&State) -> Result<Vec<f64>>) -> Result<PolicyTable> {
    (0..graph.len())
        .map(|i| if graph.is_terminal(i) { Ok(vec![0.0; graph.action_count]) } else { row(&graph.states[i]) })
        .collect()
}

pub struct Trainer {
    env: EnvSpec,
    model: ModelConfig,
    cfg: TrainConfig,
    gfn_net: NetSpec,
    q_net: NetSpec,
    schedule: PSchedule,
    state: RunState,
}

impl Trainer {
    pub fn new(env: EnvSpec, model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        env.validate()?;
        cfg.validate(&env)?;
        let (gfn_net, q_net) = model.nets(&env);
        let gfn = ParamSet::init(&gfn_net, &mut par::stream_rng(cfg.seed, &[STREAM_INIT, 0]));
        let q = ParamSet::init(&q_net, &mut par::stream_rng(cfg.seed, &[STREAM_INIT, 1]));
        let threshold = cfg.mode_reward_threshold.unwrap_or_else(|| env.default_mode_reward_threshold());
        let state = RunState {
            step: 0,
            gfn_opt: Adam::new(gfn.len()),
            q_opt: Adam::new(q.len()),
            target: TargetParams(q.clone()),
            gfn,
            q,
            modes: ModeTracker::new(threshold, env.mode_edit_threshold()),
            metrics: RunMetrics::default(),
        };
        let schedule = cfg.schedule();
        Ok(Self { env, model, cfg, gfn_net, q_net, schedule, state })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "checkpoint schema version {} (expected {SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        let mut t = Self::new(ck.env, ck.model, ck.train)?;
        ck.state.gfn.check(&t.gfn_net)?;
        ck.state.q.check(&t.q_net)?;
        ck.state.target.0.check(&t.q_net)?;
        t.state = ck.state;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            env: self.env.clone(),
            model: self.model.clone(),
            train: self.cfg.clone(),
            state: self.state.clone(),
        }
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the iteration budget, e.g. to extend a resumed run.
    pub fn set_iterations(&mut self, iterations: u64) {
        self.cfg.iterations = iterations;
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn nets(&self) -> (&NetSpec, &NetSpec) {
        (&self.gfn_net, &self.q_net)
    }

    pub fn scorer(&self) -> NetScorer<'_> {
        NetScorer { env: &self.env, gfn_net: &self.gfn_net, gfn: &self.state.gfn, q_net: &self.q_net, q: &self.state.q }
    }

    pub fn current_p(&self) -> f64 {
        schedule_value(&self.schedule, self.state.step)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.iterations
    }

    /// Runs one iteration. On a non-finite loss or gradient the parameters
    /// are left as they were before the iteration and `Error::Diverged` is
    /// returned.
    pub fn step_once(&mut self) -> Result<MetricRecord> {
        let started = self.cfg.record_wall_time.then(Instant::now);
        let step = self.state.step;
        let p = self.current_p();
        let exec = self.cfg.execution();
        let scorer = self.scorer();
        let actor = Actor { env: &self.env, scorer: &scorer, variant: self.cfg.variant, p, guard: self.cfg.guard };
        let batch = sample_batch(&actor, self.cfg.batch_size, self.cfg.q.epsilon, self.cfg.seed, &[STREAM_TRAIN, step], exec)?;
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;

        let saved = (
            self.state.gfn.clone(),
            self.state.gfn_opt.clone(),
            self.state.q.clone(),
            self.state.q_opt.clone(),
            self.state.target.clone(),
        );
        let losses = self.update(&batch, exec).map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged { step, detail },
            other => other,
        });
        let (loss_tb, loss_q) = match losses {
            Ok(l) => l,
            Err(e) => {
                let st = &mut self.state;
                (st.gfn, st.gfn_opt, st.q, st.q_opt, st.target) = saved;
                return Err(e);
            }
        };

        let objects: Vec<Vec<u8>> = batch.iter().map(|t| self.env.object_symbols(t.terminal())).collect();
        self.state.modes.update_modes(objects.iter().zip(&batch).map(|(o, t)| (o.as_slice(), t.reward)));
        let mut rec = MetricRecord::new(step, mean_reward, self.state.modes.count(), loss_tb, loss_q, p);
        rec.wall_ms = started.map(|t| t.elapsed().as_secs_f64() * 1e3);
        self.state.metrics.push(rec.clone())?;
        self.state.step += 1;
        Ok(rec)
    }

    /// GFlowNet then Q updates on one batch; returns the pre-update losses.
    fn update(&mut self, batch: &[Trajectory], exec: Execution) -> Result<(f64, f64)> {
        let st = &mut self.state;
        let scale = self.cfg.lr_schedule.factor(st.step, self.cfg.iterations);
        let gfn_lr = LearningRates { weights: self.cfg.lr * scale, log_z: self.cfg.lr_log_z * scale };
        let mut loss_tb = None;
        for _ in 0..self.cfg.gfn_updates_per_iter.max(1) {
            let out = gfn::loss(&self.cfg.gfn, &self.env, &self.gfn_net, &st.gfn, batch, exec)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("GFlowNet loss is {}", out.loss)));
            }
            loss_tb.get_or_insert(out.loss);
            if self.cfg.gfn_updates_per_iter == 0 {
                break;
            }
            st.gfn_opt.step(&self.gfn_net, &mut st.gfn, &out.grad, gfn_lr)?;
        }

        let q_lr = LearningRates { weights: self.cfg.lr_q * scale, log_z: 0.0 };
        let mut loss_q = None;
        for _ in 0..self.cfg.q_updates_per_iter.max(1) {
            let out = qlearn::q_loss(&self.cfg.q, &self.env, &self.q_net, &st.q, &st.target, batch, exec)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("Q loss is {}", out.loss)));
            }
            loss_q.get_or_insert(out.loss);
            if self.cfg.q_updates_per_iter == 0 {
                break;
            }
            st.q_opt.step(&self.q_net, &mut st.q, &out.grad, q_lr)?;
            qlearn::ema_update(&mut st.target, &st.q, self.cfg.q.tau)?;
        }
        if !st.gfn.all_finite() || !st.q.all_finite() {
            return Err(Error::NonFinite("parameters left the finite range".into()));
        }
        Ok((loss_tb.unwrap_or(f64::NAN), loss_q.unwrap_or(f64::NAN)))
    }

    /// Runs until the iteration budget is spent, handing every record to
    /// `observer` (which may also checkpoint).
    pub fn run(&mut self, mut observer: impl FnMut(&Trainer, &MetricRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step_once()?;
            observer(self, &rec)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final state.
pub fn train(env: EnvSpec, model: ModelConfig, cfg: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(env, model, cfg)?;
    t.run(|_, _| Ok(()))?;
    Ok(t)
}
