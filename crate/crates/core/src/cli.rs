//! Command-line front end: JSON run configs with dotted `--set` overrides,
//! and the `train`, `sweep`, `probe` and `oracle-check` commands. This is the
//! only module that touches the filesystem.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{EnvSpec, EnvVariant, State, DEFAULT_ENUMERATION_CAP};
use crate::metrics;
use crate::oracle;
use crate::par;
use crate::policy::MixVariant;
use crate::trainer::{
    self, default_switch_range, Actor, CalibrationSettings, Checkpoint, ModelConfig, Regime, SweepSettings,
    TrainConfig, Trainer,
};
use crate::{Error, Result, SCHEMA_VERSION};

/// Bit-task references: three words from {0000, 1111, 1100, 0011}.
pub const DESK_BIT_REFERENCES: [&str; 4] = ["000011110011", "111100001100", "110000110000", "001111001111"];
pub const DESK_LANDSCAPE_REFERENCES: [&str; 4] = ["ACGUACGU", "GGGGCCCC", "AUAUAUAU", "CAGUCAGU"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    TwoDoors {
        #[serde(default = "one")]
        beta: f64,
    },
    PrependAppendBits {
        #[serde(default = "default_bit_len")]
        max_len: usize,
        #[serde(default = "one_usize")]
        k: usize,
        /// Defaults to the desk references repeated or cut to the object length.
        #[serde(default)]
        references: Option<Vec<String>>,
        /// Defaults to 3, capped below the object length.
        #[serde(default)]
        mode_edit_threshold: Option<usize>,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_floor")]
        reward_floor: f64,
    },
    StringLandscape {
        #[serde(default = "default_alphabet")]
        alphabet: String,
        #[serde(default = "default_landscape_len")]
        max_len: usize,
        #[serde(default)]
        references: Option<Vec<String>>,
        /// Defaults to 2, capped below the object length.
        #[serde(default)]
        mode_edit_threshold: Option<usize>,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_floor")]
        reward_floor: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_bit_len() -> usize {
    12
}
fn default_bit_delta() -> usize {
    3
}
fn default_beta() -> f64 {
    3.0
}
fn default_floor() -> f64 {
    1e-6
}
fn default_alphabet() -> String {
    "ACGU".into()
}
fn default_landscape_len() -> usize {
    8
}
fn default_landscape_delta() -> usize {
    2
}

fn capped(delta: usize, len: usize) -> usize {
    delta.min(len.saturating_sub(1))
}

fn fit_length(r: &str, len: usize) -> String {
    r.chars().cycle().take(len).collect()
}

impl EnvConfig {
    pub fn desk_bits(max_len: usize, beta: f64) -> Self {
        EnvConfig::PrependAppendBits {
            max_len,
            k: 1,
            references: None,
            mode_edit_threshold: None,
            beta,
            reward_floor: default_floor(),
        }
    }

    pub fn build(&self) -> Result<EnvSpec> {
        match self {
            EnvConfig::TwoDoors { beta } => EnvSpec::two_doors(*beta),
            EnvConfig::PrependAppendBits { max_len, k, references, mode_edit_threshold, beta, reward_floor } => {
                let refs = references.clone().unwrap_or_else(|| {
                    DESK_BIT_REFERENCES.iter().map(|r| fit_length(r, max_len * k)).collect()
                });
                let delta = mode_edit_threshold.unwrap_or_else(|| capped(default_bit_delta(), max_len * k));
                EnvSpec::prepend_append_bits(*max_len, *k, &refs, delta, *beta, *reward_floor)
            }
            EnvConfig::StringLandscape { alphabet, max_len, references, mode_edit_threshold, beta, reward_floor } => {
                let refs = references.clone().unwrap_or_else(|| {
                    DESK_LANDSCAPE_REFERENCES.iter().map(|r| fit_length(r, *max_len)).collect()
                });
                let delta = mode_edit_threshold.unwrap_or_else(|| capped(default_landscape_delta(), *max_len));
                EnvSpec::string_landscape(alphabet, *max_len, &refs, delta, *beta, *reward_floor)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        let env = cfg.env.build()?;
        cfg.train.validate(&env)?;
        Ok(cfg)
    }
}

/// Sets `path` (dot separated) in `root` to `raw`, parsed as JSON when
/// possible and taken as a string otherwise. Intermediate objects are
/// created as needed.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    for (i, key) in keys.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("`{}` is not an object", keys[..i].join("."))));
            }
        }
        let map = cur.as_object_mut().expect("checked above");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

/// Reads a config file and applies overrides in order.
pub fn load_config(path: &Path, sets: &[(String, String)], seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut v: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for (k, raw) in sets {
        apply_override(&mut v, k, raw)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut v, "train.seed", &seed.to_string())?;
    }
    RunConfig::from_value(v)
}

/// Parses `variant:pmin:pmax:steps` into evenly spaced cells.
pub fn parse_grid(spec: &str) -> Result<Vec<(MixVariant, f64)>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |why: &str| Error::Config(format!("grid `{spec}`: {why} (expected variant:pmin:pmax:steps)"));
    if parts.len() != 4 {
        return Err(bad("wrong number of fields"));
    }
    let variant = parse_variant(parts[0])?;
    let lo: f64 = parts[1].parse().map_err(|_| bad("pmin is not a number"))?;
    let hi: f64 = parts[2].parse().map_err(|_| bad("pmax is not a number"))?;
    let steps: usize = parts[3].parse().map_err(|_| bad("steps is not a positive integer"))?;
    if steps == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(bad("need steps >= 1 and pmin <= pmax"));
    }
    if steps == 1 && lo != hi {
        return Err(bad("a single step needs pmin == pmax"));
    }
    Ok((0..steps)
        .map(|i| {
            let v = if steps == 1 { lo } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 };
            variant.at_grid_value(v)
        })
        .collect())
}

/// Accepts canonical names (`p_greedy`) and compact ones (`pgreedy`).
pub fn parse_variant(name: &str) -> Result<MixVariant> {
    let compact: String = name.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
    let canonical = match compact.as_str() {
        "purepf" => "pure_pf",
        "pgreedy" => "p_greedy",
        "pquantile" => "p_quantile",
        "pofmax" => "p_of_max",
        "pthresh" => "p_thresh",
        "softq" => "soft_q",
        "softqmixed" => "soft_q_mixed",
        "gfnthenq" => "gfn_then_q",
        "greedyq" => "greedy_q",
        _ => name,
    };
    MixVariant::from_name(canonical)
}

#[derive(Debug, Parser)]
#[command(name = "qgfn", version, about = "Train and analyse GFlowNet + Q mixture samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted override, e.g. `--set train.seed=7`. Repeatable.
    #[arg(long = "set", value_parser = parse_set)]
    pub sets: Vec<(String, String)>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed for the sampling streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 is sequential.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeName {
    Calibration,
    Pruned,
    ChangedP,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics.jsonl, checkpoint.json and summary.json.
    Train(ConfigArgs),
    /// Evaluate a checkpoint over variant/p grids and write sweep.json.
    Sweep {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// `variant:pmin:pmax:steps`; repeat to concatenate tables.
        #[arg(long = "grid", required = true)]
        grids: Vec<String>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Objects entering the similarity statistic; defaults to all samples.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Run an analysis probe on a checkpoint and write probe_<name>.json.
    Probe {
        #[arg(value_enum)]
        name: ProbeName,
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Mixing variant; defaults to the trained one (p-of-max for `pruned`
        /// when the trained variant does not prune).
        #[arg(long)]
        variant: Option<String>,
        /// Mixing parameter; defaults to the trained final p.
        #[arg(long)]
        p: Option<f64>,
        /// Trajectories probed (calibration, changed-p).
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Rollouts per probed state (calibration, changed-p).
        #[arg(long, default_value_t = 512)]
        rollouts: usize,
        /// Samples per regime (pruned).
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Comma-separated p' values (changed-p); defaults to 0, p, 1 and
        /// points in between.
        #[arg(long, value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
    },
    /// Check flows, the reward distribution and exact Q on an enumerable env.
    OracleCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Maximum number of enumerated states.
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
        cap: usize,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.env.validate()?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub iterations: u64,
    pub final_p: f64,
    /// Mean batch reward over the last `tail_window` iterations.
    pub tail_mean_reward: f64,
    pub tail_window: usize,
    pub modes: usize,
    pub last_loss_tb: f64,
    pub last_loss_q: f64,
    pub log_z: Option<f64>,
}

pub const SUMMARY_TAIL: usize = 500;

pub fn summarize(t: &Trainer) -> Summary {
    let st = t.state();
    let last = st.metrics.records.last();
    let window = SUMMARY_TAIL.min(st.metrics.len());
    Summary {
        schema_version: SCHEMA_VERSION,
        iterations: st.step,
        final_p: last.map_or(f64::NAN, |r| r.p),
        tail_mean_reward: st.metrics.tail_mean_reward(SUMMARY_TAIL).unwrap_or(f64::NAN),
        tail_window: window,
        modes: st.modes.count(),
        last_loss_tb: last.map_or(f64::NAN, |r| r.loss_tb),
        last_loss_q: last.map_or(f64::NAN, |r| r.loss_q),
        log_z: st.gfn.log_z(t.nets().0),
    }
}

/// Trains per `cfg` and writes all artifacts into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    fs::create_dir_all(out)?;
    let env = cfg.env.build()?;
    par::init_workers(cfg.train.workers);
    write_json(&out.join("config.json"), &json!({ "schema_version": SCHEMA_VERSION, "config": cfg }))?;
    let mut trainer = Trainer::new(env, cfg.model.clone(), cfg.train.clone())?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let every = cfg.train.checkpoint_every;
    let result = trainer.run(|t, rec| {
        metrics::write_record(&mut metrics, rec)?;
        if every > 0 && t.state().step % every == 0 {
            metrics.flush()?;
            write_json(&out.join("checkpoint.json"), &t.checkpoint())?;
        }
        Ok(())
    });
    metrics.flush()?;
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            write_json(&out.join("diagnostic_checkpoint.json"), &trainer.checkpoint())?;
        }
        return Err(e);
    }
    write_json(&out.join("checkpoint.json"), &trainer.checkpoint())?;
    let summary = summarize(&trainer);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoDoorsValues {
    pub f_left: f64,
    pub f_right: f64,
    pub z: f64,
    pub q_left: f64,
    pub q_right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema_version: u32,
    pub states: usize,
    pub terminals: usize,
    pub checks: Vec<CheckResult>,
    pub two_doors: Option<TwoDoorsValues>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

const ORACLE_TOL: f64 = 1e-9;

/// Flow conservation, the flow policy's terminal distribution against
/// `R^beta / Z`, and Bellman consistency of its exact `Q`.
pub fn oracle_check(env: &EnvSpec, cap: usize) -> Result<OracleReport> {
    let graph = env.enumerate_states(cap)?;
    let flows = oracle::exact_flows(&graph, env.beta());
    let z = flows.z();
    let mut checks = Vec::new();
    let mut check = |name: &str, pass: bool, detail: String| {
        checks.push(CheckResult { name: name.to_string(), pass, detail });
    };

    let residual = flows.conservation_residual(&graph);
    check("flow_conservation", residual <= 1e-10 * z.max(1.0), format!("max residual {residual:.3e}, Z = {z}"));

    let policy = flows.implied_policy(&graph);
    let learned = oracle::exact_terminal_distribution(&graph, &policy)?;
    let target = oracle::reward_distribution(&graph, env.beta());
    let tv = oracle::tv_distance(&learned, &target);
    check("reward_distribution", tv < ORACLE_TOL, format!("TV(flow policy, R^beta/Z) = {tv:.3e}"));

    let q = oracle::exact_q(&graph, &policy)?;
    let bellman = oracle::bellman_residual(&graph, &policy, &q);
    check("exact_q_bellman", bellman < ORACLE_TOL, format!("max Bellman residual {bellman:.3e}"));

    let mut two_doors = None;
    if *env.variant() == EnvVariant::TwoDoors {
        let id = |tokens: Vec<u8>| graph.id(&State::new(tokens, false)).expect("two-doors rooms exist");
        let (left, right) = (id(vec![0]), id(vec![1]));
        let v = TwoDoorsValues {
            f_left: flows.state_flow[left],
            f_right: flows.state_flow[right],
            z,
            q_left: q[0][0],
            q_right: q[0][1],
        };
        let close = |a: f64, b: f64| (a - b).abs() <= ORACLE_TOL;
        let expected_flow = crate::env::LEFT_DOORS as f64 * crate::env::LEFT_REWARD.powf(env.beta());
        check(
            "two_doors_values",
            close(v.f_left, expected_flow)
                && close(v.f_right, crate::env::RIGHT_REWARD.powf(env.beta()))
                && close(v.z, v.f_left + v.f_right)
                && close(v.q_left, crate::env::LEFT_REWARD)
                && close(v.q_right, crate::env::RIGHT_REWARD),
            format!(
                "F(left) = {}, F(right) = {}, Z = {}, Q(s0,left) = {}, Q(s0,right) = {}",
                v.f_left, v.f_right, v.z, v.q_left, v.q_right
            ),
        );
        two_doors = Some(v);
    }
    Ok(OracleReport {
        schema_version: SCHEMA_VERSION,
        states: graph.len(),
        terminals: graph.terminals().count(),
        checks,
        two_doors,
    })
}

fn restore(ck: &CheckpointArgs) -> Result<Trainer> {
    par::init_workers(ck.workers);
    Trainer::from_checkpoint(read_checkpoint(&ck.checkpoint)?)
}

/// Default changed-p grid: 0, the trained p and evenly spaced points up to 1.
pub fn default_p_grid(p_train: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = vec![0.0, p_train];
    grid.extend((1..=4).map(|i| p_train + (1.0 - p_train) * i as f64 / 4.0));
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    grid
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args.config, &args.sets, args.seed)?;
            let out = out_dir(args.out, &cfg, "out");
            let s = cmd_train(&cfg, &out)?;
            writeln!(
                stdout,
                "trained {} iterations: tail mean reward {:.4}, modes {}, artifacts in {}",
                s.iterations,
                s.tail_mean_reward,
                s.modes,
                out.display()
            )?;
            Ok(true)
        }
        Command::Sweep { ck, grids, samples, top_k } => {
            let cells = grids.iter().map(|g| parse_grid(g)).collect::<Result<Vec<_>>>()?.concat();
            let t = restore(&ck)?;
            let scorer = t.scorer();
            let cfg = t.config();
            let actor = Actor { env: t.env(), scorer: &scorer, variant: cfg.variant, p: cfg.p, guard: cfg.guard };
            let threshold = cfg.mode_reward_threshold.unwrap_or_else(|| t.env().default_mode_reward_threshold());
            let settings =
                SweepSettings { samples, top_k: top_k.unwrap_or(samples), mode_reward_threshold: threshold, seed: ck.seed };
            let table = trainer::inference_sweep(&actor, &cells, settings, par::Execution::from_workers(ck.workers))?;
            fs::create_dir_all(&ck.out)?;
            write_json(&ck.out.join("sweep.json"), &json!({ "schema_version": SCHEMA_VERSION, "cells": table }))?;
            for c in &table {
                writeln!(
                    stdout,
                    "{:<13} p={:.3} reward={:.4}±{:.4} similarity={:.4} modes={}",
                    c.variant, c.p, c.mean_reward, c.reward_stderr, c.mean_similarity, c.modes
                )?;
            }
            Ok(true)
        }
        Command::Probe { name, ck, variant, p, k, rollouts, samples, p_grid } => {
            let t = restore(&ck)?;
            let scorer = t.scorer();
            let cfg = t.config();
            let v = match variant {
                Some(v) => parse_variant(&v)?,
                None if name == ProbeName::Pruned && !prunes(cfg.variant) => MixVariant::POfMax,
                None => cfg.variant,
            };
            let p = p.unwrap_or(cfg.p);
            let actor = Actor { env: t.env(), scorer: &scorer, variant: v, p, guard: cfg.guard };
            let exec = par::Execution::from_workers(ck.workers);
            let settings = CalibrationSettings { trajectories: k, rollouts, seed: ck.seed };
            fs::create_dir_all(&ck.out)?;
            match name {
                ProbeName::Calibration => {
                    let rep = trainer::probe_q_calibration(&actor, p, settings, exec)?;
                    write_json(&ck.out.join("probe_calibration.json"), &rep)?;
                    writeln!(stdout, "{} records, spearman {:?}", rep.records.len(), rep.spearman)?;
                }
                ProbeName::ChangedP => {
                    let grid = p_grid.unwrap_or_else(|| default_p_grid(p));
                    let rows = trainer::probe_changed_p(&actor, &grid, settings, exec)?;
                    write_json(
                        &ck.out.join("probe_changed_p.json"),
                        &json!({ "schema_version": SCHEMA_VERSION, "variant": v.name(), "p_train": p, "rows": rows }),
                    )?;
                    for r in &rows {
                        writeln!(
                            stdout,
                            "p'={:.3} spearman={:?} lower_bound_rate={:.3}",
                            r.p_prime, r.spearman, r.lower_bound_rate
                        )?;
                    }
                }
                ProbeName::Pruned => {
                    let range = default_switch_range(t.env().max_trajectory_len());
                    let mut regimes = serde_json::Map::new();
                    for regime in Regime::ALL {
                        let rewards = trainer::probe_pruned_actions(&actor, regime, samples, range, ck.seed, exec)?;
                        let stat = metrics::mean_stat(&rewards);
                        writeln!(stdout, "{:<12} mean reward {:.4} ± {:.4}", regime.name(), stat.mean, stat.stderr)?;
                        regimes.insert(regime.name().to_string(), json!(rewards));
                    }
                    write_json(
                        &ck.out.join("probe_pruned.json"),
                        &json!({
                            "schema_version": SCHEMA_VERSION,
                            "variant": v.name(),
                            "p": p,
                            "switch_range": [range.0, range.1],
                            "regimes": regimes,
                        }),
                    )?;
                }
            }
            Ok(true)
        }
        Command::OracleCheck { cfg: args, cap } => {
            let cfg = load_config(&args.config, &args.sets, args.seed)?;
            let env = cfg.env.build()?;
            let started = Instant::now();
            let report = oracle_check(&env, cap)?;
            let elapsed = started.elapsed();
            for c in &report.checks {
                writeln!(stdout, "[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail)?;
            }
            writeln!(stdout, "{} states, {} terminals, {:.1} ms", report.states, report.terminals, elapsed.as_secs_f64() * 1e3)?;
            if let Some(out) = args.out.or(cfg.out) {
                fs::create_dir_all(&out)?;
                write_json(&out.join("oracle_check.json"), &report)?;
            }
            Ok(report.all_pass())
        }
    }
}

fn prunes(v: MixVariant) -> bool {
    matches!(v, MixVariant::POfMax | MixVariant::PQuantile | MixVariant::PThresh)
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
