use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::approx::gradcheck::{central_differences, max_relative_error};
use crate::approx::{forward_raw, ParamSet};
use crate::env::{ActionId, DEFAULT_ENUMERATION_CAP};
use crate::oracle;

fn two_doors() -> EnvSpec {
    EnvSpec::two_doors(1.0).unwrap()
}

fn bits(max_len: usize) -> EnvSpec {
    EnvSpec::prepend_append_bits(max_len, 1, &["0".repeat(max_len)], 0, 2.0, 1e-6).unwrap()
}

fn traj(env: &EnvSpec, actions: &[usize]) -> Trajectory {
    let acts: Vec<ActionId> = actions.iter().map(|&a| ActionId(a)).collect();
    Trajectory::from_actions(env, &acts).unwrap()
}

/// Uniform random valid rollouts.
fn random_batch(env: &EnvSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Trajectory> {
    (0..n)
        .map(|_| {
            let mut s = env.initial_state();
            let mut acts = Vec::new();
            while !s.is_terminal() {
                let valid = env.valid_actions(&s).unwrap();
                let a = valid[rng.gen_range(0..valid.len())];
                acts.push(a);
                s = env.apply(&s, a).unwrap();
            }
            Trajectory::from_actions(env, &acts).unwrap()
        })
        .collect()
}

fn with_values(net: &NetSpec, v: &[f64]) -> ParamSet {
    ParamSet { values: v.to_vec(), layer_shapes: net.layer_shapes() }
}

/// Linear GFN net over the two-doors node one-hot whose policy head is
/// `log_pf` and whose flow head is `log_f`, per node.
fn table_net(env: &EnvSpec, g: &crate::env::OracleGraph, log_pf: &[Vec<f64>], log_f: &[f64], log_z: f64) -> (NetSpec, ParamSet) {
    let net = NetSpec::gfn(env.encoding_width(), &[], env.action_count());
    let mut p = ParamSet::zeros(&net);
    let width = env.encoding_width();
    for (i, s) in g.states.iter().enumerate() {
        if s.is_terminal() {
            continue;
        }
        let node = env.encode(s).0.iter().position(|&x| x == 1.0).unwrap();
        for a in 0..env.action_count() {
            let l = log_pf[i][a];
            p.values[a * width + node] = if l.is_finite() { l } else { 0.0 };
        }
        p.values[env.action_count() * width + node] = log_f[i];
    }
    let z = net.log_z_index().unwrap();
    p.values[z] = log_z;
    (net, p)
}

fn exact_two_doors_net(log_z_shift: f64) -> (EnvSpec, NetSpec, ParamSet) {
    let env = two_doors();
    let g = env.enumerate_states(DEFAULT_ENUMERATION_CAP).unwrap();
    let flows = oracle::exact_flows(&g, 1.0);
    let pf: Vec<Vec<f64>> = flows.implied_policy(&g).iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    let log_f: Vec<f64> = flows.state_flow.iter().map(|f| f.ln()).collect();
    let (net, p) = table_net(&env, &g, &pf, &log_f, 200f64.ln() + log_z_shift);
    (env, net, p)
}

#[test]
fn uniform_log_pf_on_two_doors() {
    let env = two_doors();
    let net = NetSpec::gfn(env.encoding_width(), &[8], env.action_count());
    let p = ParamSet::zeros(&net);
    let lp = log_pf_trajectory(&env, &net, &p, &traj(&env, &[0, 7])).unwrap();
    assert!((lp.total - (0.5f64.ln() + 0.01f64.ln())).abs() < 1e-12);
}

#[test]
fn forced_moves_have_zero_log_pf() {
    let env = EnvSpec::string_landscape("A", 1, &["A".into()], 0, 1.0, 1e-6).unwrap();
    let net = NetSpec::gfn(env.encoding_width(), &[4], env.action_count());
    let p = ParamSet::random(&net, &mut ChaCha8Rng::seed_from_u64(1), 2.0);
    let lp = log_pf_trajectory(&env, &net, &p, &traj(&env, &[0, 1])).unwrap();
    assert_eq!(lp.per_step, vec![0.0, 0.0]);
    assert_eq!(lp.total, 0.0);
}

#[test]
fn log_pf_steps_are_non_positive() {
    let env = bits(4);
    let net = NetSpec::gfn(env.encoding_width(), &[6], env.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = ParamSet::random(&net, &mut rng, 3.0);
    for t in random_batch(&env, 20, &mut rng) {
        let lp = log_pf_trajectory(&env, &net, &p, &t).unwrap();
        assert!(lp.per_step.iter().all(|&x| x <= 0.0));
    }
}

#[test]
fn invalid_action_in_trajectory_is_reported() {
    let env = bits(3);
    let net = NetSpec::gfn(env.encoding_width(), &[], env.action_count());
    let mut t = traj(&env, &[2, 2, 2]);
    t.actions[0] = ActionId(0); // prepend from the empty string is not offered
    assert!(matches!(log_pf_trajectory(&env, &net, &ParamSet::zeros(&net), &t), Err(Error::InvalidAction { .. })));
}

#[test]
fn uniform_pb_examples() {
    let env = two_doors();
    assert_eq!(log_pb_trajectory(&env, &traj(&env, &[0, 3])).total, 0.0);
    let env = bits(3);
    // "" -> "0" -> "01" -> "011", each step into a state with parents() edges.
    let t = traj(&env, &[2, 3, 3]);
    let expected: Vec<f64> = t.states[1..].iter().map(|s| -(env.parents(s).unwrap().len() as f64).ln()).collect();
    let pb = log_pb_trajectory(&env, &t);
    assert_eq!(pb.per_step, expected);
    assert!((pb.per_step[2] - 0.5f64.ln()).abs() < 1e-15);
    let t = traj(&env, &[2, 0, 2]); // "" -> "0" -> "00" -> "000"
    assert!((pb.per_step[1] - 0.5f64.ln()).abs() < 1e-15);
    assert!((log_pb_trajectory(&env, &t).per_step[1] - 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn tb_vanishes_at_the_exact_flow_solution() {
    let (env, net, p) = exact_two_doors_net(0.0);
    let batch: Vec<Trajectory> = (0..100).map(|d| traj(&env, &[0, d])).chain([traj(&env, &[1, 0])]).collect();
    let out = tb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap();
    assert!(out.loss < 1e-20);
    assert!(out.grad.iter().all(|g| g.abs() < 1e-9));

    let (_, _, shifted) = exact_two_doors_net(1.0);
    let out = tb_loss(&env, &net, &shifted, &batch, Execution::Sequential).unwrap();
    assert!((out.loss - 1.0).abs() < 1e-12);
}

#[test]
fn zero_tb_loss_implies_reward_proportional_sampling() {
    let (env, net, p) = exact_two_doors_net(0.0);
    let g = env.enumerate_states(DEFAULT_ENUMERATION_CAP).unwrap();
    let policy = oracle::policy_from_fn(&g, |i| {
        let mask = env.valid_mask(&g.states[i]).unwrap();
        approx::forward(&net, &p, &env.encode(&g.states[i]).0, &mask).unwrap().policy_probs()
    });
    for t in g.terminals() {
        let path = {
            let toks = g.states[t].tokens();
            vec![toks[0] as usize, toks[1] as usize]
        };
        let out = tb_loss(&env, &net, &p, &[traj(&env, &path)], Execution::Sequential).unwrap();
        assert!(out.loss < 1e-10);
    }
    let d = oracle::exact_terminal_distribution(&g, &policy).unwrap();
    assert!(oracle::tv_distance(&d, &oracle::reward_distribution(&g, 1.0)) < 1e-5);
}

/// Independent scalar TB: recompute everything from raw outputs.
fn tb_reference(env: &EnvSpec, net: &NetSpec, p: &ParamSet, batch: &[Trajectory]) -> f64 {
    let log_z = *p.values.last().unwrap();
    let mut total = 0.0;
    for t in batch {
        let mut sum_pf = 0.0;
        for (s, a) in t.states.iter().zip(&t.actions) {
            let out = forward_raw(net, p, &env.encode(s).0);
            let valid = env.valid_actions(s).unwrap();
            let lse = valid.iter().map(|b| out.output()[b.0].exp()).sum::<f64>().ln();
            sum_pf += out.output()[a.0] - lse;
        }
        let sum_pb: f64 = t.states[1..].iter().map(|s| -(env.parents(s).unwrap().len() as f64).ln()).sum();
        let d = log_z + sum_pf - t.log_reward_beta - sum_pb;
        total += d * d;
    }
    total / batch.len() as f64
}

#[test]
fn tb_matches_reference_formula() {
    let env = bits(4);
    let net = NetSpec::gfn(env.encoding_width(), &[7, 5], env.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = ParamSet::random(&net, &mut rng, 1.0);
        let batch = random_batch(&env, 8, &mut rng);
        let got = tb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap().loss;
        assert!((got - tb_reference(&env, &net, &p, &batch)).abs() < 1e-12 * got.max(1.0));
    }
}

#[test]
fn tb_is_order_invariant_and_mode_independent() {
    let env = bits(4);
    let net = NetSpec::gfn(env.encoding_width(), &[6], env.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ParamSet::random(&net, &mut rng, 1.0);
    let batch = random_batch(&env, 10, &mut rng);
    let mut reversed = batch.clone();
    reversed.reverse();
    let a = tb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap();
    let b = tb_loss(&env, &net, &p, &reversed, Execution::Sequential).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    let c = tb_loss(&env, &net, &p, &batch, Execution::Parallel).unwrap();
    assert_eq!(a.loss, c.loss);
    assert_eq!(a.grad, c.grad);
}

/// Naive double loop over sub-trajectories, summing each segment directly.
fn subtb_reference(env: &EnvSpec, net: &NetSpec, p: &ParamSet, batch: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    for t in batch {
        let big_t = t.len();
        let mut log_f = Vec::new();
        let mut log_pf = Vec::new();
        for (s, a) in t.states.iter().zip(&t.actions) {
            let out = forward_raw(net, p, &env.encode(s).0);
            let valid = env.valid_actions(s).unwrap();
            let lse = valid.iter().map(|b| out.output()[b.0].exp()).sum::<f64>().ln();
            log_pf.push(out.output()[a.0] - lse);
            log_f.push(out.output()[env.action_count()]);
        }
        log_f.push(t.log_reward_beta);
        let log_pb: Vec<f64> = t.states[1..].iter().map(|s| -(env.parents(s).unwrap().len() as f64).ln()).collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for n in 0..big_t {
            for m in n + 1..=big_t {
                let mut d = log_f[n] - log_f[m];
                for i in n..m {
                    d += log_pf[i] - log_pb[i];
                }
                sum += d * d;
                count += 1.0;
            }
        }
        total += sum / count;
    }
    total / batch.len() as f64
}

#[test]
fn subtb_matches_naive_double_loop() {
    let env = EnvSpec::string_landscape("ACGU", 4, &["ACGU".into()], 1, 2.0, 1e-6).unwrap();
    let net = NetSpec::gfn(env.encoding_width(), &[6], env.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let p = ParamSet::random(&net, &mut rng, 1.0);
        let batch = random_batch(&env, 8, &mut rng);
        let got = subtb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap().loss;
        let want = subtb_reference(&env, &net, &p, &batch);
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }
}

#[test]
fn subtb_on_single_step_trajectories_equals_tb() {
    let env = bits(1);
    let net = NetSpec::gfn(env.encoding_width(), &[5], env.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = ParamSet::random(&net, &mut rng, 1.0);
    let batch = vec![traj(&env, &[2]), traj(&env, &[3])];
    let sub = subtb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap().loss;
    let s0 = forward_raw(&net, &p, &env.encode(&env.initial_state()).0);
    let z = net.log_z_index().unwrap();
    p.values[z] = s0.output()[env.action_count()];
    let tb = tb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap().loss;
    assert!((sub - tb).abs() < 1e-12);
}

#[test]
fn subtb_vanishes_at_exact_flows() {
    let (env, net, p) = exact_two_doors_net(0.0);
    let batch: Vec<Trajectory> = (0..100).step_by(7).map(|d| traj(&env, &[0, d])).chain([traj(&env, &[1, 0])]).collect();
    let out = subtb_loss(&env, &net, &p, &batch, Execution::Sequential).unwrap();
    assert!(out.loss < 1e-20);
}

fn check_gradient(objective: Objective, env: &EnvSpec, seed: u64) -> f64 {
    let net = NetSpec::gfn(env.encoding_width(), &[4], env.action_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ParamSet::random(&net, &mut rng, 0.7);
    assert!(p.len() <= 200);
    let batch = random_batch(env, 4, &mut rng);
    let cfg = GfnConfig { objective, ..GfnConfig::default() };
    let analytic = loss(&cfg, env, &net, &p, &batch, Execution::Sequential).unwrap().grad;
    let numeric = central_differences(
        |v| loss(&cfg, env, &net, &with_values(&net, v), &batch, Execution::Sequential).unwrap().loss,
        &p.values,
        1e-5,
    );
    max_relative_error(&analytic, &numeric)
}

#[test]
fn gradients_match_finite_differences() {
    let bits3 = bits(3);
    let land = EnvSpec::string_landscape("AC", 3, &["ACA".into()], 1, 2.0, 1e-6).unwrap();
    for seed in 0..3 {
        assert!(check_gradient(Objective::Tb, &bits3, seed) < 1e-4);
        assert!(check_gradient(Objective::SubTb1, &bits3, seed) < 1e-4);
        assert!(check_gradient(Objective::SubTb1, &land, seed) < 1e-4);
    }
}

#[test]
fn empty_batch_is_an_error() {
    let env = bits(2);
    let net = NetSpec::gfn(env.encoding_width(), &[], env.action_count());
    assert!(tb_loss(&env, &net, &ParamSet::zeros(&net), &[], Execution::Sequential).is_err());
}

#[test]
fn config_validation() {
    assert!(GfnConfig::default().validate().is_ok());
    let bad = GfnConfig { objective: Objective::SubTb1, subtb_lambda: 0.9, uniform_pb: true };
    assert!(bad.validate().is_err());
}
