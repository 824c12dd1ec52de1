//! Exact ground truth on enumerable environments.
//!
//! Tables are indexed by [`OracleGraph`] state id. Policies are given as one
//! row per state over the full action space (rows of terminal states are
//! ignored).

use serde::Serialize;

use crate::env::{ActionId, OracleGraph};
use crate::{Error, Result};

/// Per-state action distributions, indexed by graph state id.
pub type PolicyTable = Vec<Vec<f64>>;

/// Probability of ending in each state; zero on non-terminal states.
pub type TerminalDistribution = Vec<f64>;

#[derive(Debug, Clone, Serialize)]
pub struct FlowTables {
    pub state_flow: Vec<f64>,
    /// Aligned with `graph.children[s]`.
    pub edge_flow: Vec<Vec<f64>>,
}

impl FlowTables {
    /// Partition function `Z = F(s_0)`.
    pub fn z(&self) -> f64 {
        self.state_flow[0]
    }

    /// `P_F(a | s) = F(s -> s') / F(s)`.
    pub fn implied_policy(&self, graph: &OracleGraph) -> PolicyTable {
        (0..graph.len())
            .map(|i| {
                let mut row = vec![0.0; graph.action_count];
                if !graph.is_terminal(i) {
                    for (&(a, _), &f) in graph.children[i].iter().zip(&self.edge_flow[i]) {
                        row[a.0] += f / self.state_flow[i];
                    }
                }
                row
            })
            .collect()
    }

    /// Largest `|sum in - sum out|` over interior states.
    pub fn conservation_residual(&self, graph: &OracleGraph) -> f64 {
        let mut inflow = vec![0.0; graph.len()];
        for i in 0..graph.len() {
            for (&(_, j), &f) in graph.children[i].iter().zip(&self.edge_flow[i]) {
                inflow[j] += f;
            }
        }
        (1..graph.len())
            .filter(|&i| !graph.is_terminal(i))
            .map(|i| (inflow[i] - self.edge_flow[i].iter().sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }
}

/// Flows with terminal flow `R^beta` and a uniform backward policy, which
/// makes them unique: `F(s -> s') = F(s') / #parent-edges(s')`.
pub fn exact_flows(graph: &OracleGraph, beta: f64) -> FlowTables {
    let n = graph.len();
    let mut state_flow = vec![0.0; n];
    let mut edge_flow: Vec<Vec<f64>> = graph.children.iter().map(|c| vec![0.0; c.len()]).collect();
    for i in (0..n).rev() {
        if let Some(r) = graph.rewards[i] {
            state_flow[i] = r.value.powf(beta);
            continue;
        }
        let mut total = 0.0;
        for (k, &(_, j)) in graph.children[i].iter().enumerate() {
            let f = state_flow[j] / graph.parents[j].len() as f64;
            edge_flow[i][k] = f;
            total += f;
        }
        state_flow[i] = total;
    }
    FlowTables { state_flow, edge_flow }
}

/// Target distribution `R(x)^beta / Z` over terminals.
pub fn reward_distribution(graph: &OracleGraph, beta: f64) -> TerminalDistribution {
    let mut d: Vec<f64> = graph.rewards.iter().map(|r| r.map_or(0.0, |r| r.value.powf(beta))).collect();
    let z: f64 = d.iter().sum();
    d.iter_mut().for_each(|p| *p /= z);
    d
}

fn check_policy(graph: &OracleGraph, policy: &PolicyTable) -> Result<()> {
    if policy.len() != graph.len() {
        return Err(Error::InvalidPolicy(format!("{} rows for {} states", policy.len(), graph.len())));
    }
    for i in (0..graph.len()).filter(|&i| !graph.is_terminal(i)) {
        let row = &policy[i];
        if row.len() != graph.action_count {
            return Err(Error::InvalidPolicy(format!("row {i} has {} entries", row.len())));
        }
        let mut on_valid = 0.0;
        for (a, &p) in row.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidPolicy(format!("row {i} has entry {p}")));
            }
            if graph.child(i, ActionId(a)).is_some() {
                on_valid += p;
            } else if p > 0.0 {
                return Err(Error::InvalidPolicy(format!("row {i} puts mass on invalid action {a}")));
            }
        }
        if (on_valid - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPolicy(format!("row {i} sums to {on_valid}")));
        }
    }
    Ok(())
}

/// Probability that a rollout from `s_0` under `policy` visits each state.
pub fn visit_probabilities(graph: &OracleGraph, policy: &PolicyTable) -> Result<Vec<f64>> {
    check_policy(graph, policy)?;
    let mut visit = vec![0.0; graph.len()];
    visit[0] = 1.0;
    for i in 0..graph.len() {
        if graph.is_terminal(i) || visit[i] == 0.0 {
            continue;
        }
        for &(a, j) in &graph.children[i] {
            visit[j] += visit[i] * policy[i][a.0];
        }
    }
    Ok(visit)
}

/// Forward sweep of visit probabilities restricted to terminals.
pub fn exact_terminal_distribution(graph: &OracleGraph, policy: &PolicyTable) -> Result<TerminalDistribution> {
    let mut visit = visit_probabilities(graph, policy)?;
    for (i, v) in visit.iter_mut().enumerate() {
        if !graph.is_terminal(i) {
            *v = 0.0;
        }
    }
    Ok(visit)
}

/// `Q^pi(s, a)` with `gamma = 1` and reward only at terminals:
/// `Q(s, a) = R(s')` if `s'` is terminal, else `sum_a' pi(a'|s') Q(s', a')`.
/// Invalid actions hold `NaN`.
pub fn exact_q(graph: &OracleGraph, policy: &PolicyTable) -> Result<Vec<Vec<f64>>> {
    exact_q_with(graph, policy, |r| r)
}

/// As [`exact_q`], with the terminal value transformed by `value_of`.
pub fn exact_q_with(graph: &OracleGraph, policy: &PolicyTable, value_of: impl Fn(f64) -> f64) -> Result<Vec<Vec<f64>>> {
    check_policy(graph, policy)?;
    let n = graph.len();
    let mut q = vec![vec![f64::NAN; graph.action_count]; n];
    let mut v = vec![0.0; n];
    for i in (0..n).rev() {
        if let Some(r) = graph.rewards[i] {
            v[i] = value_of(r.value);
            continue;
        }
        let mut value = 0.0;
        for &(a, j) in &graph.children[i] {
            q[i][a.0] = v[j];
            value += policy[i][a.0] * v[j];
        }
        v[i] = value;
    }
    Ok(q)
}

/// Largest deviation from `Q(s,a) = R(s')` / `sum_a' pi(a'|s') Q(s',a')`.
pub fn bellman_residual(graph: &OracleGraph, policy: &PolicyTable, q: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..graph.len() {
        for &(a, j) in &graph.children[i] {
            let backup = match graph.rewards[j] {
                Some(r) => r.value,
                None => graph.children[j].iter().map(|&(b, _)| policy[j][b.0] * q[j][b.0]).sum(),
            };
            worst = worst.max((q[i][a.0] - backup).abs());
        }
    }
    worst
}

/// `1/2 * sum |d1 - d2|`.
pub fn tv_distance(d1: &[f64], d2: &[f64]) -> f64 {
    assert_eq!(d1.len(), d2.len(), "distributions over different universes");
    0.5 * d1.iter().zip(d2).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Uniform policy over valid actions.
pub fn uniform_policy(graph: &OracleGraph) -> PolicyTable {
    policy_from_fn(graph, |i| {
        let k = graph.children[i].len() as f64;
        let mut row = vec![0.0; graph.action_count];
        for &(a, _) in &graph.children[i] {
            row[a.0] = 1.0 / k;
        }
        row
    })
}

/// Builds a table from a per-state closure; terminal rows are all zero.
pub fn policy_from_fn(graph: &OracleGraph, mut f: impl FnMut(usize) -> Vec<f64>) -> PolicyTable {
    (0..graph.len())
        .map(|i| if graph.is_terminal(i) { vec![0.0; graph.action_count] } else { f(i) })
        .collect()
}

/// Everything the oracle knows about one policy on one graph, for export.
#[derive(Debug, Clone, Serialize)]
pub struct OracleTables {
    pub schema_version: u32,
    pub state_flow: Vec<f64>,
    pub edge_flow: Vec<Vec<f64>>,
    pub terminal_dist: TerminalDistribution,
    pub q_table: Vec<Vec<Option<f64>>>,
}

impl OracleTables {
    /// Flows for `beta` together with `Q` and the terminal distribution of
    /// the flow-implied policy.
    pub fn compute(graph: &OracleGraph, beta: f64) -> Result<Self> {
        let flows = exact_flows(graph, beta);
        let policy = flows.implied_policy(graph);
        let terminal_dist = exact_terminal_distribution(graph, &policy)?;
        let q = exact_q(graph, &policy)?;
        Ok(Self {
            schema_version: crate::SCHEMA_VERSION,
            state_flow: flows.state_flow,
            edge_flow: flows.edge_flow,
            terminal_dist,
            q_table: q
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.is_finite().then_some(v)).collect())
                .collect(),
        })
    }
}
