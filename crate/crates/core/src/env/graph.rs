use std::collections::{HashMap, VecDeque};

use serde_json::{json, Value};

use super::{ActionId, EnvSpec, Reward, State};
use crate::{Error, Result};

/// The full DAG of a small environment.
///
/// States are numbered in topological order: every edge goes from a lower
/// index to a higher one and index 0 is the initial state.
#[derive(Debug, Clone)]
pub struct OracleGraph {
    pub states: Vec<State>,
    pub index: HashMap<State, usize>,
    /// Outgoing edges per state, in action order.
    pub children: Vec<Vec<(ActionId, usize)>>,
    /// Incoming edges per state, one entry per `(parent, action)` pair.
    pub parents: Vec<Vec<(usize, ActionId)>>,
    /// `Some` exactly on terminal states.
    pub rewards: Vec<Option<Reward>>,
    pub action_count: usize,
}

impl OracleGraph {
    pub(super) fn build(env: &EnvSpec, cap: usize) -> Result<Self> {
        let s0 = env.initial_state();
        let mut found: Vec<State> = vec![s0.clone()];
        let mut index: HashMap<State, usize> = HashMap::from([(s0, 0)]);
        let mut raw_children: Vec<Vec<(ActionId, usize)>> = vec![Vec::new()];
        let mut queue = VecDeque::from([0usize]);

        while let Some(i) = queue.pop_front() {
            let s = found[i].clone();
            if s.is_terminal() {
                continue;
            }
            for a in env.valid_actions(&s)? {
                let child = env.apply(&s, a)?;
                let j = match index.get(&child) {
                    Some(&j) => j,
                    None => {
                        if found.len() >= cap {
                            return Err(Error::EnumerationCap { cap });
                        }
                        let j = found.len();
                        index.insert(child.clone(), j);
                        found.push(child);
                        raw_children.push(Vec::new());
                        queue.push_back(j);
                        j
                    }
                };
                raw_children[i].push((a, j));
            }
        }

        // Kahn's algorithm over edge multiplicities.
        let n = found.len();
        let mut indegree = vec![0usize; n];
        for edges in &raw_children {
            for &(_, j) in edges {
                indegree[j] += 1;
            }
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for &(_, j) in &raw_children[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidEnv("construction graph has a cycle".into()));
        }

        let mut new_id = vec![0usize; n];
        for (pos, &old) in order.iter().enumerate() {
            new_id[old] = pos;
        }
        let mut states = Vec::with_capacity(n);
        let mut children = vec![Vec::new(); n];
        let mut parents = vec![Vec::new(); n];
        let mut rewards = Vec::with_capacity(n);
        for &old in &order {
            let s = found[old].clone();
            rewards.push(if s.is_terminal() { Some(env.reward(&s)?) } else { None });
            states.push(s);
        }
        for (old, edges) in raw_children.into_iter().enumerate() {
            let i = new_id[old];
            for (a, j_old) in edges {
                let j = new_id[j_old];
                children[i].push((a, j));
                parents[j].push((i, a));
            }
        }
        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();

        Ok(Self {
            states,
            index,
            children,
            parents,
            rewards,
            action_count: env.action_count(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.rewards[i].is_some()
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_terminal(i))
    }

    pub fn id(&self, s: &State) -> Option<usize> {
        self.index.get(s).copied()
    }

    /// Index of the child reached by `a` from `i`.
    pub fn child(&self, i: usize, a: ActionId) -> Option<usize> {
        self.children[i].iter().find(|(b, _)| *b == a).map(|&(_, j)| j)
    }

    /// JSON adjacency listing for debugging.
    pub fn to_json(&self, env: &EnvSpec) -> Value {
        let nodes: Vec<Value> = (0..self.len())
            .map(|i| {
                json!({
                    "id": i,
                    "label": env.label(&self.states[i]),
                    "terminal": self.is_terminal(i),
                    "reward": self.rewards[i].map(|r| r.value),
                    "children": self.children[i].iter().map(|&(a, j)| json!([a.0, j])).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({ "schema_version": crate::SCHEMA_VERSION, "states": nodes })
    }
}
