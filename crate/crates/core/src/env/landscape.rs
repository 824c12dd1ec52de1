//! Append-only strings with an explicit stop action (index `V`), allowed from
//! length 1. A full-length string still needs the stop step to terminate.

use super::{ActionId, EnvSpec, State};

pub(super) fn valid_actions(env: &EnvSpec, s: &State) -> Vec<ActionId> {
    let v = env.vocab_size();
    let appends = if s.len() < env.max_len() { v } else { 0 };
    let mut out: Vec<ActionId> = (0..appends).map(ActionId).collect();
    if !s.is_empty() {
        out.push(ActionId(v));
    }
    out
}

pub(super) fn apply(env: &EnvSpec, s: &State, a: ActionId) -> State {
    if a.0 == env.vocab_size() {
        return State::new(s.tokens().to_vec(), true);
    }
    let mut tokens = s.tokens().to_vec();
    tokens.push(a.0 as u8);
    State::new(tokens, false)
}

pub(super) fn parents(env: &EnvSpec, s: &State) -> Vec<(State, ActionId)> {
    if s.is_terminal() {
        return vec![(State::new(s.tokens().to_vec(), false), ActionId(env.vocab_size()))];
    }
    let t = s.tokens();
    vec![(State::new(t[..t.len() - 1].to_vec(), false), ActionId(t[t.len() - 1] as usize))]
}
