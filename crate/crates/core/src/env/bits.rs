//! Prepend/append bit strings. Tokens are `k`-bit words; action `t` prepends
//! word `t` and action `V + t` appends it. From the empty string both would
//! produce the same child, so only the append actions are offered there.

use super::{ActionId, EnvSpec, State};

pub(super) fn valid_actions(env: &EnvSpec, s: &State) -> Vec<ActionId> {
    let v = env.vocab_size();
    if s.is_empty() {
        (v..2 * v).map(ActionId).collect()
    } else {
        (0..2 * v).map(ActionId).collect()
    }
}

pub(super) fn apply(env: &EnvSpec, s: &State, a: ActionId) -> State {
    let v = env.vocab_size();
    let mut tokens = Vec::with_capacity(s.len() + 1);
    if a.0 < v {
        tokens.push(a.0 as u8);
        tokens.extend_from_slice(s.tokens());
    } else {
        tokens.extend_from_slice(s.tokens());
        tokens.push((a.0 - v) as u8);
    }
    let terminal = tokens.len() == env.max_len();
    State::new(tokens, terminal)
}

pub(super) fn parents(env: &EnvSpec, s: &State) -> Vec<(State, ActionId)> {
    let v = env.vocab_size();
    let t = s.tokens();
    let l = t.len();
    let append = (State::new(t[..l - 1].to_vec(), false), ActionId(v + t[l - 1] as usize));
    if l == 1 {
        return vec![append];
    }
    let prepend = (State::new(t[1..].to_vec(), false), ActionId(t[0] as usize));
    vec![prepend, append]
}

/// Expands words into their bits, most significant first.
pub(super) fn expand(tokens: &[u8], k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len() * k);
    for &t in tokens {
        for b in (0..k).rev() {
            out.push((t >> b) & 1);
        }
    }
    out
}
