use super::{ActionId, State};

pub const LEFT_DOORS: usize = 100;
pub const LEFT_REWARD: f64 = 1.0;
pub const RIGHT_REWARD: f64 = 100.0;

const LEFT: u8 = 0;
const RIGHT: u8 = 1;

/// Lobby, two rooms, `LEFT_DOORS` left leaves and one right leaf.
pub(super) const NODE_COUNT: usize = 3 + LEFT_DOORS + 1;

pub(super) fn valid_actions(s: &State) -> Vec<ActionId> {
    match s.tokens() {
        [] => vec![ActionId(LEFT as usize), ActionId(RIGHT as usize)],
        [LEFT] => (0..LEFT_DOORS).map(ActionId).collect(),
        [RIGHT] => vec![ActionId(0)],
        _ => unreachable!("two-doors state deeper than two steps is terminal"),
    }
}

pub(super) fn apply(s: &State, a: ActionId) -> State {
    let mut tokens = s.tokens().to_vec();
    tokens.push(a.0 as u8);
    let terminal = tokens.len() == 2;
    State::new(tokens, terminal)
}

pub(super) fn parents(s: &State) -> Vec<(State, ActionId)> {
    let t = s.tokens();
    let parent = State::new(t[..t.len() - 1].to_vec(), false);
    vec![(parent, ActionId(t[t.len() - 1] as usize))]
}

pub(super) fn reward(s: &State) -> f64 {
    match s.tokens() {
        [RIGHT, _] => RIGHT_REWARD,
        _ => LEFT_REWARD,
    }
}

pub(super) fn node_index(s: &State) -> usize {
    match s.tokens() {
        [] => 0,
        [r] => 1 + *r as usize,
        [LEFT, d] => 3 + *d as usize,
        _ => 3 + LEFT_DOORS,
    }
}

pub(super) fn label(s: &State) -> String {
    match s.tokens() {
        [] => "lobby".into(),
        [LEFT] => "left".into(),
        [_] => "right".into(),
        [LEFT, d] => format!("left/door{d}"),
        [_, d] => format!("right/door{d}"),
        _ => unreachable!(),
    }
}
