//! Constructive-generation DAGs.
//!
//! Every environment shares one state representation: a token vector plus a
//! terminal flag. Two-doors encodes its tree as the path of choices taken
//! (`[]` is the lobby, `[0]` the left room, `[0, i]` left door `i`).

mod bits;
mod graph;
mod landscape;
mod two_doors;

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::{Error, Result};

pub use graph::OracleGraph;
pub use two_doors::{LEFT_DOORS, LEFT_REWARD, RIGHT_REWARD};

/// Default cap on the number of states `enumerate_states` will visit.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    tokens: Vec<u8>,
    terminal: bool,
}

impl State {
    pub fn new(tokens: Vec<u8>, terminal: bool) -> Self {
        Self { tokens, terminal }
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Terminal reward: the raw value `R(x)` and the scaled log `beta * ln R(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    pub log_beta: f64,
}

/// A complete construction path `s_0 -> ... -> s_T` ending in a terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<ActionId>,
    pub reward: f64,
    pub log_reward_beta: f64,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Replays `actions` from the initial state and checks every invariant.
    pub fn from_actions(env: &EnvSpec, actions: &[ActionId]) -> Result<Self> {
        let mut states = vec![env.initial_state()];
        for &a in actions {
            let next = env.apply(states.last().unwrap(), a)?;
            states.push(next);
        }
        let last = states.last().unwrap();
        if !last.is_terminal() {
            return Err(Error::NotTerminal);
        }
        let r = env.reward(last)?;
        Ok(Self {
            states,
            actions: actions.to_vec(),
            reward: r.value,
            log_reward_beta: r.log_beta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvVariant {
    TwoDoors,
    /// Bit strings grown at either end with `k`-bit words.
    PrependAppendBits { k: usize },
    StringLandscape,
}

/// Immutable description of one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    variant: EnvVariant,
    max_len: usize,
    vocab: Vec<String>,
    /// Reference set `M`, stored in the symbol alphabet used for distances
    /// (bits for the bit task, token ids for the landscape).
    references: Vec<Vec<u8>>,
    mode_edit_threshold: usize,
    beta: f64,
    reward_floor: f64,
}

impl EnvSpec {
    /// Two doors: the left one hides `LEFT_DOORS` doors of reward 1, the
    /// right one a single door of reward 100.
    pub fn two_doors(beta: f64) -> Result<Self> {
        Self::validated(Self {
            variant: EnvVariant::TwoDoors,
            max_len: 2,
            vocab: Vec::new(),
            references: Vec::new(),
            mode_edit_threshold: 0,
            beta,
            reward_floor: 1e-6,
        })
    }

    /// Prepend/append bit strings of `max_len` words of `k` bits each.
    /// `references` are full-length bit strings over `{'0','1'}`.
    pub fn prepend_append_bits(
        max_len: usize,
        k: usize,
        references: &[String],
        mode_edit_threshold: usize,
        beta: f64,
        reward_floor: f64,
    ) -> Result<Self> {
        if k == 0 || k > 8 {
            return Err(Error::InvalidEnv(format!("word size k={k} must be in 1..=8")));
        }
        let vocab = (0..1usize << k).map(|w| format!("{w:0k$b}")).collect();
        let references = references
            .iter()
            .map(|r| {
                r.chars()
                    .map(|c| match c {
                        '0' => Ok(0u8),
                        '1' => Ok(1u8),
                        _ => Err(Error::InvalidEnv(format!("reference {r:?} is not a bit string"))),
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::validated(Self {
            variant: EnvVariant::PrependAppendBits { k },
            max_len,
            vocab,
            references,
            mode_edit_threshold,
            beta,
            reward_floor,
        })
    }

    /// Variable-length strings over `alphabet`, grown by appending, with a
    /// stop action available from length 1.
    pub fn string_landscape(
        alphabet: &str,
        max_len: usize,
        references: &[String],
        mode_edit_threshold: usize,
        beta: f64,
        reward_floor: f64,
    ) -> Result<Self> {
        let vocab: Vec<String> = alphabet.chars().map(String::from).collect();
        let mut seen = std::collections::HashSet::new();
        if !vocab.iter().all(|c| seen.insert(c.clone())) {
            return Err(Error::InvalidEnv(format!("alphabet {alphabet:?} repeats a symbol")));
        }
        let references = references
            .iter()
            .map(|r| {
                r.chars()
                    .map(|c| {
                        vocab
                            .iter()
                            .position(|v| v.starts_with(c))
                            .map(|i| i as u8)
                            .ok_or_else(|| {
                                Error::InvalidEnv(format!("reference {r:?} uses a symbol outside {alphabet:?}"))
                            })
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::validated(Self {
            variant: EnvVariant::StringLandscape,
            max_len,
            vocab,
            references,
            mode_edit_threshold,
            beta,
            reward_floor,
        })
    }

    /// Re-checks the invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.clone().validated().map(|_| ())
    }

    fn validated(self) -> Result<Self> {
        if self.max_len == 0 {
            return Err(Error::InvalidEnv("max_len must be positive".into()));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::InvalidEnv(format!("beta={} must be a finite value >= 1", self.beta)));
        }
        if !(self.reward_floor > 0.0) {
            return Err(Error::InvalidEnv("reward_floor must be positive".into()));
        }
        if self.variant != EnvVariant::TwoDoors {
            if self.vocab.is_empty() {
                return Err(Error::InvalidEnv("vocabulary is empty".into()));
            }
            if self.vocab.len() > 128 {
                return Err(Error::InvalidEnv("vocabulary larger than 128 tokens".into()));
            }
            if self.references.is_empty() {
                return Err(Error::InvalidEnv("reference set is empty".into()));
            }
            let full = self.symbol_len();
            if let Some(r) = self.references.iter().find(|r| r.len() != full) {
                return Err(Error::InvalidEnv(format!(
                    "reference of length {} does not have the full length {full}",
                    r.len()
                )));
            }
            if self.mode_edit_threshold >= full {
                return Err(Error::InvalidEnv(format!(
                    "mode edit threshold {} must be below the object length {full}",
                    self.mode_edit_threshold
                )));
            }
        }
        Ok(self)
    }

    pub fn variant(&self) -> &EnvVariant {
        &self.variant
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn references(&self) -> &[Vec<u8>] {
        &self.references
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn reward_floor(&self) -> f64 {
        self.reward_floor
    }

    pub fn mode_edit_threshold(&self) -> usize {
        self.mode_edit_threshold
    }

    /// Length of a full object in the distance alphabet (`n` in the reward).
    pub fn symbol_len(&self) -> usize {
        match self.variant {
            EnvVariant::TwoDoors => self.max_len,
            EnvVariant::PrependAppendBits { k } => self.max_len * k,
            EnvVariant::StringLandscape => self.max_len,
        }
    }

    /// Width of the policy / Q output heads.
    pub fn action_count(&self) -> usize {
        match self.variant {
            EnvVariant::TwoDoors => LEFT_DOORS,
            EnvVariant::PrependAppendBits { .. } => 2 * self.vocab.len(),
            EnvVariant::StringLandscape => self.vocab.len() + 1,
        }
    }

    /// Longest possible trajectory, counted in transitions.
    pub fn max_trajectory_len(&self) -> usize {
        match self.variant {
            EnvVariant::TwoDoors => 2,
            EnvVariant::PrependAppendBits { .. } => self.max_len,
            EnvVariant::StringLandscape => self.max_len + 1,
        }
    }

    /// Smallest reward `R` at or above which an object can count as a mode:
    /// `e^{1 - delta/n}` for the sequence tasks, the big door for two-doors.
    pub fn default_mode_reward_threshold(&self) -> f64 {
        match self.variant {
            EnvVariant::TwoDoors => RIGHT_REWARD,
            _ => (1.0 - self.mode_edit_threshold as f64 / self.symbol_len() as f64).exp(),
        }
    }

    /// Number of actions on any path from the initial state to `s`.
    pub fn depth(&self, s: &State) -> usize {
        match self.variant {
            EnvVariant::StringLandscape => s.len() + usize::from(s.is_terminal()),
            _ => s.len(),
        }
    }

    pub fn initial_state(&self) -> State {
        State::new(Vec::new(), false)
    }

    pub fn valid_actions(&self, s: &State) -> Result<Vec<ActionId>> {
        if s.is_terminal() {
            return Err(Error::TerminalState("valid_actions"));
        }
        Ok(match self.variant {
            EnvVariant::TwoDoors => two_doors::valid_actions(s),
            EnvVariant::PrependAppendBits { .. } => bits::valid_actions(self, s),
            EnvVariant::StringLandscape => landscape::valid_actions(self, s),
        })
    }

    /// Boolean mask over `0..action_count()`.
    pub fn valid_mask(&self, s: &State) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.action_count()];
        for a in self.valid_actions(s)? {
            mask[a.0] = true;
        }
        Ok(mask)
    }

    pub fn apply(&self, s: &State, a: ActionId) -> Result<State> {
        if !self.valid_actions(s)?.contains(&a) {
            return Err(Error::InvalidAction { action: a.0, state: self.label(s) });
        }
        Ok(match self.variant {
            EnvVariant::TwoDoors => two_doors::apply(s, a),
            EnvVariant::PrependAppendBits { .. } => bits::apply(self, s, a),
            EnvVariant::StringLandscape => landscape::apply(self, s, a),
        })
    }

    /// All `(parent, action)` edges entering `s`.
    pub fn parents(&self, s: &State) -> Result<Vec<(State, ActionId)>> {
        if *s == self.initial_state() {
            return Err(Error::InitialState);
        }
        Ok(match self.variant {
            EnvVariant::TwoDoors => two_doors::parents(s),
            EnvVariant::PrependAppendBits { .. } => bits::parents(self, s),
            EnvVariant::StringLandscape => landscape::parents(self, s),
        })
    }

    /// `parents(s).len()` without allocating; 0 for the initial state.
    pub fn parent_edge_count(&self, s: &State) -> usize {
        if s.is_empty() && !s.is_terminal() {
            return 0;
        }
        match self.variant {
            EnvVariant::TwoDoors | EnvVariant::StringLandscape => 1,
            EnvVariant::PrependAppendBits { .. } => {
                if s.len() >= 2 {
                    2
                } else {
                    1
                }
            }
        }
    }

    pub fn reward(&self, s: &State) -> Result<Reward> {
        if !s.is_terminal() {
            return Err(Error::NotTerminal);
        }
        let raw = match self.variant {
            EnvVariant::TwoDoors => two_doors::reward(s),
            _ => {
                let n = self.symbol_len() as f64;
                let x = self.object_symbols(s);
                let d = self
                    .references
                    .iter()
                    .map(|y| edit_distance(&x, y))
                    .min()
                    .expect("validated non-empty reference set");
                (1.0 - d as f64 / n).exp()
            }
        };
        let value = raw.max(self.reward_floor);
        Ok(Reward { value, log_beta: self.beta * value.ln() })
    }

    /// The finished object in the alphabet used for edit distances.
    pub fn object_symbols(&self, s: &State) -> Vec<u8> {
        match self.variant {
            EnvVariant::PrependAppendBits { k } => bits::expand(s.tokens(), k),
            _ => s.tokens().to_vec(),
        }
    }

    pub fn encoding_width(&self) -> usize {
        match self.variant {
            EnvVariant::TwoDoors => two_doors::NODE_COUNT + 1,
            _ => self.max_len * self.vocab.len() + (self.max_len + 1) + 1,
        }
    }

    pub fn encode(&self, s: &State) -> StateEncoding {
        let mut v = vec![0.0; self.encoding_width()];
        self.encode_into(s, &mut v);
        StateEncoding(v)
    }

    /// Writes the encoding of `s` into `out` (length `encoding_width()`).
    pub fn encode_into(&self, s: &State, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.encoding_width());
        out.iter_mut().for_each(|x| *x = 0.0);
        match self.variant {
            EnvVariant::TwoDoors => {
                out[two_doors::node_index(s)] = 1.0;
            }
            _ => {
                let v = self.vocab.len();
                for (i, &t) in s.tokens().iter().enumerate() {
                    out[i * v + t as usize] = 1.0;
                }
                out[self.max_len * v + s.len()] = 1.0;
            }
        }
        if s.is_terminal() {
            *out.last_mut().unwrap() = 1.0;
        }
    }

    /// Human-readable rendering, used in JSON dumps and error messages.
    pub fn label(&self, s: &State) -> String {
        let body = match self.variant {
            EnvVariant::TwoDoors => two_doors::label(s),
            _ => s.tokens().iter().map(|&t| self.vocab[t as usize].as_str()).collect(),
        };
        match (&self.variant, s.is_terminal()) {
            (EnvVariant::StringLandscape, true) => format!("{body}$"),
            _ => body,
        }
    }

    /// Exhaustive DAG with states numbered in topological order.
    pub fn enumerate_states(&self, cap: usize) -> Result<OracleGraph> {
        OracleGraph::build(self, cap)
    }
}

/// Fixed-width network input for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoding(pub Vec<f64>);

/// Levenshtein distance over symbol slices.
pub fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    strsim::generic_levenshtein(&a.to_vec(), &b.to_vec())
}
