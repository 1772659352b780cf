//! Synthetic episodic captioning MDPs with exact oracles.
//!
//! A [`SimMdp`] is a finite MDP whose actions are sentence tokens: taking
//! the action "emit token of state X" moves to X, and arriving at X yields
//! X's reward. The state after any committed prefix is therefore identified
//! by the last sentence alone, which is exactly the state abstraction the
//! value model uses. [`sim_as_providers`] binds an MDP to the backend
//! traits: the policy provider samples tokens from a softmax over
//! reward-proportional logits, and the embedding provider is constructed so
//! that the cosine reward of (token, image) reproduces the MDP's reward to
//! float precision. Every higher module can then be tested against
//! [`dp_values`], an exact finite-horizon dynamic program.
//!
//! Trap MDPs ([`make_trap_mdp`]) are the adversarial case: the action with
//! the highest immediate reward is strictly worse in discounted return than
//! a lower-reward alternative, so a myopic scorer provably picks the wrong
//! branch while an exact (or well-trained) value scorer does not.

use std::collections::BTreeMap;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    Decode, Embedding, EmbeddingProvider, GenerationRequest, ImageRef, PolicyProvider,
    ProviderError,
};

pub const ROOT: usize = 0;

/// Default dimension of the simulated embedding space (each half).
pub const SIM_EMBED_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid mdp: {0}")]
    Invalid(String),
    #[error("unknown sentence token {0:?}")]
    UnknownToken(String),
    #[error("operation requires a deterministic transition kernel")]
    NotDeterministic,
}

/// One (destination, probability) pair of an action's outcome distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Outcome {
    pub state: usize,
    pub prob: f64,
}

/// An available action. For deterministic kernels (the only kind the
/// provider binding accepts) there is a single outcome and the action's
/// sentence token is the destination state's token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub outcomes: Vec<Outcome>,
}

impl Edge {
    pub fn to(state: usize) -> Self {
        Edge {
            outcomes: vec![Outcome { state, prob: 1.0 }],
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.outcomes.len() == 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    /// Sentence emitted when this state is entered; empty only for the root.
    pub token: String,
    /// Reward received at this state (the process reward of its sentence).
    pub reward: f64,
    pub terminal: bool,
    pub edges: Vec<Edge>,
}

/// Finite episodic MDP over sentence tokens. State 0 is the root (prompt +
/// image, no sentence yet); every other state carries a unique token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimMdp {
    pub image_id: String,
    pub gamma: f64,
    pub horizon: usize,
    /// Policy logits are `logit_scale * expected immediate reward` per edge.
    pub logit_scale: f64,
    pub states: Vec<SimState>,
}

impl SimMdp {
    /// Structural invariants: row sums, absorbing terminals, unique tokens,
    /// rewards within [-1, 1], horizon >= 1.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.states.is_empty() {
            return Err(SimError::Invalid("no states".into()));
        }
        if self.horizon < 1 {
            return Err(SimError::Invalid("horizon must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SimError::Invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !self.states[ROOT].token.is_empty() {
            return Err(SimError::Invalid("root state must carry no token".into()));
        }
        let mut seen = BTreeMap::new();
        for (i, s) in self.states.iter().enumerate() {
            if s.reward.abs() > 1.0 + 1e-9 {
                return Err(SimError::Invalid(format!("state {i} reward {} outside [-1, 1]", s.reward)));
            }
            if i != ROOT {
                if s.token.trim().is_empty() {
                    return Err(SimError::Invalid(format!("state {i} has an empty token")));
                }
                if let Some(prev) = seen.insert(s.token.clone(), i) {
                    return Err(SimError::Invalid(format!(
                        "token {:?} shared by states {prev} and {i}",
                        s.token
                    )));
                }
            }
            if s.terminal && !s.edges.is_empty() {
                return Err(SimError::Invalid(format!("terminal state {i} has outgoing edges")));
            }
            if !s.terminal && s.edges.is_empty() {
                return Err(SimError::Invalid(format!("non-terminal state {i} has no edges")));
            }
            for (e, edge) in s.edges.iter().enumerate() {
                let sum: f64 = edge.outcomes.iter().map(|o| o.prob).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(SimError::Invalid(format!(
                        "state {i} edge {e} outcome probabilities sum to {sum}"
                    )));
                }
                for o in &edge.outcomes {
                    if o.state >= self.states.len() {
                        return Err(SimError::Invalid(format!("state {i} edge {e} points past the state set")));
                    }
                    if o.prob < 0.0 {
                        return Err(SimError::Invalid("negative outcome probability".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.states
            .iter()
            .flat_map(|s| &s.edges)
            .all(Edge::is_deterministic)
    }

    pub fn image(&self) -> ImageRef {
        ImageRef::SimId(self.image_id.clone())
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Indices of all token-carrying (non-root) states.
    pub fn token_states(&self) -> Vec<usize> {
        (1..self.states.len()).collect()
    }

    pub fn token_of(&self, state: usize) -> &str {
        &self.states[state].token
    }

    pub fn state_reward(&self, state: usize) -> f64 {
        self.states[state].reward
    }

    pub fn is_terminal_state(&self, state: usize) -> bool {
        self.states[state].terminal
    }

    pub fn find_token(&self, sentence: &str) -> Option<usize> {
        let needle = sentence.trim();
        (1..self.states.len()).find(|&i| self.states[i].token == needle)
    }

    /// Expected immediate reward of taking `edge` (the reward of the state
    /// it enters, averaged over outcomes).
    pub fn edge_reward(&self, state: usize, edge: usize) -> f64 {
        self.states[state].edges[edge]
            .outcomes
            .iter()
            .map(|o| o.prob * self.states[o.state].reward)
            .sum()
    }

    /// Policy logits over the edges of `state`.
    pub fn logits(&self, state: usize) -> Vec<f64> {
        (0..self.states[state].edges.len())
            .map(|e| self.logit_scale * self.edge_reward(state, e))
            .collect()
    }

    /// First-max argmax over edge logits: the greedy action.
    pub fn greedy_edge(&self, state: usize) -> usize {
        argmax_first(&self.logits(state))
    }

    pub fn softmax_probs(&self, state: usize, temperature: f64) -> Vec<f64> {
        softmax(&self.logits(state), temperature)
    }

    /// Stable content hash of the reward table, for distinctness checks.
    pub fn reward_table_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, s) in self.states.iter().enumerate() {
            i.hash(&mut h);
            s.reward.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Myopic versus far-sighted choice at the root:
    /// `(argmax-immediate edge, argmax-optimal-value edge)`.
    pub fn root_separation(&self) -> (usize, usize) {
        let values = dp_values(self, None);
        let immediate: Vec<f64> = (0..self.states[ROOT].edges.len())
            .map(|e| self.edge_reward(ROOT, e))
            .collect();
        let long_term: Vec<f64> = self.states[ROOT]
            .edges
            .iter()
            .map(|edge| edge.outcomes.iter().map(|o| o.prob * values[o.state]).sum())
            .collect();
        (argmax_first(&immediate), argmax_first(&long_term))
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax with max-subtraction; temperatures at or near zero collapse to
/// the argmax.
fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-12);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Exact dynamic programming
// ---------------------------------------------------------------------------

/// Policy under which on-policy values are computed.
#[derive(Debug, Clone, Copy)]
pub enum DpPolicy {
    Uniform,
    Softmax { temperature: f64 },
}

impl DpPolicy {
    fn probs(&self, mdp: &SimMdp, state: usize) -> Vec<f64> {
        match self {
            DpPolicy::Uniform => {
                let n = mdp.states[state].edges.len();
                vec![1.0 / n as f64; n]
            }
            DpPolicy::Softmax { temperature } => mdp.softmax_probs(state, *temperature),
        }
    }
}

/// Exact finite-horizon values by backward induction.
///
/// `V(s)` is the discounted return collected from `s` onwards, including
/// `s`'s own reward: `V(s) = r(s)` for terminal states, otherwise
/// `V(s) = r(s) + gamma * agg_e sum_o p(o) V(o)`, where `agg` is the max
/// over edges (optimal values, `policy = None`) or the policy-weighted
/// average (on-policy values). The induction runs `horizon` steps, so at
/// most `horizon` transitions contribute.
pub fn dp_values(mdp: &SimMdp, policy: Option<&DpPolicy>) -> Vec<f64> {
    let n = mdp.states.len();
    let mut values: Vec<f64> = mdp.states.iter().map(|s| s.reward).collect();
    for _ in 0..mdp.horizon {
        let mut next = vec![0.0; n];
        for (i, s) in mdp.states.iter().enumerate() {
            if s.terminal {
                next[i] = s.reward;
                continue;
            }
            let continuations: Vec<f64> = s
                .edges
                .iter()
                .map(|e| e.outcomes.iter().map(|o| o.prob * values[o.state]).sum())
                .collect();
            let agg = match policy {
                None => continuations.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Some(p) => {
                    let probs = p.probs(mdp, i);
                    continuations.iter().zip(&probs).map(|(c, q)| c * q).sum()
                }
            };
            next[i] = s.reward + mdp.gamma * agg;
        }
        values = next;
    }
    values
}

/// Max Bellman residual of `values` under the same recursion `dp_values`
/// uses. Zero (to float precision) at the fixed point of an episodic MDP.
pub fn bellman_residual(mdp: &SimMdp, values: &[f64], policy: Option<&DpPolicy>) -> f64 {
    let mut worst = 0.0f64;
    for (i, s) in mdp.states.iter().enumerate() {
        let expected = if s.terminal {
            s.reward
        } else {
            let continuations: Vec<f64> = s
                .edges
                .iter()
                .map(|e| e.outcomes.iter().map(|o| o.prob * values[o.state]).sum())
                .collect();
            let agg = match policy {
                None => continuations.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Some(p) => {
                    let probs = p.probs(mdp, i);
                    continuations.iter().zip(&probs).map(|(c, q)| c * q).sum()
                }
            };
            s.reward + mdp.gamma * agg
        };
        worst = worst.max((values[i] - expected).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub state: usize,
    /// Edge taken from `state`; `None` on the final (terminal) row.
    pub action: Option<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct SimEpisode {
    pub start: usize,
    pub steps: Vec<EpisodeStep>,
    pub gamma: f64,
    pub total_return: f64,
}

impl SimEpisode {
    /// Recomputes the discounted return from the raw triples.
    pub fn recompute_return(&self) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| self.gamma.powi(t as i32) * s.reward)
            .sum()
    }
}

/// Behavior policies for episode sampling. Round-robin cycles each state's
/// edges deterministically, giving full-support exploration with empirical
/// action frequencies within 1/visits of uniform.
pub enum SamplePolicy {
    Greedy,
    Softmax { temperature: f64 },
    RoundRobin { counters: Vec<usize> },
}

impl SamplePolicy {
    pub fn round_robin(mdp: &SimMdp) -> Self {
        SamplePolicy::RoundRobin {
            counters: vec![0; mdp.n_states()],
        }
    }

    fn pick(&mut self, mdp: &SimMdp, state: usize, rng: &mut ChaCha8Rng) -> usize {
        match self {
            SamplePolicy::Greedy => mdp.greedy_edge(state),
            SamplePolicy::Softmax { temperature } => {
                sample_index(&mdp.softmax_probs(state, *temperature), rng)
            }
            SamplePolicy::RoundRobin { counters } => {
                let n = mdp.states[state].edges.len();
                let e = counters[state] % n;
                counters[state] += 1;
                e
            }
        }
    }
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_outcome(edge: &Edge, rng: &mut ChaCha8Rng) -> usize {
    if edge.outcomes.len() == 1 {
        return edge.outcomes[0].state;
    }
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for o in &edge.outcomes {
        acc += o.prob;
        if draw < acc {
            return o.state;
        }
    }
    edge.outcomes.last().unwrap().state
}

/// Samples one episode from `start`, stopping at a terminal state or after
/// `horizon` transitions.
pub fn sample_episode(
    mdp: &SimMdp,
    start: usize,
    policy: &mut SamplePolicy,
    rng: &mut ChaCha8Rng,
) -> SimEpisode {
    let mut steps = Vec::new();
    let mut state = start;
    for _ in 0..mdp.horizon {
        if mdp.states[state].terminal {
            break;
        }
        let edge = policy.pick(mdp, state, rng);
        let next = sample_outcome(&mdp.states[state].edges[edge], rng);
        steps.push(EpisodeStep {
            state,
            action: Some(edge),
            reward: mdp.states[state].reward,
        });
        state = next;
    }
    steps.push(EpisodeStep {
        state,
        action: None,
        reward: mdp.states[state].reward,
    });
    let mut ep = SimEpisode {
        start,
        steps,
        gamma: mdp.gamma,
        total_return: 0.0,
    };
    ep.total_return = ep.recompute_return();
    ep
}

/// `n` root-started episodes under the deterministic round-robin policy.
/// Requires a deterministic kernel so the whole batch is a pure function
/// of the MDP.
pub fn round_robin_episodes(mdp: &SimMdp, n: usize) -> Result<Vec<SimEpisode>, SimError> {
    if !mdp.is_deterministic() {
        return Err(SimError::NotDeterministic);
    }
    let mut policy = SamplePolicy::round_robin(mdp);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // never consulted: deterministic kernel + round robin
    Ok((0..n)
        .map(|_| sample_episode(mdp, ROOT, &mut policy, &mut rng))
        .collect())
}

/// TD-style transitions of an episode, anchored at token states (the root
/// row is skipped — it carries no sentence). Yields
/// `(state, reward, next-state)` with `next = None` exactly when the
/// episode ended at a terminal state; a horizon-truncated open tail is
/// dropped rather than mislabeled as terminal.
pub fn episode_transitions(mdp: &SimMdp, ep: &SimEpisode) -> Vec<(usize, f64, Option<usize>)> {
    let rows: Vec<usize> = ep.steps.iter().map(|s| s.state).collect();
    let mut out = Vec::new();
    for i in 0..rows.len() {
        if rows[i] == ROOT {
            continue;
        }
        if let Some(&next) = rows.get(i + 1) {
            out.push((rows[i], mdp.state_reward(rows[i]), Some(next)));
        } else if mdp.is_terminal_state(rows[i]) {
            out.push((rows[i], mdp.state_reward(rows[i]), None));
        }
    }
    out
}

/// Discounted return of a committed response: the first sentence's state
/// reward undiscounted, each later sentence discounted one more power of
/// gamma. This is the quantity guided search maximizes on the simulator.
pub fn evaluate_response(mdp: &SimMdp, sentences: &[String]) -> Result<f64, SimError> {
    let mut total = 0.0;
    for (i, sentence) in sentences.iter().enumerate() {
        let state = mdp
            .find_token(sentence)
            .ok_or_else(|| SimError::UnknownToken(sentence.clone()))?;
        total += mdp.gamma.powi(i as i32) * mdp.state_reward(state);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Constructors
// ---------------------------------------------------------------------------

const ADJECTIVES: [&str; 20] = [
    "amber", "quiet", "vivid", "rustic", "silver", "mossy", "crimson", "golden", "shaded",
    "breezy", "pale", "stony", "misty", "bright", "dusky", "velvet", "coral", "ashen", "frosted",
    "lively",
];
const NOUNS: [&str; 20] = [
    "harbor", "lantern", "meadow", "falcon", "orchid", "glacier", "violin", "compass", "thicket",
    "beacon", "saddle", "quarry", "marble", "willow", "canyon", "ember", "prairie", "anchor",
    "bramble", "summit",
];

fn token_for(index: usize) -> String {
    format!(
        "The {} {} appears.",
        ADJECTIVES[(index - 1) % 20],
        NOUNS[((index - 1) / 20) % 20]
    )
}

fn root_state() -> SimState {
    SimState {
        token: String::new(),
        reward: 0.0,
        terminal: false,
        edges: Vec::new(),
    }
}

fn token_state(index: usize, reward: f64, terminal: bool) -> SimState {
    SimState {
        token: token_for(index),
        reward,
        terminal,
        edges: Vec::new(),
    }
}

/// The worked trap: from the root, action a enters a terminal state with
/// reward 0.9 (no future), action b enters reward 0.5 followed by a forced
/// 0.8 terminal. At gamma 0.9 the myopic pick is worth 0.9, the far-sighted
/// pick 0.5 + 0.9*0.8 = 1.22.
pub fn canonical_trap_mdp() -> SimMdp {
    let mut states = vec![root_state()];
    states.push(token_state(1, 0.9, true)); // trap
    states.push(token_state(2, 0.5, false)); // patient
    states.push(token_state(3, 0.8, true)); // payoff
    states[ROOT].edges = vec![Edge::to(1), Edge::to(2)];
    states[2].edges = vec![Edge::to(3)];
    let mdp = SimMdp {
        image_id: "trap-canonical".into(),
        gamma: 0.9,
        horizon: 8,
        logit_scale: 1.0,
        states,
    };
    mdp.validate().expect("canonical trap is well-formed");
    mdp
}

/// Seeded trap MDP: the max-immediate-reward root action is strictly worse
/// in optimal discounted return than a lower-immediate alternative, with a
/// margin of at least 0.1. Branching happens only at the root; every other
/// state is a forced chain, so realized search returns equal the optimal
/// value of the root choice. Verified by [`dp_values`] before returning.
pub fn make_trap_mdp(seed: u64) -> SimMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7261_7054)); // "traP"
    for _attempt in 0..200 {
        let branches = rng.gen_range(2..=4usize);
        let tail_len = rng.gen_range(1..=3usize);

        let r_trap = rng.gen_range(0.75..0.95);
        let r_patient = rng.gen_range(0.35..0.60);
        let mut rewards = vec![r_trap, r_patient];
        for _ in 2..branches {
            rewards.push(rng.gen_range(-0.20..0.25));
        }
        let tail: Vec<f64> = (0..tail_len).map(|_| rng.gen_range(0.65..0.90)).collect();

        // Distinct rewards keep greedy argmax and score rankings unambiguous.
        let mut all = rewards.clone();
        all.extend(&tail);
        let distinct = all
            .iter()
            .enumerate()
            .all(|(i, a)| all.iter().skip(i + 1).all(|b| (a - b).abs() >= 0.02));
        if !distinct {
            continue;
        }

        let mut states = vec![root_state()];
        for (b, &r) in rewards.iter().enumerate() {
            // branch states: trap and fillers terminal, patient chains on
            let terminal = b != 1;
            states.push(token_state(states.len(), r, terminal));
        }
        let patient_idx = 2;
        let mut prev = patient_idx;
        for (t, &r) in tail.iter().enumerate() {
            let terminal = t + 1 == tail.len();
            let idx = states.len();
            states.push(token_state(idx, r, terminal));
            states[prev].edges = vec![Edge::to(idx)];
            prev = idx;
        }
        states[ROOT].edges = (1..=branches).map(Edge::to).collect();

        let mdp = SimMdp {
            image_id: format!("trap-img-{seed}"),
            gamma: 0.9,
            horizon: 8,
            logit_scale: 1.0,
            states,
        };
        mdp.validate().expect("trap construction is well-formed");

        let values = dp_values(&mdp, None);
        let (myopic, far) = mdp.root_separation();
        let trap_edge = 0; // edge order mirrors `rewards`
        let patient_edge = 1;
        let separated = myopic == trap_edge
            && far == patient_edge
            && values[patient_idx] >= values[1] + 0.1;
        if separated {
            return mdp;
        }
    }
    unreachable!("trap parameterization failed to separate after 200 attempts");
}

/// Chain of `len` token states hanging off the root; only the final
/// (terminal) state carries a reward. Optimal and on-policy values coincide
/// and follow the closed form `terminal_reward * gamma^(distance to end)`.
pub fn make_chain_mdp(len: usize, terminal_reward: f64, gamma: f64) -> SimMdp {
    assert!(len >= 1);
    let mut states = vec![root_state()];
    for i in 1..=len {
        states.push(token_state(i, if i == len { terminal_reward } else { 0.0 }, i == len));
    }
    for (i, state) in states.iter_mut().enumerate().take(len) {
        state.edges = vec![Edge::to(i + 1)];
    }
    let mdp = SimMdp {
        image_id: format!("chain-img-{len}"),
        gamma,
        horizon: len + 2,
        logit_scale: 1.0,
        states,
    };
    mdp.validate().expect("chain is well-formed");
    mdp
}

/// Seeded layered DAG with branching throughout: 2-4 token layers, every
/// state reachable from the root, globally distinct rewards, all paths
/// terminating within the horizon. Deterministic kernel, so it binds to
/// providers.
pub fn make_random_mdp(seed: u64, max_states: usize) -> SimMdp {
    assert!(max_states >= 8, "random mdps need at least 8 states of room");
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x646_7261)); // "rand"
    let n_layers = rng.gen_range(2..=4usize);
    let mut sizes = Vec::new();
    let mut budget = (max_states - 1).min(19);
    for l in 0..n_layers {
        let reserve = n_layers - l - 1; // one state for each later layer
        let avail = budget.saturating_sub(reserve);
        let floor = if l == 0 { 2 } else { 1 };
        let cap = avail.clamp(floor, 4);
        let size = rng.gen_range(floor..=cap);
        sizes.push(size);
        budget = budget.saturating_sub(size);
    }

    let total_tokens: usize = sizes.iter().sum();
    // Globally distinct rewards with a minimum gap keep every argmax strict.
    let rewards = distinct_rewards(total_tokens, -0.5, 0.95, 0.02, &mut rng);

    let mut states = vec![root_state()];
    let mut layer_ranges = Vec::new();
    let mut next_reward = rewards.into_iter();
    for (l, &size) in sizes.iter().enumerate() {
        let start = states.len();
        for _ in 0..size {
            let idx = states.len();
            states.push(token_state(idx, next_reward.next().unwrap(), l + 1 == sizes.len()));
        }
        layer_ranges.push(start..states.len());
    }

    // Edges: sources pick 1-3 targets in the next layer, then uncovered
    // targets get a covering edge so everything is reachable.
    let mut sources: Vec<usize> = vec![ROOT];
    for range in &layer_ranges {
        let targets: Vec<usize> = range.clone().collect();
        let mut covered = vec![false; targets.len()];
        for &src in &sources {
            let k = rng.gen_range(1..=targets.len().min(3));
            let mut picked = Vec::new();
            while picked.len() < k {
                let t = rng.gen_range(0..targets.len());
                if !picked.contains(&t) {
                    picked.push(t);
                }
            }
            picked.sort_unstable();
            states[src].edges = picked.iter().map(|&t| Edge::to(targets[t])).collect();
            for &t in &picked {
                covered[t] = true;
            }
        }
        for (t, &done) in covered.iter().enumerate() {
            if !done {
                let src = sources[rng.gen_range(0..sources.len())];
                states[src].edges.push(Edge::to(targets[t]));
            }
        }
        sources = targets;
    }

    let mdp = SimMdp {
        image_id: format!("rand-img-{seed}"),
        gamma: 0.9,
        horizon: n_layers + 3,
        logit_scale: 1.0,
        states,
    };
    mdp.validate().expect("random layered mdp is well-formed");
    mdp
}

/// Seeded MDP with genuinely stochastic transitions (and possibly cycles),
/// for dynamic-programming versus Monte Carlo cross-checks. Not bindable to
/// providers.
pub fn make_random_stochastic_mdp(seed: u64) -> SimMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x73_746f63)); // "stoc"
    let n_tokens = 9;
    let mut states = vec![root_state()];
    for i in 1..=n_tokens {
        let terminal = i > n_tokens - 3;
        states.push(token_state(i, rng.gen_range(-0.9..0.9), terminal));
    }
    let n = states.len();
    for state in states.iter_mut() {
        if state.terminal {
            continue;
        }
        let n_edges = rng.gen_range(1..=3usize);
        let mut edges = Vec::new();
        for _ in 0..n_edges {
            let n_outcomes = rng.gen_range(1..=3usize);
            let mut targets = Vec::new();
            while targets.len() < n_outcomes {
                let t = rng.gen_range(1..n);
                if !targets.contains(&t) {
                    targets.push(t);
                }
            }
            let mut weights: Vec<f64> = (0..n_outcomes).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            // Exact row normalization: fold rounding into the last entry.
            let head: f64 = weights[..n_outcomes - 1].iter().sum();
            weights[n_outcomes - 1] = 1.0 - head;
            edges.push(Edge {
                outcomes: targets
                    .into_iter()
                    .zip(weights)
                    .map(|(state, prob)| Outcome { state, prob })
                    .collect(),
            });
        }
        state.edges = edges;
    }
    let mdp = SimMdp {
        image_id: format!("stoc-img-{seed}"),
        gamma: 0.9,
        horizon: 12,
        logit_scale: 1.0,
        states,
    };
    mdp.validate().expect("stochastic mdp is well-formed");
    mdp
}

fn distinct_rewards(n: usize, lo: f64, hi: f64, gap: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    'outer: for _ in 0..100_000 {
        let candidate = rng.gen_range(lo..hi);
        for existing in &out {
            if (existing - candidate).abs() < gap {
                continue 'outer;
            }
        }
        out.push(candidate);
        if out.len() == n {
            return out;
        }
    }
    panic!("could not draw {n} rewards with gap {gap} in [{lo}, {hi}]");
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Provider bindings
// ---------------------------------------------------------------------------

/// Policy provider over a deterministic-kernel MDP. Pure function of the
/// request and its seed: the per-request RNG is derived from
/// (provider seed, request seed, request content hash).
pub struct SimPolicyProvider {
    mdp: Arc<SimMdp>,
    base_seed: u64,
}

impl SimPolicyProvider {
    fn resolve_state(&self, prefix: &[String]) -> Result<usize, ProviderError> {
        match prefix.last() {
            None => Ok(ROOT),
            Some(last) => self.mdp.find_token(last).ok_or_else(|| {
                ProviderError::Protocol(format!("prefix sentence {last:?} is not a known token"))
            }),
        }
    }

    fn request_rng(&self, req: &GenerationRequest) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        req.prompt.hash(&mut h);
        req.image.value().hash(&mut h);
        req.prefix.hash(&mut h);
        match req.decode {
            Decode::Greedy => u64::MAX.hash(&mut h),
            Decode::Temperature(t) => t.to_bits().hash(&mut h),
        }
        req.max_new_units.hash(&mut h);
        let seed = splitmix64(self.base_seed ^ splitmix64(h.finish() ^ splitmix64(req.seed.unwrap_or(0))));
        ChaCha8Rng::seed_from_u64(seed)
    }
}

impl PolicyProvider for SimPolicyProvider {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let mut state = self.resolve_state(&req.prefix)?;
        let mut rng = self.request_rng(req);
        let mut sentences = Vec::new();
        for _ in 0..req.max_new_units {
            if self.mdp.states[state].terminal {
                break;
            }
            let edge = match req.decode {
                Decode::Greedy => self.mdp.greedy_edge(state),
                Decode::Temperature(t) => {
                    sample_index(&self.mdp.softmax_probs(state, t), &mut rng)
                }
            };
            let next = self.mdp.states[state].edges[edge].outcomes[0].state;
            sentences.push(self.mdp.states[next].token.clone());
            state = next;
        }
        Ok(sentences.join(" "))
    }
}

/// Embedding provider constructed so the cosine of (token vector, image
/// vector) equals the token state's reward exactly: with unit image vector
/// `u` and a unit vector `w` orthogonal to `u`, the token vector is
/// `r*u + sqrt(1 - r^2)*w`.
pub struct SimEmbeddingProvider {
    mdp: Arc<SimMdp>,
    seed: u64,
    dim: usize,
    image_vec: Vec<f64>,
    token_vecs: BTreeMap<String, Vec<f64>>,
}

impl SimEmbeddingProvider {
    fn new(mdp: Arc<SimMdp>, seed: u64) -> Self {
        let dim = SIM_EMBED_DIM;
        let image_vec = hashed_unit_vector("sim-image", &format!("{seed}:{}", mdp.image_id), dim);
        let mut token_vecs = BTreeMap::new();
        for s in mdp.token_states() {
            let token = mdp.token_of(s).to_string();
            let r = mdp.state_reward(s).clamp(-1.0, 1.0);
            let mut w = hashed_unit_vector("sim-token", &format!("{seed}:{token}"), dim);
            // Project out the image direction and renormalize.
            let dot: f64 = w.iter().zip(&image_vec).map(|(a, b)| a * b).sum();
            for (wi, ui) in w.iter_mut().zip(&image_vec) {
                *wi -= dot * ui;
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-9, "token direction degenerate for {token:?}");
            let ortho_coeff = (1.0 - r * r).max(0.0).sqrt();
            let vec: Vec<f64> = image_vec
                .iter()
                .zip(&w)
                .map(|(u, wv)| r * u + ortho_coeff * wv / norm)
                .collect();
            token_vecs.insert(token, vec);
        }
        Self {
            mdp,
            seed,
            dim,
            image_vec,
            token_vecs,
        }
    }
}

impl EmbeddingProvider for SimEmbeddingProvider {
    fn embed_text(&self, text: &str) -> Result<Embedding, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::InvalidRequest("cannot embed empty text".into()));
        }
        match self.token_vecs.get(text.trim()) {
            Some(v) => Embedding::new(v.clone()),
            None => Embedding::new(hashed_unit_vector(
                "sim-free-text",
                &format!("{}:{text}", self.seed),
                self.dim,
            )),
        }
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, ProviderError> {
        image.validate()?;
        match image {
            ImageRef::SimId(id) if *id == self.mdp.image_id => {
                Embedding::new(self.image_vec.clone())
            }
            ImageRef::SimId(id) => Embedding::new(hashed_unit_vector(
                "sim-other-image",
                &format!("{}:{id}", self.seed),
                self.dim,
            )),
            ImageRef::FilePath(p) => {
                let bytes = std::fs::read(p).map_err(|e| ProviderError::ImageUnreadable {
                    image: p.clone(),
                    reason: e.to_string(),
                })?;
                let mut h = DefaultHasher::new();
                bytes.hash(&mut h);
                Embedding::new(hashed_unit_vector(
                    "sim-image-bytes",
                    &format!("{}:{}", self.seed, h.finish()),
                    self.dim,
                ))
            }
            ImageRef::Url(u) => Embedding::new(hashed_unit_vector(
                "sim-image-url",
                &format!("{}:{u}", self.seed),
                self.dim,
            )),
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

fn hashed_unit_vector(namespace: &str, payload: &str, dim: usize) -> Vec<f64> {
    let mut h = DefaultHasher::new();
    namespace.hash(&mut h);
    payload.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// TD training rows from `n` deterministic round-robin episodes: full
/// coverage of reachable states with near-uniform action frequencies, the
/// standard exploratory dataset for the tabular oracles. Requires a
/// deterministic kernel.
pub fn td_samples_round_robin(
    mdp: &SimMdp,
    episodes: usize,
    featurizer: &crate::value::Featurizer,
) -> Result<Vec<crate::value::TDSample>, crate::value::ValueError> {
    use crate::reward::RewardScore;
    use crate::value::TDSample;

    let image = mdp.image();
    let eps = round_robin_episodes(mdp, episodes).expect("round robin needs a deterministic kernel");
    let mut out = Vec::new();
    for ep in &eps {
        for (state, reward, next) in episode_transitions(mdp, ep) {
            let current = featurizer.featurize(mdp.token_of(state), &image)?;
            let reward = RewardScore::new(reward).expect("sim rewards are in range");
            match next {
                Some(n) => {
                    let nf = featurizer.featurize(mdp.token_of(n), &image)?;
                    out.push(TDSample::step(current, reward, nf));
                }
                None => out.push(TDSample::terminal(current, reward)),
            }
        }
    }
    Ok(out)
}

/// Trains a tabular head to the on-policy (uniform) fixed point: round
/// robin exploration for full-support coverage, then staged learning-rate
/// decay to squeeze out the optimization residual.
pub fn train_tabular_on_policy(
    mdp: &SimMdp,
    featurizer: &crate::value::Featurizer,
    episodes: usize,
    seed: u64,
) -> Result<crate::value::ValueHead, crate::value::ValueError> {
    use crate::value::{train, Optimizer, TrainConfig, ValueHead};

    let dataset = td_samples_round_robin(mdp, episodes, featurizer)?;
    let mut head = ValueHead::new_tabular();
    for (stage, lr) in [0.25, 0.05, 0.01].into_iter().enumerate() {
        let cfg = TrainConfig {
            gamma: mdp.gamma,
            learning_rate: lr,
            batch_size: 32,
            epochs: 40,
            shuffle_seed: splitmix64(seed ^ stage as u64),
            optimizer: Optimizer::PlainSgd,
        };
        train(&mut head, &dataset, &cfg)?;
    }
    Ok(head)
}

/// Tabular value head preloaded with the exact optimal value of every
/// token state, keyed through the featurizer. The strongest possible value
/// scorer for this MDP; used as the oracle end of search comparisons.
pub fn dp_exact_value_head(
    mdp: &SimMdp,
    featurizer: &crate::value::Featurizer,
) -> Result<crate::value::ValueHead, crate::value::ValueError> {
    let values = dp_values(mdp, None);
    let mut head = crate::value::ValueHead::new_tabular();
    let image = mdp.image();
    for s in mdp.token_states() {
        let features = featurizer.featurize(mdp.token_of(s), &image)?;
        head.set_tabular_entry(&features, values[s]);
    }
    Ok(head)
}

/// Binds a validated deterministic MDP to the backend traits.
pub fn sim_as_providers(
    mdp: &SimMdp,
    seed: u64,
) -> (Arc<SimPolicyProvider>, Arc<SimEmbeddingProvider>) {
    mdp.validate().expect("provider binding requires a valid mdp");
    assert!(
        mdp.is_deterministic(),
        "provider binding requires a deterministic transition kernel"
    );
    let shared = Arc::new(mdp.clone());
    (
        Arc::new(SimPolicyProvider {
            mdp: Arc::clone(&shared),
            base_seed: splitmix64(seed ^ 0x706f_6c69), // "poli"
        }),
        Arc::new(SimEmbeddingProvider::new(shared, splitmix64(seed ^ 0x656d_6264))), // "embd"
    )
}
