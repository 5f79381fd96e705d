//! Instance generators: the playing-dead adversary, uniform shutdown
//! injection, duplicated states, and seeded random families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mdp::{value_iteration, GeneratorInfo, MdpDocument, MdpSpec};
use crate::onpolicy::{DiffPolicy, EmbeddedMdp, Perturbation, SoftmaxPolicy, LINEARIZATION_THRESHOLD};

pub const RNG_NAME: &str = "chacha8/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct PlayingDeadParams {
    pub base: MdpSpec,
    pub delta: f64,
    pub escape_state: usize,
    pub escape_action: usize,
    pub epsilon: f64,
}

impl PlayingDeadParams {
    /// Upper end of the admissible interval for `delta`.
    pub fn delta_limit(&self) -> f64 {
        (1.0 - self.base.discount()) * self.epsilon / (10.0 * self.base.n_states() as f64)
    }

    pub fn terminal(&self) -> Result<usize> {
        match self.base.safe() {
            [t] => Ok(*t),
            other => Err(Error::InvalidArgument(format!(
                "base must have exactly one safe state, found {}",
                other.len()
            ))),
        }
    }

    pub fn check(&self) -> Result<()> {
        let base = &self.base;
        let term = self.terminal()?;
        for a in 0..base.n_actions() {
            if base.prob(term, a, term) != 1.0 || base.reward(term, a) != 0.0 {
                return Err(Error::InvalidArgument(
                    "terminal state must self-loop with zero reward under every action".into(),
                ));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < self.delta_limit()) {
            return Err(Error::InvalidArgument(format!(
                "delta {} must lie in (0, {})",
                self.delta,
                self.delta_limit()
            )));
        }
        if self.escape_state >= base.n_states() || base.is_safe(self.escape_state) {
            return Err(Error::InvalidArgument("escape state must be a non-safe state".into()));
        }
        if self.escape_action >= base.n_actions() {
            return Err(Error::InvalidArgument("escape action out of range".into()));
        }
        let vstar = value_iteration(base, 1e-12)?.values;
        if !(vstar[self.escape_state] > 0.0) {
            return Err(Error::InvalidArgument("escape state must have positive optimal value".into()));
        }
        Ok(())
    }
}

/// Three-state base: `s0` and `s1` either quit into `s_term` (reward 1) or
/// work and hand over to each other (reward 0).
pub fn playing_dead_fixture(gamma: f64, epsilon: f64, delta: f64) -> Result<PlayingDeadParams> {
    let ids = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let base = MdpSpec::new(
        ids(&["s_term", "s0", "s1"]),
        ids(&["work", "quit"]),
        vec![
            vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]],
        ],
        vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        gamma,
        vec![0],
    )?;
    let params = PlayingDeadParams {
        base,
        delta,
        escape_state: 1,
        escape_action: 0,
        epsilon,
    };
    params.check()?;
    Ok(params)
}

/// Adds `s_pd`, which mimics the terminal state but leaks back to the escape
/// state, and reroutes every transition into the terminal state to it.
pub fn build_playing_dead(params: &PlayingDeadParams) -> Result<MdpSpec> {
    params.check()?;
    let base = &params.base;
    let term = params.terminal()?;
    let (n, m) = (base.n_states(), base.n_actions());
    let pd = n;
    let mut transition: Vec<Vec<Vec<f64>>> = base
        .transition()
        .iter()
        .enumerate()
        .map(|(s, rows)| {
            rows.iter()
                .map(|row| {
                    let mut out = row.clone();
                    out.push(0.0);
                    if s != term && out[term] > 0.0 {
                        out[pd] = out[term];
                        out[term] = 0.0;
                    }
                    out
                })
                .collect()
        })
        .collect();
    let mut reward = base.rewards().to_vec();
    let mut pd_rows = vec![vec![0.0; n + 1]; m];
    let mut pd_reward = vec![0.0; m];
    for (a, row) in pd_rows.iter_mut().enumerate() {
        if a == params.escape_action {
            row[pd] = 1.0 - params.delta;
            row[params.escape_state] = params.delta;
            pd_reward[a] = params.delta;
        } else {
            row[pd] = 1.0;
        }
    }
    transition.push(pd_rows);
    reward.push(pd_reward);
    let mut ids = base.state_ids().to_vec();
    let mut pd_id = "s_pd".to_string();
    while ids.contains(&pd_id) {
        pd_id.push('\'');
    }
    ids.push(pd_id);
    MdpSpec::new(ids, base.action_ids().to_vec(), transition, reward, base.discount(), base.safe().to_vec())
}

/// Closed-form bound on `d(s_term, s_pd)` for rewards in `[0, 1]`.
pub fn playing_dead_distance_bound(gamma: f64, delta: f64) -> f64 {
    delta / (1.0 - gamma + gamma * delta)
}

/// Every non-safe row moves `1/N` of its mass onto the first safe state.
pub fn build_uniform_shutdown(mdp: &MdpSpec, big_n: f64) -> Result<MdpSpec> {
    if !(big_n > 1.0 && big_n.is_finite()) {
        return Err(Error::InvalidArgument(format!("N = {big_n} must exceed 1")));
    }
    let &target = mdp
        .safe()
        .first()
        .ok_or_else(|| Error::InvalidArgument("uniform shutdown needs a safe state".into()))?;
    let keep = 1.0 - 1.0 / big_n;
    let transition = mdp
        .transition()
        .iter()
        .enumerate()
        .map(|(s, rows)| {
            if mdp.is_safe(s) {
                return rows.clone();
            }
            rows.iter()
                .map(|row| {
                    let mut out: Vec<f64> = row.iter().map(|p| p * keep).collect();
                    out[target] += 1.0 / big_n;
                    out
                })
                .collect()
        })
        .collect();
    MdpSpec::new(
        mdp.state_ids().to_vec(),
        mdp.action_ids().to_vec(),
        transition,
        mdp.rewards().to_vec(),
        mdp.discount(),
        mdp.safe().to_vec(),
    )
}

/// The uniform-shutdown change written as an on-policy perturbation
/// (no embedding displacement).
pub fn uniform_shutdown_perturbation<P: DiffPolicy + ?Sized>(
    emdp: &EmbeddedMdp,
    policy: &P,
    big_n: f64,
) -> Result<Perturbation> {
    let target = build_uniform_shutdown(&emdp.base, big_n)?;
    let delta_t = target
        .transition()
        .iter()
        .zip(emdp.base.transition())
        .map(|(rows, base)| {
            rows.iter()
                .zip(base)
                .map(|(r, b)| r.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect()
        })
        .collect();
    let delta_s = vec![vec![0.0; emdp.dim()]; emdp.base.n_states()];
    Perturbation::new(emdp, policy, delta_s, delta_t)
}

/// Splits `state` into `copies` exact bisimilar copies. Copies are appended
/// as `{id}#k`; inbound mass is divided evenly, outbound rows and rewards
/// are shared.
pub fn build_duplicated(mdp: &MdpSpec, state: usize, copies: usize) -> Result<MdpSpec> {
    if copies < 2 {
        return Err(Error::InvalidArgument(format!("copies = {copies} must be at least 2")));
    }
    let n = mdp.n_states();
    if state >= n {
        return Err(Error::Dimension(format!("state {state} out of range")));
    }
    let members: Vec<usize> = std::iter::once(state).chain(n..n + copies - 1).collect();
    let share = 1.0 / copies as f64;
    let split = |row: &[f64]| {
        let mut out = row.to_vec();
        out.resize(n + copies - 1, 0.0);
        let mass = row[state];
        for &c in &members {
            out[c] = mass * share;
        }
        out
    };
    let mut transition: Vec<Vec<Vec<f64>>> = mdp
        .transition()
        .iter()
        .map(|rows| rows.iter().map(|r| split(r)).collect())
        .collect();
    let mut reward = mdp.rewards().to_vec();
    let mut ids = mdp.state_ids().to_vec();
    let mut safe = mdp.safe().to_vec();
    for k in 1..copies {
        transition.push(transition[state].clone());
        reward.push(reward[state].clone());
        ids.push(format!("{}#{k}", mdp.state_ids()[state]));
        if mdp.is_safe(state) {
            safe.push(n + k - 1);
        }
    }
    MdpSpec::new(ids, mdp.action_ids().to_vec(), transition, reward, mdp.discount(), safe)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomFamily {
    pub shape: RandomShape,
    /// Probability that a transition entry is structurally zero.
    pub sparsity: f64,
    pub reward_range: (f64, f64),
    pub discount: f64,
}

impl RandomFamily {
    pub const DEFAULT_SPARSITY: f64 = 0.5;

    pub fn new(n_states: usize, n_actions: usize, dim: usize) -> Self {
        Self {
            shape: RandomShape {
                n_states,
                n_actions,
                dim,
            },
            sparsity: Self::DEFAULT_SPARSITY,
            reward_range: (0.0, 1.0),
            discount: 0.9,
        }
    }

    /// Number of safe states: one per four states, at least one.
    pub fn n_safe(&self) -> usize {
        (self.shape.n_states / 4).max(1)
    }

    pub fn check(&self) -> Result<()> {
        let s = self.shape;
        if s.n_states < 2 || s.n_actions < 1 {
            return Err(Error::InvalidArgument("need at least 2 states and 1 action".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!("sparsity {} must lie in [0, 1)", self.sparsity)));
        }
        let (lo, hi) = self.reward_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument("reward range must be finite and ordered".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::InvalidArgument("discount must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn random_row(rng: &mut ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < sparsity { 0.0 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    if row.iter().all(|&v| v == 0.0) {
        row[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    row
}

/// Seeded random embedded MDP. The last `n_safe` states are absorbing with
/// zero reward; embeddings lie in the unit cube.
pub fn random_family(seed: u64, family: &RandomFamily) -> Result<EmbeddedMdp> {
    family.check()?;
    let RandomShape {
        n_states: n,
        n_actions: m,
        dim,
    } = family.shape;
    let n_safe = family.n_safe();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n);
    let mut reward = Vec::with_capacity(n);
    let (lo, hi) = family.reward_range;
    for s in 0..n {
        if s >= n - n_safe {
            let mut row = vec![0.0; n];
            row[s] = 1.0;
            transition.push(vec![row; m]);
            reward.push(vec![0.0; m]);
        } else {
            transition.push((0..m).map(|_| random_row(&mut rng, n, family.sparsity)).collect());
            reward.push((0..m).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect());
        }
    }
    let embedding: Matrix = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
    let states: Vec<String> = (0..n)
        .map(|s| if s >= n - n_safe { format!("off{}", s + n_safe - n) } else { format!("s{s}") })
        .collect();
    let doc = MdpDocument {
        safe: states[n - n_safe..].to_vec(),
        states,
        actions: (0..m).map(|a| format!("a{a}")).collect(),
        transitions: transition,
        rewards: Some(reward),
        rewards_sas: None,
        discount: family.discount,
        embedding: Some(embedding),
        side_info: None,
        generator: Some(GeneratorInfo {
            name: "random_family".into(),
            rng: RNG_NAME.into(),
            seed,
        }),
    };
    EmbeddedMdp::from_document(doc)
}

/// The generated document, including generator metadata.
pub fn random_document(seed: u64, family: &RandomFamily) -> Result<MdpDocument> {
    let emdp = random_family(seed, family)?;
    let mut doc = emdp.to_document();
    doc.generator = Some(GeneratorInfo {
        name: "random_family".into(),
        rng: RNG_NAME.into(),
        seed,
    });
    Ok(doc)
}

/// Random softmax policy with weights uniform in `[-scale, scale]`.
pub fn random_toy_policy(seed: u64, n_actions: usize, dim: usize, scale: f64, temperature: f64) -> Result<SoftmaxPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..n_actions)
        .map(|_| (0..dim).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect();
    crate::onpolicy::make_toy_policy(weights, temperature)
}

/// Random perturbation of about `size`: half the budget displaces embeddings
/// (each by at most `threshold`), the rest moves transition mass within
/// non-safe rows. The returned `size` is recomputed exactly.
pub fn random_perturbation<P: DiffPolicy + ?Sized>(
    emdp: &EmbeddedMdp,
    policy: &P,
    size: f64,
    seed: u64,
    threshold: f64,
) -> Result<Perturbation> {
    if !(size >= 0.0 && size.is_finite()) {
        return Err(Error::InvalidArgument(format!("size {size} must be nonnegative")));
    }
    let base = &emdp.base;
    let (n, m, d) = (base.n_states(), base.n_actions(), emdp.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta_s = vec![vec![0.0; d]; n];
    let mut delta_t = vec![vec![vec![0.0; n]; m]; n];
    let b = policy.bound_b();
    let mut budget_t = size;
    if b > 0.0 && d > 0 && size > 0.0 {
        let target = 0.5 * size / (0.5 * n as f64 * b);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        let mut used = 0.0;
        for (s, w) in raw.iter().enumerate() {
            let len = (target * w / total).min(threshold);
            let dir: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            delta_s[s] = dir.iter().map(|v| v * len / norm).collect();
            used += len;
        }
        budget_t = size - 0.5 * n as f64 * b * used;
    }
    let rows: Vec<(usize, usize)> = base
        .non_safe()
        .into_iter()
        .flat_map(|s| (0..m).map(move |a| (s, a)))
        .collect();
    let mut attempts = 0;
    while budget_t > 1e-300 && !rows.is_empty() && attempts < 64 {
        attempts += 1;
        let (s, a) = rows[rng.random_range(0..rows.len())];
        let row = base.row(s, a);
        let current: Vec<f64> = row.iter().zip(&delta_t[s][a]).map(|(p, q)| p + q).collect();
        let sources: Vec<usize> = (0..n).filter(|&j| current[j] > 0.0).collect();
        if sources.is_empty() {
            continue;
        }
        let from = sources[rng.random_range(0..sources.len())];
        let to = rng.random_range(0..n);
        if to == from {
            continue;
        }
        let moved = (budget_t / 2.0).min(current[from] / 2.0).min((1.0 - current[to]) / 2.0);
        if moved <= 0.0 {
            continue;
        }
        delta_t[s][a][from] -= moved;
        delta_t[s][a][to] += moved;
        budget_t -= 2.0 * moved;
    }
    Perturbation::new(emdp, policy, delta_s, delta_t)
}

/// Two recurrent non-safe states cycling forever beside an unreachable
/// safe state; one action, so any policy realizes the same chain.
pub fn recurrent_dead_fixture() -> Result<EmbeddedMdp> {
    let base = MdpSpec::new(
        vec!["off".into(), "a".into(), "b".into()],
        vec!["go".into()],
        vec![
            vec![vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 1.0, 0.0]],
        ],
        vec![vec![0.0], vec![1.0], vec![1.0]],
        0.9,
        vec![0],
    )?;
    EmbeddedMdp::new(base, vec![vec![0.0], vec![0.5], vec![1.0]], None)
}

/// Default per-state displacement cap for random perturbations.
pub const DEFAULT_THRESHOLD: f64 = LINEARIZATION_THRESHOLD;
