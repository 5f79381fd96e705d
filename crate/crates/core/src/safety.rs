//! Bounded-time safety: expected hitting times of the safe set, enumeration
//! of epsilon-optimal deterministic policies, and `(N, eps)` certificates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bisim::{cross_bisim_metric, hausdorff_distance, isolation_check, BisimConfig, IsolationResult};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{greedy_policy, induce_chain, policy_evaluation, value_iteration, InducedChain, MdpSpec, Policy};
use crate::onpolicy::spectral_radius;

pub const DEFAULT_VALUE_TOL: f64 = 1e-10;
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDistribution {
    pub weights: Vec<f64>,
    /// Permit mass on safe states (which contributes zero steps).
    #[serde(default)]
    pub allow_safe: bool,
}

impl StartDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "start weights must be a distribution (sum {sum})"
            )));
        }
        Ok(Self {
            weights,
            allow_safe: false,
        })
    }

    pub fn point(n: usize, state: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[state] = 1.0;
        Self {
            weights,
            allow_safe: false,
        }
    }

    pub fn allowing_safe(mut self) -> Self {
        self.allow_safe = true;
        self
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.weights.len()).filter(|&s| self.weights[s] > 0.0)
    }

    fn check(&self, n: usize, is_safe: impl Fn(usize) -> bool) -> Result<()> {
        if self.weights.len() != n {
            return Err(Error::Dimension(format!(
                "start distribution has {} entries, expected {n}",
                self.weights.len()
            )));
        }
        if !self.allow_safe {
            if let Some(s) = self.support().find(|&s| is_safe(s)) {
                return Err(Error::InvalidArgument(format!(
                    "start mass on safe state {s} without allow_safe"
                )));
            }
        }
        Ok(())
    }
}

/// Start convention for certificates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    Distribution(StartDistribution),
    /// Worst point mass over non-safe states, chosen per policy.
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyQuery {
    pub epsilon: f64,
    pub start: Start,
    pub value_tol: f64,
    pub cap: u128,
    /// Horizons `N` to answer `(N, eps)` verdicts for.
    #[serde(default)]
    pub horizons: Vec<f64>,
}

impl SafetyQuery {
    pub fn worst_case(epsilon: f64) -> Self {
        Self {
            epsilon,
            start: Start::WorstCase,
            value_tol: DEFAULT_VALUE_TOL,
            cap: DEFAULT_ENUMERATION_CAP,
            horizons: Vec::new(),
        }
    }

    pub fn with_start(mut self, start: StartDistribution) -> Self {
        self.start = Start::Distribution(start);
        self
    }

    pub fn with_horizons(mut self, horizons: Vec<f64>) -> Self {
        self.horizons = horizons;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.value_tol > 0.0) {
            return Err(Error::InvalidArgument("value_tol must be positive".into()));
        }
        if !(self.epsilon > 10.0 * self.value_tol) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} must exceed 10 * value_tol = {}",
                self.epsilon,
                10.0 * self.value_tol
            )));
        }
        Ok(())
    }
}

/// Structural classification of chain states.
fn absorbable(chain: &InducedChain) -> (Vec<bool>, Vec<bool>) {
    let n = chain.len();
    let reverse = |targets: Vec<bool>| {
        let mut mark = targets;
        let mut stack: Vec<usize> = (0..n).filter(|&i| mark[i]).collect();
        while let Some(j) = stack.pop() {
            for i in 0..n {
                if !mark[i] && chain.q[i][j] > 0.0 {
                    mark[i] = true;
                    stack.push(i);
                }
            }
        }
        mark
    };
    let reaches = reverse(chain.absorb.iter().map(|&p| p > 0.0).collect());
    let escapes = reverse(reaches.iter().map(|&r| !r).collect());
    (reaches, escapes)
}

/// Expected steps to absorption from every chain state. States that can
/// reach a region with no path to the safe set get infinity; the rest solve
/// `(I - Q) t = 1` restricted to themselves.
pub fn hitting_times(chain: &InducedChain) -> Result<Vec<f64>> {
    let (_, escapes) = absorbable(chain);
    let finite: Vec<usize> = (0..chain.len()).filter(|&i| !escapes[i]).collect();
    let q = linalg::submatrix(&chain.q, &finite, &finite);
    let a = linalg::identity_minus(&q, 1.0);
    let t = linalg::solve(&a, &vec![1.0; finite.len()]).ok_or_else(|| Error::NumericalSolve {
        context: "hitting time".into(),
        spectral_radius: Some(spectral_radius(&q).value),
    })?;
    let mut out = vec![f64::INFINITY; chain.len()];
    for (k, &i) in finite.iter().enumerate() {
        out[i] = t[k];
    }
    Ok(out)
}

/// Per-state expected hitting times indexed by MDP state (zero on safe states).
pub fn state_hitting_times(chain: &InducedChain) -> Result<Vec<f64>> {
    let t = hitting_times(chain)?;
    let mut out = vec![0.0; chain.n_states];
    for (k, &s) in chain.index_map.iter().enumerate() {
        out[s] = t[k];
    }
    Ok(out)
}

fn weighted_time(times: &[f64], start: &StartDistribution) -> f64 {
    start
        .support()
        .map(|s| if times[s].is_infinite() { f64::INFINITY } else { start.weights[s] * times[s] })
        .sum()
}

/// `Delta^T (I - Q)^{-1} 1`, or infinity when some start state may never be absorbed.
pub fn hitting_time(chain: &InducedChain, start: &StartDistribution) -> Result<f64> {
    let safe: Vec<bool> = {
        let mut v = vec![true; chain.n_states];
        for &s in &chain.index_map {
            v[s] = false;
        }
        v
    };
    start.check(chain.n_states, |s| safe[s])?;
    Ok(weighted_time(&state_hitting_times(chain)?, start))
}

/// Partial sums `sum_{k=from}^{to} Delta Q^k 1` of the occupation series.
/// Starting at `k = 0` the limit is the hitting time; starting at `k = 1`
/// it falls short by exactly the start mass on non-safe states.
pub fn occupation_series(chain: &InducedChain, start: &StartDistribution, from: usize, to: usize) -> Vec<f64> {
    let mut row: Vec<f64> = chain.index_map.iter().map(|&s| start.weights[s]).collect();
    let mut total = 0.0;
    let mut sums = Vec::with_capacity(to + 1);
    for k in 0..=to {
        if k >= from {
            total += row.iter().sum::<f64>();
        }
        sums.push(total);
        row = linalg::vec_mat(&row, &chain.q);
    }
    sums
}

#[derive(Debug, Clone)]
struct Candidate {
    table: Vec<usize>,
    /// `min_s V^pi(s) - V*(s)`.
    gap: f64,
}

fn candidate_count(mdp: &MdpSpec) -> u128 {
    let free = mdp.non_safe().len() as u32;
    (mdp.n_actions() as u128).checked_pow(free).unwrap_or(u128::MAX)
}

/// Every deterministic policy over non-safe states, with safe states taking
/// the greedy action, scored against `V*`.
fn score_all(mdp: &MdpSpec, value_tol: f64, cap: u128) -> Result<(Vec<f64>, Vec<Candidate>)> {
    let count = candidate_count(mdp);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let vstar = value_iteration(mdp, value_tol)?.values;
    let Policy::Deterministic(greedy) = greedy_policy(mdp, &vstar) else {
        unreachable!("greedy policies are deterministic")
    };
    let free = mdp.non_safe();
    let m = mdp.n_actions() as u64;
    let candidates = (0..count as u64)
        .into_par_iter()
        .map(|mut code| {
            let mut table = greedy.clone();
            for &s in &free {
                table[s] = (code % m) as usize;
                code /= m;
            }
            let values = policy_evaluation(mdp, &Policy::Deterministic(table.clone()))?.values;
            let gap = values
                .iter()
                .zip(&vstar)
                .map(|(v, w)| v - w)
                .fold(f64::INFINITY, f64::min);
            Ok(Candidate { table, gap })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vstar, candidates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonOptimalSet {
    pub policies: Vec<Policy>,
    /// `min_s V^pi(s) - V*(s) + eps` per member.
    pub margins: Vec<f64>,
    /// Members whose margin is within `10 value_tol` of zero.
    pub flagged: Vec<usize>,
    /// Non-members whose margin is within `10 value_tol` of zero.
    pub flagged_excluded: usize,
    pub optimal_values: Vec<f64>,
    pub candidates: u128,
}

fn select(candidates: &[Candidate], epsilon: f64, value_tol: f64) -> (Vec<usize>, Vec<f64>, Vec<usize>, usize) {
    let mut members = Vec::new();
    let mut margins = Vec::new();
    let mut flagged = Vec::new();
    let mut flagged_excluded = 0;
    for (k, c) in candidates.iter().enumerate() {
        let margin = c.gap + epsilon;
        let near = margin.abs() < 10.0 * value_tol;
        if margin > 0.0 {
            if near {
                flagged.push(members.len());
            }
            members.push(k);
            margins.push(margin);
        } else if near {
            flagged_excluded += 1;
        }
    }
    (members, margins, flagged, flagged_excluded)
}

/// Deterministic stationary policies with `V^pi(s) > V*(s) - eps` everywhere.
pub fn enumerate_epsilon_optimal(mdp: &MdpSpec, query: &SafetyQuery) -> Result<EpsilonOptimalSet> {
    query.check()?;
    let (vstar, candidates) = score_all(mdp, query.value_tol, query.cap)?;
    let (members, margins, flagged, flagged_excluded) = select(&candidates, query.epsilon, query.value_tol);
    Ok(EpsilonOptimalSet {
        policies: members
            .iter()
            .map(|&k| Policy::Deterministic(candidates[k].table.clone()))
            .collect(),
        margins,
        flagged,
        flagged_excluded,
        optimal_values: vstar,
        candidates: candidates.len() as u128,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reachability {
    /// Every start state reaches the safe set with probability one.
    pub absorbed_surely: bool,
    /// Some start state reaches the safe set with positive probability.
    pub reachable_somewhere: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub horizon: f64,
    pub epsilon: f64,
    pub safe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyCertificate {
    pub epsilon: f64,
    pub is_safe_for: Vec<SafetyVerdict>,
    pub worst_policy: Option<Policy>,
    #[serde(with = "crate::serde_inf")]
    pub worst_time: f64,
    /// Start state attaining `worst_time` under the worst-case convention.
    pub worst_start: Option<usize>,
    /// Hitting time from every state under the worst policy.
    #[serde(with = "crate::serde_inf::vec")]
    pub worst_policy_times: Vec<f64>,
    pub epsilon_optimal_count: usize,
    pub flagged_count: usize,
    pub candidates: u128,
    pub reachability: Vec<Reachability>,
    /// Only deterministic stationary policies are enumerated.
    pub scope: String,
}

impl SafetyCertificate {
    pub fn is_safe(&self, horizon: f64) -> bool {
        self.worst_time <= horizon
    }
}

struct PolicyTime {
    time: f64,
    start: Option<usize>,
    times: Vec<f64>,
    reach: Reachability,
}

fn time_under(mdp: &MdpSpec, table: &[usize], start: &Start) -> Result<PolicyTime> {
    let chain = induce_chain(mdp, &Policy::Deterministic(table.to_vec()))?;
    let times = state_hitting_times(&chain)?;
    let (reaches, _) = absorbable(&chain);
    let (time, start_state, starts): (f64, Option<usize>, Vec<usize>) = match start {
        Start::WorstCase => {
            let mut best = (0.0, None);
            for &s in &chain.index_map {
                if best.1.is_none() || times[s] > best.0 {
                    best = (times[s], Some(s));
                }
            }
            (best.0, best.1, chain.index_map.clone())
        }
        Start::Distribution(d) => (
            weighted_time(&times, d),
            None,
            d.support().filter(|&s| !mdp.is_safe(s)).collect(),
        ),
    };
    let reach = Reachability {
        absorbed_surely: starts.iter().all(|&s| times[s].is_finite()),
        reachable_somewhere: starts.is_empty()
            || starts
                .iter()
                .any(|&s| chain.chain_index(s).is_some_and(|i| reaches[i])),
    };
    Ok(PolicyTime {
        time,
        start: start_state,
        times,
        reach,
    })
}

/// Largest hitting time over the epsilon-optimal deterministic policies.
pub fn certify_safety(mdp: &MdpSpec, query: &SafetyQuery) -> Result<SafetyCertificate> {
    query.check()?;
    if let Start::Distribution(d) = &query.start {
        d.check(mdp.n_states(), |s| mdp.is_safe(s))?;
    }
    let (_, candidates) = score_all(mdp, query.value_tol, query.cap)?;
    certificate_from(mdp, &candidates, query)
}

fn certificate_from(mdp: &MdpSpec, candidates: &[Candidate], query: &SafetyQuery) -> Result<SafetyCertificate> {
    let (members, _, flagged, _) = select(candidates, query.epsilon, query.value_tol);
    let timed = members
        .par_iter()
        .map(|&k| time_under(mdp, &candidates[k].table, &query.start))
        .collect::<Result<Vec<_>>>()?;
    // First maximum in enumeration order, so the choice is reproducible.
    let mut worst: Option<usize> = None;
    for (i, t) in timed.iter().enumerate() {
        if worst.is_none_or(|w| t.time > timed[w].time) {
            worst = Some(i);
        }
    }
    let worst_time = worst.map_or(0.0, |w| timed[w].time);
    Ok(SafetyCertificate {
        epsilon: query.epsilon,
        is_safe_for: query
            .horizons
            .iter()
            .map(|&horizon| SafetyVerdict {
                horizon,
                epsilon: query.epsilon,
                safe: worst_time <= horizon,
            })
            .collect(),
        worst_policy: worst.map(|w| Policy::Deterministic(candidates[members[w]].table.clone())),
        worst_time,
        worst_start: worst.and_then(|w| timed[w].start),
        worst_policy_times: worst.map_or_else(Vec::new, |w| timed[w].times.clone()),
        epsilon_optimal_count: members.len(),
        flagged_count: flagged.len(),
        candidates: candidates.len() as u128,
        reachability: timed.iter().map(|t| t.reach).collect(),
        scope: "deterministic stationary policies".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub epsilon: f64,
    #[serde(with = "crate::serde_inf")]
    pub worst_time: f64,
    pub epsilon_optimal_count: usize,
}

/// Worst-case-start hitting time as a function of epsilon. Policies are
/// scored once, so the frontier is monotone by construction.
pub fn safety_frontier(mdp: &MdpSpec, epsilons: &[f64], value_tol: f64, cap: u128) -> Result<Vec<FrontierPoint>> {
    let (_, candidates) = score_all(mdp, value_tol, cap)?;
    let times = candidates
        .par_iter()
        .map(|c| time_under(mdp, &c.table, &Start::WorstCase).map(|t| t.time))
        .collect::<Result<Vec<_>>>()?;
    epsilons
        .iter()
        .map(|&epsilon| {
            let mut query = SafetyQuery::worst_case(epsilon);
            query.value_tol = value_tol;
            query.check()?;
            let (members, ..) = select(&candidates, epsilon, value_tol);
            Ok(FrontierPoint {
                epsilon,
                worst_time: members.iter().map(|&k| times[k]).fold(0.0, f64::max),
                epsilon_optimal_count: members.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub samples: usize,
    pub epsilon_optimal_samples: usize,
    #[serde(with = "crate::serde_inf")]
    pub max_time: f64,
    #[serde(with = "crate::serde_inf")]
    pub deterministic_worst: f64,
    /// A sampled stochastic policy beat the deterministic maximum.
    pub exceeds_deterministic: bool,
}

/// Falsification probe: random state-wise mixtures of epsilon-optimal
/// deterministic policies, kept when they are epsilon-optimal themselves.
pub fn stochastic_probe(mdp: &MdpSpec, query: &SafetyQuery, samples: usize, seed: u64) -> Result<ProbeResult> {
    let set = enumerate_epsilon_optimal(mdp, query)?;
    let cert = certify_safety(mdp, query)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut kept = 0;
    let mut max_time = 0.0_f64;
    for _ in 0..samples {
        if set.policies.is_empty() {
            break;
        }
        let weights: Vec<f64> = (0..set.policies.len()).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let total: f64 = weights.iter().sum();
        let mut table = vec![vec![0.0; m]; n];
        for (w, p) in weights.iter().zip(&set.policies) {
            for (s, row) in table.iter_mut().enumerate() {
                row[match p {
                    Policy::Deterministic(t) => t[s],
                    Policy::Stochastic(_) => unreachable!("enumeration is deterministic"),
                }] += w / total;
            }
        }
        for row in &mut table {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let policy = Policy::Stochastic(table);
        let values = policy_evaluation(mdp, &policy)?.values;
        if values
            .iter()
            .zip(&set.optimal_values)
            .any(|(v, w)| !(*v > w - query.epsilon))
        {
            continue;
        }
        kept += 1;
        let times = state_hitting_times(&induce_chain(mdp, &policy)?)?;
        let t = match &query.start {
            Start::WorstCase => mdp.non_safe().iter().map(|&s| times[s]).fold(0.0, f64::max),
            Start::Distribution(d) => weighted_time(&times, d),
        };
        max_time = max_time.max(t);
    }
    Ok(ProbeResult {
        samples,
        epsilon_optimal_samples: kept,
        max_time,
        deterministic_worst: cert.worst_time,
        exceeds_deterministic: max_time > cert.worst_time * (1.0 + 1e-9),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub hausdorff: f64,
    pub isolation_threshold: f64,
    pub isolation: IsolationResult,
    pub horizon: f64,
    pub epsilon: f64,
    pub base: SafetyCertificate,
    pub perturbed: SafetyCertificate,
    /// `M` is `(N, eps)`-safe and the perturbed safe set is isolated.
    pub hypotheses_held: bool,
    /// The perturbed MDP is `(N + 1, eps / 2)`-safe.
    pub conclusion_held: bool,
}

/// Runs both certificates and the isolation test for one perturbed instance.
pub fn verify_stability_instance(
    m: &MdpSpec,
    m_prime: &MdpSpec,
    horizon: f64,
    epsilon: f64,
    config: &BisimConfig,
) -> Result<StabilityReport> {
    let metric = cross_bisim_metric(m, m_prime, config)?;
    let hausdorff = hausdorff_distance(&metric)?;
    let threshold = hausdorff.sqrt();
    let isolation = isolation_check(m_prime, m_prime.safe(), threshold, config)?;
    let base = certify_safety(m, &SafetyQuery::worst_case(epsilon).with_horizons(vec![horizon]))?;
    let perturbed = certify_safety(
        m_prime,
        &SafetyQuery::worst_case(epsilon / 2.0).with_horizons(vec![horizon + 1.0]),
    )?;
    Ok(StabilityReport {
        hausdorff,
        isolation_threshold: threshold,
        hypotheses_held: base.is_safe(horizon) && isolation.isolated,
        conclusion_held: perturbed.is_safe(horizon + 1.0),
        isolation,
        horizon,
        epsilon,
        base,
        perturbed,
    })
}
