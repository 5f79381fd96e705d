//! Bisimulation metrics between and within MDPs.
//!
//! The cross metric is the fixed point of
//!
//! ```text
//! F(d)(s1, s2) = max_a  c_R |r1(s1, a) - r2(s2, a)| + c_T W_d(P1(s1, a), P2(s2, a))
//! ```
//!
//! which is a `c_T`-contraction in the sup norm. Iteration starts from zero
//! and stops once a sweep moves less than `tol (1 - c_T)`, so the returned
//! matrix is within `tol` of the fixed point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sup_norm_diff, Matrix};
use crate::mdp::MdpSpec;
use crate::transport::wasserstein_with;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisimConfig {
    #[serde(rename = "c_R")]
    pub c_r: f64,
    #[serde(rename = "c_T")]
    pub c_t: f64,
    pub tol: f64,
    pub max_iterations: usize,
}

impl BisimConfig {
    pub const DEFAULT_TOL: f64 = 1e-6;
    pub const DEFAULT_MAX_ITERATIONS: usize = 100_000;

    pub fn new(c_r: f64, c_t: f64, tol: f64) -> Result<Self> {
        let config = Self {
            c_r,
            c_t,
            tol,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        };
        config.check()?;
        Ok(config)
    }

    /// `c_T = gamma`, `c_R = 1 - gamma`.
    pub fn for_discount(gamma: f64) -> Self {
        Self {
            c_r: 1.0 - gamma,
            c_t: gamma,
            tol: Self::DEFAULT_TOL,
            max_iterations: Self::DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.c_t > 0.0 && self.c_t < 1.0) {
            return Err(Error::InvalidArgument(format!("c_T = {} must lie in (0, 1)", self.c_t)));
        }
        if !(self.c_r > 0.0 && self.c_r.is_finite()) {
            return Err(Error::InvalidArgument(format!("c_R = {} must be positive", self.c_r)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance {} must be positive", self.tol)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        Ok(())
    }

    /// Sweeps needed by a `c_T`-contraction whose first iterate has sup norm `d0`.
    pub fn iteration_bound(&self, d0: f64) -> usize {
        let target = self.tol * (1.0 - self.c_t);
        if d0 < target {
            return 1;
        }
        ((target / d0).ln() / self.c_t.ln()).ceil() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMetric {
    pub dist: Matrix,
    #[serde(rename = "c_R")]
    pub c_r: f64,
    #[serde(rename = "c_T")]
    pub c_t: f64,
    pub tol: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Sup norm of the first iterate `F(0)`.
    pub first_step: f64,
}

impl CrossMetric {
    pub fn config(&self, max_iterations: usize) -> BisimConfig {
        BisimConfig {
            c_r: self.c_r,
            c_t: self.c_t,
            tol: self.tol,
            max_iterations,
        }
    }
}

fn check_actions(m1: &MdpSpec, m2: &MdpSpec) -> Result<()> {
    if m1.action_ids() != m2.action_ids() {
        return Err(Error::ActionMismatch {
            left: m1.action_ids().to_vec(),
            right: m2.action_ids().to_vec(),
        });
    }
    Ok(())
}

/// One application of the bisimulation operator to `d` (`|S1| x |S2|`).
pub fn bisim_operator(m1: &MdpSpec, m2: &MdpSpec, d: &[Vec<f64>], config: &BisimConfig) -> Result<Matrix> {
    check_actions(m1, m2)?;
    if d.len() != m1.n_states() || d.iter().any(|r| r.len() != m2.n_states()) {
        return Err(Error::Dimension(format!(
            "ground metric must be {} x {}",
            m1.n_states(),
            m2.n_states()
        )));
    }
    apply_operator(m1, m2, d, config)
}

fn apply_operator(m1: &MdpSpec, m2: &MdpSpec, d: &[Vec<f64>], config: &BisimConfig) -> Result<Matrix> {
    (0..m1.n_states())
        .into_par_iter()
        .map(|s1| {
            (0..m2.n_states())
                .map(|s2| {
                    let mut best = 0.0_f64;
                    for a in 0..m1.n_actions() {
                        let gap = (m1.reward(s1, a) - m2.reward(s2, a)).abs();
                        let w = wasserstein_with(m1.row(s1, a), m2.row(s2, a), |i, j| d[i][j])?;
                        best = best.max(config.c_r * gap + config.c_t * w);
                    }
                    Ok(best)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// Cross-MDP bisimulation metric. Exhausting `max_iterations` is not an
/// error: the partial result is returned with `converged == false`.
pub fn cross_bisim_metric(m1: &MdpSpec, m2: &MdpSpec, config: &BisimConfig) -> Result<CrossMetric> {
    config.check()?;
    check_actions(m1, m2)?;
    let target = config.tol * (1.0 - config.c_t);
    let mut d = vec![vec![0.0; m2.n_states()]; m1.n_states()];
    let mut first_step = 0.0;
    for k in 1..=config.max_iterations {
        let next = apply_operator(m1, m2, &d, config)?;
        let residual = sup_norm_diff(&next, &d);
        if k == 1 {
            first_step = residual;
        }
        d = next;
        if residual < target || k == config.max_iterations {
            return Ok(CrossMetric {
                dist: d,
                c_r: config.c_r,
                c_t: config.c_t,
                tol: config.tol,
                iterations: k,
                residual,
                converged: residual < target,
                first_step,
            });
        }
    }
    unreachable!("max_iterations is positive")
}

/// Within-MDP metric: the cross metric of `mdp` with itself.
pub fn bisim_metric(mdp: &MdpSpec, config: &BisimConfig) -> Result<CrossMetric> {
    cross_bisim_metric(mdp, mdp, config)
}

/// Symmetric max-min aggregation of a distance matrix.
pub fn hausdorff_of(dist: &[Vec<f64>]) -> f64 {
    let rows = dist
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let n = dist.first().map_or(0, Vec::len);
    let cols = (0..n)
        .map(|j| dist.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    rows.max(cols)
}

pub fn hausdorff_distance(metric: &CrossMetric) -> Result<f64> {
    if !metric.converged {
        return Err(Error::NotConverged {
            iterations: metric.iterations,
            residual: metric.residual,
        });
    }
    Ok(hausdorff_of(&metric.dist))
}

/// `d_H(m1, m2)` in one call.
pub fn mdp_distance(m1: &MdpSpec, m2: &MdpSpec, config: &BisimConfig) -> Result<f64> {
    hausdorff_distance(&cross_bisim_metric(m1, m2, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub h_star: f64,
    pub aligned_distance: f64,
    /// `(h, d_H)` at every grid point.
    pub profile: Vec<(f64, f64)>,
    /// Grid spacing.
    pub resolution: f64,
    /// The minimizer is the first or last grid point.
    pub boundary: bool,
}

/// Grid search over `h` in `(0, 1)` for the reward scaling `h r1` against
/// `(1 - h) r2` that minimizes the Hausdorff distance. Grid points are
/// `k / (grid + 1)` for `k = 1..=grid`.
pub fn align_reward_scale(m1: &MdpSpec, m2: &MdpSpec, config: &BisimConfig, grid: usize) -> Result<AlignmentResult> {
    if grid < 3 {
        return Err(Error::InvalidArgument(format!("grid {grid} must be at least 3")));
    }
    config.check()?;
    check_actions(m1, m2)?;
    let profile = (1..=grid)
        .into_par_iter()
        .map(|k| {
            let h = k as f64 / (grid + 1) as f64;
            let d = mdp_distance(&m1.scale_rewards(h), &m2.scale_rewards(1.0 - h), config)?;
            Ok((h, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, &(h_star, aligned_distance)) = profile
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.1.total_cmp(&b.1))
        .expect("grid is nonempty");
    Ok(AlignmentResult {
        h_star,
        aligned_distance,
        resolution: 1.0 / (grid + 1) as f64,
        boundary: best == 0 || best == grid - 1,
        profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationResult {
    pub isolated: bool,
    /// Smallest distance from the subset to its complement (infinite when vacuous).
    pub min_distance: f64,
    /// The subset was empty or all of `S`.
    pub vacuous: bool,
}

/// Isolation test against a precomputed within-MDP distance matrix.
pub fn isolation_from_metric(dist: &[Vec<f64>], subset: &[usize], delta: f64) -> IsolationResult {
    let n = dist.len();
    let inside: Vec<bool> = (0..n).map(|s| subset.contains(&s)).collect();
    let mut min_distance = f64::INFINITY;
    for s in (0..n).filter(|&s| inside[s]) {
        for t in (0..n).filter(|&t| !inside[t]) {
            min_distance = min_distance.min(dist[s][t]);
        }
    }
    let count = inside.iter().filter(|&&b| b).count();
    IsolationResult {
        isolated: min_distance > delta,
        min_distance,
        vacuous: count == 0 || count == n,
    }
}

pub fn isolation_check(mdp: &MdpSpec, subset: &[usize], delta: f64, config: &BisimConfig) -> Result<IsolationResult> {
    if let Some(&s) = subset.iter().find(|&&s| s >= mdp.n_states()) {
        return Err(Error::Dimension(format!("state {s} out of range")));
    }
    let metric = bisim_metric(mdp, config)?;
    if !metric.converged {
        return Err(Error::NotConverged {
            iterations: metric.iterations,
            residual: metric.residual,
        });
    }
    Ok(isolation_from_metric(&metric.dist, subset, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuotientResult {
    pub partition: Vec<Vec<usize>>,
    #[serde(serialize_with = "serialize_mdp")]
    pub quotient: MdpSpec,
    /// Original state -> class index.
    pub lift: Vec<usize>,
}

fn serialize_mdp<S: serde::Serializer>(mdp: &MdpSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    mdp.to_document().serialize(s)
}

pub const DEFAULT_MERGE_TOL: f64 = 1e-9;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Partition of `0..n` into components of `dist <= merge_tol`, ordered by
/// smallest member.
pub fn merge_classes(dist: &[Vec<f64>], merge_tol: f64) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for s in 0..n {
        for t in s + 1..n {
            if dist[s][t] <= merge_tol || dist[t][s] <= merge_tol {
                let (a, b) = (find(&mut parent, s), find(&mut parent, t));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for s in 0..n {
        let root = find(&mut parent, s);
        if slot[root] == usize::MAX {
            slot[root] = classes.len();
            classes.push(Vec::new());
        }
        classes[slot[root]].push(s);
    }
    classes
}

/// Quotient of `mdp` by approximate bisimilarity.
pub fn bisim_quotient(mdp: &MdpSpec, merge_tol: f64, config: &BisimConfig) -> Result<QuotientResult> {
    if !(merge_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("merge tolerance {merge_tol} must be positive")));
    }
    let config = config.with_tol(config.tol.min(merge_tol / 4.0));
    let metric = bisim_metric(mdp, &config)?;
    if !metric.converged {
        return Err(Error::NotConverged {
            iterations: metric.iterations,
            residual: metric.residual,
        });
    }
    quotient_by(mdp, merge_classes(&metric.dist, merge_tol), merge_tol)
}

/// Quotient by a given partition, checking every member against the class
/// representative (a safe member when there is one).
pub fn quotient_by(mdp: &MdpSpec, partition: Vec<Vec<usize>>, merge_tol: f64) -> Result<QuotientResult> {
    let n = mdp.n_states();
    let mut lift = vec![usize::MAX; n];
    for (c, class) in partition.iter().enumerate() {
        for &s in class {
            if s >= n || lift[s] != usize::MAX {
                return Err(Error::InvalidArgument("partition must cover every state once".into()));
            }
            lift[s] = c;
        }
    }
    if lift.contains(&usize::MAX) || partition.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("partition must cover every state once".into()));
    }
    let k = partition.len();
    let summed = |s: usize, a: usize| {
        let mut out = vec![0.0; k];
        for (t, &p) in mdp.row(s, a).iter().enumerate() {
            out[lift[t]] += p;
        }
        out
    };

    let mut transition = Vec::with_capacity(k);
    let mut reward = Vec::with_capacity(k);
    let mut safe = Vec::new();
    for (c, class) in partition.iter().enumerate() {
        let rep = class.iter().copied().find(|&s| mdp.is_safe(s)).unwrap_or(class[0]);
        if mdp.is_safe(rep) {
            safe.push(c);
        }
        let rows: Vec<Vec<f64>> = (0..mdp.n_actions()).map(|a| summed(rep, a)).collect();
        for &s in class {
            for a in 0..mdp.n_actions() {
                let gap = (mdp.reward(s, a) - mdp.reward(rep, a)).abs();
                let drift = summed(s, a)
                    .iter()
                    .zip(&rows[a])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                if gap > merge_tol || drift > merge_tol {
                    return Err(Error::QuotientRejected(format!(
                        "state {} disagrees with representative {} under action {} (reward gap {gap:e}, transition gap {drift:e})",
                        mdp.state_ids()[s],
                        mdp.state_ids()[rep],
                        mdp.action_ids()[a]
                    )));
                }
            }
        }
        transition.push(rows);
        reward.push(mdp.rewards()[rep].clone());
    }
    let ids = partition
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|&s| mdp.state_ids()[s].as_str())
                .collect::<Vec<_>>()
                .join("+")
        })
        .collect();
    let quotient = MdpSpec::new(ids, mdp.action_ids().to_vec(), transition, reward, mdp.discount(), safe)
        .map_err(|e| Error::QuotientRejected(e.to_string()))?;
    Ok(QuotientResult { partition, quotient, lift })
}
