//! Finite MDPs, policies, induced Markov chains and the dynamic-programming
//! solvers the rest of the crate is built on.
//!
//! States and actions are indexed in file order. Rewards are stored per
//! state-action pair; [`MdpSpec::with_sas_rewards`] folds `R(s, a, s')` into
//! its expectation under `P(s, a)`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Absolute tolerance used for every stochasticity check.
pub const VALIDATION_TOL: f64 = 1e-12;

/// A single broken invariant, with its location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Dimension { detail: String },
    DuplicateId { list: String, id: String },
    UnknownSafeState { id: String },
    Probability { state: usize, action: usize, next: usize, value: f64 },
    RowSum { state: usize, action: usize, sum: f64 },
    SafeLeak { state: usize, action: usize, escaping_mass: f64 },
    Discount { value: f64 },
    Reward { state: usize, action: usize, value: f64 },
    RewardFormat { detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "; {v:?}")?;
        }
        Ok(())
    }
}

/// A finite MDP `(S, A, P, r, gamma)` together with its absorbing safe set.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    state_ids: Vec<String>,
    action_ids: Vec<String>,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    discount: f64,
    safe: Vec<usize>,
}

impl MdpSpec {
    /// Builds and validates an MDP. `safe` holds state indices.
    pub fn new(
        state_ids: Vec<String>,
        action_ids: Vec<String>,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        safe: Vec<usize>,
    ) -> Result<Self> {
        let mdp = Self::new_unchecked(state_ids, action_ids, transition, reward, discount, safe);
        let report = validate(&mdp);
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(report))
        }
    }

    /// Builds an MDP from `R(s, a, s')`, storing `r[s][a] = sum_s' P[s][a][s'] R(s, a, s')`.
    pub fn with_sas_rewards(
        state_ids: Vec<String>,
        action_ids: Vec<String>,
        transition: Vec<Vec<Vec<f64>>>,
        rewards_sas: &[Vec<Vec<f64>>],
        discount: f64,
        safe: Vec<usize>,
    ) -> Result<Self> {
        let reward = expected_rewards(&transition, rewards_sas)
            .map_err(|detail| Error::InvalidMdp(report_of(Violation::RewardFormat { detail })))?;
        Self::new(state_ids, action_ids, transition, reward, discount, safe)
    }

    /// Skips validation. Only [`validate`] may be called safely on the result
    /// if the dimensions are inconsistent.
    pub fn new_unchecked(
        state_ids: Vec<String>,
        action_ids: Vec<String>,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        mut safe: Vec<usize>,
    ) -> Self {
        safe.sort_unstable();
        safe.dedup();
        Self {
            state_ids,
            action_ids,
            transition,
            reward,
            discount,
            safe,
        }
    }

    pub fn n_states(&self) -> usize {
        self.state_ids.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_ids.len()
    }

    pub fn state_ids(&self) -> &[String] {
        &self.state_ids
    }

    pub fn action_ids(&self) -> &[String] {
        &self.action_ids
    }

    pub fn transition(&self) -> &[Vec<Vec<f64>>] {
        &self.transition
    }

    /// Next-state distribution `P(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[s][a][next]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.reward
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Sorted safe-state indices.
    pub fn safe(&self) -> &[usize] {
        &self.safe
    }

    pub fn is_safe(&self, s: usize) -> bool {
        self.safe.binary_search(&s).is_ok()
    }

    /// Non-safe state indices in order.
    pub fn non_safe(&self) -> Vec<usize> {
        (0..self.n_states()).filter(|&s| !self.is_safe(s)).collect()
    }

    pub fn state_index(&self, id: &str) -> Option<usize> {
        self.state_ids.iter().position(|s| s == id)
    }

    pub fn action_index(&self, id: &str) -> Option<usize> {
        self.action_ids.iter().position(|a| a == id)
    }

    /// Same MDP with every reward multiplied by `scale`.
    pub fn scale_rewards(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.reward {
            for r in row {
                *r *= scale;
            }
        }
        out
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument {
            states: self.state_ids.clone(),
            actions: self.action_ids.clone(),
            transitions: self.transition.clone(),
            rewards: Some(self.reward.clone()),
            rewards_sas: None,
            discount: self.discount,
            safe: self.safe.iter().map(|&s| self.state_ids[s].clone()).collect(),
            embedding: None,
            side_info: None,
            generator: None,
        }
    }

    /// Parses and validates a JSON MDP document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.into_mdp()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

fn report_of(v: Violation) -> ValidationReport {
    ValidationReport { violations: vec![v] }
}

fn expected_rewards(
    transition: &[Vec<Vec<f64>>],
    rewards_sas: &[Vec<Vec<f64>>],
) -> std::result::Result<Vec<Vec<f64>>, String> {
    if rewards_sas.len() != transition.len() {
        return Err("rewards_sas state dimension differs from transitions".into());
    }
    transition
        .iter()
        .zip(rewards_sas)
        .enumerate()
        .map(|(s, (p_s, r_s))| {
            if p_s.len() != r_s.len() {
                return Err(format!("rewards_sas action dimension differs at state {s}"));
            }
            p_s.iter()
                .zip(r_s)
                .enumerate()
                .map(|(a, (p, r))| {
                    if p.len() != r.len() {
                        return Err(format!("rewards_sas next-state dimension differs at ({s}, {a})"));
                    }
                    Ok(p.iter().zip(r).map(|(p, r)| p * r).sum())
                })
                .collect()
        })
        .collect()
}

/// Serialized form of an MDP (optionally carrying embedding coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub transitions: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards_sas: Option<Vec<Vec<Vec<f64>>>>,
    pub discount: f64,
    pub safe: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_info: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

/// Provenance of generated documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub name: String,
    pub rng: String,
    pub seed: u64,
}

impl MdpDocument {
    /// Resolves ids and reward format without validating probabilities.
    /// Format problems are returned as violations.
    pub fn to_unchecked(&self) -> (MdpSpec, Vec<Violation>) {
        let mut violations = Vec::new();
        let mut safe = Vec::new();
        for id in &self.safe {
            match self.states.iter().position(|s| s == id) {
                Some(i) => safe.push(i),
                None => violations.push(Violation::UnknownSafeState { id: id.clone() }),
            }
        }
        let reward = match (&self.rewards, &self.rewards_sas) {
            (Some(r), None) => r.clone(),
            (None, Some(sas)) => match expected_rewards(&self.transitions, sas) {
                Ok(r) => r,
                Err(detail) => {
                    violations.push(Violation::RewardFormat { detail });
                    Vec::new()
                }
            },
            (Some(_), Some(_)) => {
                violations.push(Violation::RewardFormat {
                    detail: "\"rewards\" and \"rewards_sas\" are mutually exclusive".into(),
                });
                Vec::new()
            }
            (None, None) => {
                violations.push(Violation::RewardFormat {
                    detail: "one of \"rewards\" or \"rewards_sas\" is required".into(),
                });
                Vec::new()
            }
        };
        let mdp = MdpSpec::new_unchecked(
            self.states.clone(),
            self.actions.clone(),
            self.transitions.clone(),
            reward,
            self.discount,
            safe,
        );
        (mdp, violations)
    }

    /// Full validation report of the document.
    pub fn validate(&self) -> ValidationReport {
        let (mdp, mut violations) = self.to_unchecked();
        let reward_format_broken = violations
            .iter()
            .any(|v| matches!(v, Violation::RewardFormat { .. }));
        for v in validate(&mdp).violations {
            // An unusable reward block already reported; skip its dimension echo.
            if reward_format_broken && matches!(&v, Violation::Dimension { detail } if detail.starts_with("reward")) {
                continue;
            }
            violations.push(v);
        }
        ValidationReport { violations }
    }

    pub fn into_mdp(self) -> Result<MdpSpec> {
        let report = self.validate();
        if !report.is_valid() {
            return Err(Error::InvalidMdp(report));
        }
        Ok(self.to_unchecked().0)
    }
}

/// Validates with the default tolerance.
pub fn validate(mdp: &MdpSpec) -> ValidationReport {
    validate_with_tol(mdp, VALIDATION_TOL)
}

/// Validates every invariant. The tolerance can only be loosened above
/// [`VALIDATION_TOL`].
pub fn validate_with_tol(mdp: &MdpSpec, tol: f64) -> ValidationReport {
    let tol = tol.max(VALIDATION_TOL);
    let mut out = Vec::new();
    let n = mdp.state_ids.len();
    let m = mdp.action_ids.len();

    for (list, ids) in [("states", &mdp.state_ids), ("actions", &mdp.action_ids)] {
        let mut seen = HashSet::new();
        for id in ids.iter() {
            if !seen.insert(id.as_str()) {
                out.push(Violation::DuplicateId {
                    list: list.into(),
                    id: id.clone(),
                });
            }
        }
    }
    if n == 0 {
        out.push(Violation::Dimension {
            detail: "at least one state is required".into(),
        });
    }
    if m == 0 {
        out.push(Violation::Dimension {
            detail: "at least one action is required".into(),
        });
    }
    if !(mdp.discount > 0.0 && mdp.discount < 1.0) {
        out.push(Violation::Discount { value: mdp.discount });
    }
    for &s in &mdp.safe {
        if s >= n {
            out.push(Violation::Dimension {
                detail: format!("safe state index {s} out of range"),
            });
        }
    }

    let mut shape_ok = true;
    if mdp.transition.len() != n {
        out.push(Violation::Dimension {
            detail: format!("transitions have {} state rows, expected {n}", mdp.transition.len()),
        });
        shape_ok = false;
    }
    for (s, p_s) in mdp.transition.iter().enumerate() {
        if p_s.len() != m {
            out.push(Violation::Dimension {
                detail: format!("transitions[{s}] has {} actions, expected {m}", p_s.len()),
            });
            shape_ok = false;
            continue;
        }
        for (a, row) in p_s.iter().enumerate() {
            if row.len() != n {
                out.push(Violation::Dimension {
                    detail: format!("transitions[{s}][{a}] has {} entries, expected {n}", row.len()),
                });
                shape_ok = false;
            }
        }
    }
    if mdp.reward.len() != n || mdp.reward.iter().any(|r| r.len() != m) {
        out.push(Violation::Dimension {
            detail: format!("rewards must be {n} x {m}"),
        });
    } else {
        for (s, row) in mdp.reward.iter().enumerate() {
            for (a, &r) in row.iter().enumerate() {
                if !r.is_finite() {
                    out.push(Violation::Reward { state: s, action: a, value: r });
                }
            }
        }
    }
    if !shape_ok {
        return ValidationReport { violations: out };
    }

    let safe_valid: Vec<usize> = mdp.safe.iter().copied().filter(|&s| s < n).collect();
    for (s, p_s) in mdp.transition.iter().enumerate() {
        for (a, row) in p_s.iter().enumerate() {
            let mut sum = 0.0;
            for (next, &p) in row.iter().enumerate() {
                if !(p.is_finite() && (-tol..=1.0 + tol).contains(&p)) {
                    out.push(Violation::Probability {
                        state: s,
                        action: a,
                        next,
                        value: p,
                    });
                }
                sum += p;
            }
            if !((sum - 1.0).abs() <= tol) {
                out.push(Violation::RowSum { state: s, action: a, sum });
            }
            if safe_valid.binary_search(&s).is_ok() {
                let inside: f64 = safe_valid.iter().map(|&t| row[t]).sum();
                if !((inside - 1.0).abs() <= tol) {
                    out.push(Violation::SafeLeak {
                        state: s,
                        action: a,
                        escaping_mass: 1.0 - inside,
                    });
                }
            }
        }
    }
    ValidationReport { violations: out }
}

/// A stationary policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "table", rename_all = "snake_case")]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Vec<Vec<f64>>),
}

impl Policy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy::Stochastic(vec![vec![1.0 / n_actions as f64; n_actions]; n_states])
    }

    pub fn n_states(&self) -> usize {
        match self {
            Policy::Deterministic(t) => t.len(),
            Policy::Stochastic(t) => t.len(),
        }
    }

    /// Probability of action `a` in state `s`.
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic(t) => f64::from(u8::from(t[s] == a)),
            Policy::Stochastic(t) => t[s][a],
        }
    }

    /// Checks dimensions and row-stochasticity against `mdp`.
    pub fn check(&self, mdp: &MdpSpec) -> Result<()> {
        let (n, m) = (mdp.n_states(), mdp.n_actions());
        if self.n_states() != n {
            return Err(Error::Dimension(format!(
                "policy covers {} states, MDP has {n}",
                self.n_states()
            )));
        }
        match self {
            Policy::Deterministic(t) => {
                if let Some((s, &a)) = t.iter().enumerate().find(|(_, &a)| a >= m) {
                    return Err(Error::Dimension(format!("action {a} at state {s} out of range")));
                }
            }
            Policy::Stochastic(t) => {
                for (s, row) in t.iter().enumerate() {
                    if row.len() != m {
                        return Err(Error::Dimension(format!("policy row {s} has {} actions", row.len())));
                    }
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > VALIDATION_TOL {
                        return Err(Error::InvalidArgument(format!(
                            "policy row {s} is not a distribution (sum {sum})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Optimal,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub kind: ValueKind,
    /// Sup-norm of the last sweep change (optimal) or of the linear-system
    /// residual (policy).
    pub residual: f64,
}

/// Markov chain of a fixed policy restricted to the non-safe states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedChain {
    pub q: Matrix,
    /// One-step probability of entering the safe set.
    pub absorb: Vec<f64>,
    /// Chain index -> MDP state index.
    pub index_map: Vec<usize>,
    pub n_states: usize,
}

impl InducedChain {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    /// MDP state index -> chain index.
    pub fn chain_index(&self, state: usize) -> Option<usize> {
        self.index_map.iter().position(|&s| s == state)
    }
}

/// Full `|S| x |S|` transition matrix of `mdp` under `policy`.
pub fn policy_matrix(mdp: &MdpSpec, policy: &Policy) -> Result<Matrix> {
    policy.check(mdp)?;
    let n = mdp.n_states();
    Ok((0..n)
        .map(|s| {
            let mut row = vec![0.0; n];
            for a in 0..mdp.n_actions() {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (r, p) in row.iter_mut().zip(mdp.row(s, a)) {
                    *r += w * p;
                }
            }
            row
        })
        .collect())
}

/// Expected one-step reward under `policy`.
pub fn policy_rewards(mdp: &MdpSpec, policy: &Policy) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| policy.prob(s, a) * mdp.reward(s, a)).sum())
        .collect()
}

pub fn induce_chain(mdp: &MdpSpec, policy: &Policy) -> Result<InducedChain> {
    let full = policy_matrix(mdp, policy)?;
    let index_map = mdp.non_safe();
    let q = linalg::submatrix(&full, &index_map, &index_map);
    let absorb = index_map
        .iter()
        .map(|&s| mdp.safe().iter().map(|&t| full[s][t]).sum())
        .collect();
    Ok(InducedChain {
        q,
        absorb,
        index_map,
        n_states: mdp.n_states(),
    })
}

fn check_discount(mdp: &MdpSpec) -> Result<()> {
    let g = mdp.discount();
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::InvalidArgument(format!("discount {g} must lie in (0, 1)")));
    }
    Ok(())
}

fn q_value(mdp: &MdpSpec, values: &[f64], s: usize, a: usize) -> f64 {
    let next: f64 = mdp.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
    mdp.reward(s, a) + mdp.discount() * next
}

/// Optimal values with sup-norm error at most `tol`.
pub fn value_iteration(mdp: &MdpSpec, tol: f64) -> Result<ValueFunction> {
    check_discount(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let g = mdp.discount();
    let stop = tol * (1.0 - g) / (2.0 * g);
    let mut values = vec![0.0; mdp.n_states()];
    loop {
        let next: Vec<f64> = (0..mdp.n_states())
            .map(|s| {
                (0..mdp.n_actions())
                    .map(|a| q_value(mdp, &values, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let change = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if change < stop {
            return Ok(ValueFunction {
                values,
                kind: ValueKind::Optimal,
                residual: change,
            });
        }
    }
}

/// Greedy deterministic policy; ties go to the lowest action index.
pub fn greedy_policy(mdp: &MdpSpec, values: &[f64]) -> Policy {
    Policy::Deterministic(
        (0..mdp.n_states())
            .map(|s| {
                let mut best = 0;
                let mut best_q = f64::NEG_INFINITY;
                for a in 0..mdp.n_actions() {
                    let q = q_value(mdp, values, s, a);
                    if q > best_q {
                        best_q = q;
                        best = a;
                    }
                }
                best
            })
            .collect(),
    )
}

/// Exact `V^pi` from `(I - gamma P_pi) V = r_pi`.
pub fn policy_evaluation(mdp: &MdpSpec, policy: &Policy) -> Result<ValueFunction> {
    check_discount(mdp)?;
    let p = policy_matrix(mdp, policy)?;
    let r = policy_rewards(mdp, policy);
    let a = linalg::identity_minus(&p, mdp.discount());
    let values = linalg::solve(&a, &r).ok_or_else(|| Error::NumericalSolve {
        context: "policy evaluation".into(),
        spectral_radius: None,
    })?;
    let residual = linalg::mat_vec(&a, &values)
        .iter()
        .zip(&r)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(ValueFunction {
        values,
        kind: ValueKind::Policy,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// s0 --go--> s1 (safe), s0 --stay--> s0.
    fn two_state() -> MdpSpec {
        MdpSpec::new(
            ids("s", 2),
            vec!["go".into(), "stay".into()],
            vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            ],
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            0.9,
            vec![1],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_mdp_has_empty_report() {
        assert!(validate(&two_state()).is_valid());
    }

    #[test]
    fn short_row_reported_once() {
        let mut t = two_state().transition().to_vec();
        t[0][1] = vec![0.9, 0.0];
        let mdp = MdpSpec::new_unchecked(ids("s", 2), ids("a", 2), t, vec![vec![0.0; 2]; 2], 0.9, vec![1]);
        let report = validate(&mdp);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::RowSum { state: 0, action: 1, .. }));
    }

    #[test]
    fn leaking_safe_state_reported() {
        let mut t = two_state().transition().to_vec();
        t[1][0] = vec![0.1, 0.9];
        let mdp = MdpSpec::new_unchecked(ids("s", 2), ids("a", 2), t, vec![vec![0.0; 2]; 2], 0.9, vec![1]);
        let report = validate(&mdp);
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::SafeLeak { state, action, escaping_mass } => {
                assert_eq!((*state, *action), (1, 0));
                assert!((escaping_mass - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_tensor_is_a_dimension_violation() {
        let mdp = MdpSpec::new_unchecked(
            ids("s", 2),
            ids("a", 1),
            vec![vec![vec![1.0, 0.0]], vec![vec![1.0]]],
            vec![vec![0.0]; 2],
            0.5,
            vec![],
        );
        let report = validate(&mdp);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Dimension { .. })));
    }

    #[test]
    fn duplicate_ids_and_bad_discount() {
        let mdp = MdpSpec::new_unchecked(
            vec!["x".into(), "x".into()],
            ids("a", 1),
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0]; 2],
            1.0,
            vec![],
        );
        let report = validate(&mdp);
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn sas_rewards_are_averaged() {
        let mdp = MdpSpec::with_sas_rewards(
            ids("s", 2),
            ids("a", 1),
            vec![vec![vec![0.25, 0.75]], vec![vec![0.0, 1.0]]],
            &[vec![vec![4.0, 0.0]], vec![vec![0.0, 0.0]]],
            0.5,
            vec![1],
        )
        .unwrap();
        assert_eq!(mdp.reward(0, 0), 1.0);
    }

    #[test]
    fn document_rejects_both_reward_forms() {
        let mut doc = two_state().to_document();
        doc.rewards_sas = Some(vec![vec![vec![0.0; 2]; 2]; 2]);
        let report = doc.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::RewardFormat { .. }));
    }

    #[test]
    fn json_round_trip() {
        let mdp = two_state();
        let back = MdpSpec::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(back, mdp);
    }

    #[test]
    fn deterministic_chain_is_zero_one() {
        let mdp = two_state();
        let chain = induce_chain(&mdp, &Policy::Deterministic(vec![1, 0])).unwrap();
        assert_eq!(chain.q, vec![vec![1.0]]);
        assert_eq!(chain.absorb, vec![0.0]);
        let chain = induce_chain(&mdp, &Policy::Deterministic(vec![0, 0])).unwrap();
        assert_eq!(chain.q, vec![vec![0.0]]);
        assert_eq!(chain.absorb, vec![1.0]);
    }

    #[test]
    fn uniform_policy_splits_mass() {
        let chain = induce_chain(&two_state(), &Policy::uniform(2, 2)).unwrap();
        assert_eq!(chain.absorb, vec![0.5]);
        assert_eq!(chain.q, vec![vec![0.5]]);
    }

    #[test]
    fn policy_dimension_mismatch() {
        assert!(matches!(
            induce_chain(&two_state(), &Policy::Deterministic(vec![0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn absorbing_zero_reward_has_zero_value() {
        let mdp = MdpSpec::new(ids("s", 1), ids("a", 1), vec![vec![vec![1.0]]], vec![vec![0.0]], 0.9, vec![0]).unwrap();
        assert_eq!(value_iteration(&mdp, 1e-9).unwrap().values, vec![0.0]);
        assert_eq!(policy_evaluation(&mdp, &Policy::Deterministic(vec![0])).unwrap().values, vec![0.0]);
    }

    #[test]
    fn geometric_series_values() {
        let half = MdpSpec::new(ids("s", 1), ids("a", 1), vec![vec![vec![1.0]]], vec![vec![1.0]], 0.5, vec![]).unwrap();
        let v = value_iteration(&half, 1e-10).unwrap();
        assert!((v.values[0] - 2.0).abs() <= 1e-10);

        let nine = MdpSpec::new(ids("s", 1), ids("a", 1), vec![vec![vec![1.0]]], vec![vec![1.0]], 0.9, vec![]).unwrap();
        let v = policy_evaluation(&nine, &Policy::Deterministic(vec![0])).unwrap();
        assert!((v.values[0] - 10.0).abs() < 1e-12);
        assert!(v.residual < 1e-12);
    }

    #[test]
    fn discount_one_rejected() {
        let mdp = MdpSpec::new_unchecked(ids("s", 1), ids("a", 1), vec![vec![vec![1.0]]], vec![vec![1.0]], 1.0, vec![]);
        assert!(value_iteration(&mdp, 1e-6).is_err());
    }
}
