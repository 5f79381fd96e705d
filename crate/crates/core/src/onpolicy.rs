//! Fixed-policy analysis on embedded state spaces: the probability of ever
//! reaching the safe set, its sensitivity to perturbations of the state
//! embedding and of the environment, and the local rate-of-decrease bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mdp::{MdpDocument, MdpSpec, VALIDATION_TOL};
use crate::safety::StartDistribution;

/// Transition probabilities at or below this count as zero for reachability.
pub const SUPPORT_CUTOFF: f64 = 1e-15;
/// Per-state displacement above which first-order verdicts are not trusted.
pub const LINEARIZATION_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedMdp {
    pub base: MdpSpec,
    pub embedding: Matrix,
    pub side_info: Vec<String>,
}

impl EmbeddedMdp {
    pub fn new(base: MdpSpec, embedding: Matrix, side_info: Option<Vec<String>>) -> Result<Self> {
        let n = base.n_states();
        if embedding.len() != n {
            return Err(Error::Dimension(format!("embedding has {} rows, expected {n}", embedding.len())));
        }
        let d = embedding.first().map_or(0, Vec::len);
        if embedding.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Dimension("embedding rows must share one finite dimension".into()));
        }
        let side_info = side_info.unwrap_or_else(|| vec![String::new(); n]);
        if side_info.len() != n {
            return Err(Error::Dimension(format!("side_info has {} entries, expected {n}", side_info.len())));
        }
        Ok(Self {
            base,
            embedding,
            side_info,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.first().map_or(0, Vec::len)
    }

    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        let embedding = doc
            .embedding
            .clone()
            .ok_or_else(|| Error::InvalidArgument("document has no \"embedding\"".into()))?;
        let side_info = doc.side_info.clone();
        Self::new(doc.into_mdp()?, embedding, side_info)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn to_document(&self) -> MdpDocument {
        let mut doc = self.base.to_document();
        doc.embedding = Some(self.embedding.clone());
        if self.side_info.iter().any(|s| !s.is_empty()) {
            doc.side_info = Some(self.side_info.clone());
        }
        doc
    }
}

/// A policy computed from embedding coordinates only.
pub trait DiffPolicy: Sync {
    fn n_actions(&self) -> usize;
    fn dim(&self) -> usize;
    fn probs(&self, x: &[f64]) -> Vec<f64>;
    /// `|A| x d` matrix of partial derivatives.
    fn jacobian(&self, x: &[f64]) -> Matrix;
    /// Upper bound on `||grad pi||` over the states of interest.
    fn bound_b(&self) -> f64;
}

/// `pi(x) = softmax(W x / T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub weights: Matrix,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_b: Option<f64>,
}

/// Softmax-linear toy policy with the analytic bound `2 max_a |w_a| / T`.
pub fn make_toy_policy(weights: Matrix, temperature: f64) -> Result<SoftmaxPolicy> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if weights.is_empty() {
        return Err(Error::Dimension("at least one action is required".into()));
    }
    let d = weights[0].len();
    if weights.iter().any(|w| w.len() != d || w.iter().any(|v| !v.is_finite())) {
        return Err(Error::Dimension("weight rows must share one finite dimension".into()));
    }
    let mut policy = SoftmaxPolicy {
        weights,
        temperature,
        bound_b: None,
    };
    policy.bound_b = Some(policy.analytic_bound());
    Ok(policy)
}

impl SoftmaxPolicy {
    pub fn analytic_bound(&self) -> f64 {
        let max_norm = self
            .weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        2.0 * max_norm / self.temperature
    }

    /// Replaces `b` by the exact maximum of `||grad pi||` over `points` when
    /// that is smaller than the analytic bound.
    pub fn tightened_for(mut self, points: &[Vec<f64>]) -> Self {
        let sampled = points
            .iter()
            .map(|x| jacobian_norm(&self.jacobian(x)))
            .fold(0.0, f64::max);
        self.bound_b = Some(self.analytic_bound().min(sampled));
        self
    }
}

impl DiffPolicy for SoftmaxPolicy {
    fn n_actions(&self) -> usize {
        self.weights.len()
    }

    fn dim(&self) -> usize {
        self.weights[0].len()
    }

    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / self.temperature)
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    fn jacobian(&self, x: &[f64]) -> Matrix {
        let p = self.probs(x);
        let d = self.dim();
        let mean: Vec<f64> = (0..d)
            .map(|k| p.iter().zip(&self.weights).map(|(pb, w)| pb * w[k]).sum())
            .collect();
        p.iter()
            .zip(&self.weights)
            .map(|(pa, w)| (0..d).map(|k| pa * (w[k] - mean[k]) / self.temperature).collect())
            .collect()
    }

    fn bound_b(&self) -> f64 {
        self.bound_b.unwrap_or_else(|| self.analytic_bound())
    }
}

/// Operator norm of `J` from Euclidean `R^d` to `l1(A)`:
/// `max over sign vectors s of |J^T s|_2`.
pub fn jacobian_norm(j: &[Vec<f64>]) -> f64 {
    let m = j.len();
    let d = j.first().map_or(0, Vec::len);
    if m == 0 || d == 0 {
        return 0.0;
    }
    if m > 20 {
        return j.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    }
    // Fixing the first sign covers each +-pair once.
    (0..1usize << (m - 1))
        .map(|mask| {
            let mut v = j[0].clone();
            for (a, row) in j.iter().enumerate().skip(1) {
                let sign = if mask >> (a - 1) & 1 == 1 { -1.0 } else { 1.0 };
                for (vk, r) in v.iter_mut().zip(row) {
                    *vk += sign * r;
                }
            }
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Central finite-difference Jacobian.
pub fn finite_difference_jacobian<P: DiffPolicy + ?Sized>(policy: &P, x: &[f64], h: f64) -> Matrix {
    let mut out = vec![vec![0.0; x.len()]; policy.n_actions()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let plus = policy.probs(&xp);
        xp[k] = x[k] - h;
        let minus = policy.probs(&xp);
        xp[k] = x[k];
        for a in 0..out.len() {
            out[a][k] = (plus[a] - minus[a]) / (2.0 * h);
        }
    }
    out
}

fn check_probs(p: &[f64], n_actions: usize, state: usize) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.len() != n_actions || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "policy output at state {state} is not a distribution over {n_actions} actions"
        )));
    }
    Ok(())
}

fn realize(mdp: &MdpSpec, embedding: &[Vec<f64>], policy: &(impl DiffPolicy + ?Sized)) -> Result<Matrix> {
    let n = mdp.n_states();
    if policy.dim() != embedding.first().map_or(0, Vec::len) {
        return Err(Error::Dimension("policy dimension differs from the embedding".into()));
    }
    (0..n)
        .map(|s| {
            let p = policy.probs(&embedding[s]);
            check_probs(&p, mdp.n_actions(), s)?;
            let mut row = vec![0.0; n];
            for (a, &w) in p.iter().enumerate() {
                for (r, t) in row.iter_mut().zip(mdp.row(s, a)) {
                    *r += w * t;
                }
            }
            Ok(row)
        })
        .collect()
}

/// `P[i][j] = sum_a pi(f(s_i))(a) P_env[s_i][a][s_j]`.
pub fn realize_chain<P: DiffPolicy + ?Sized>(emdp: &EmbeddedMdp, policy: &P) -> Result<Matrix> {
    realize(&emdp.base, &emdp.embedding, policy)
}

/// Non-safe states with a positive-probability path into `safe`.
pub fn transient_set(p: &[Vec<f64>], safe: &[usize]) -> Vec<usize> {
    let n = p.len();
    let mut mark = vec![false; n];
    let mut stack: Vec<usize> = safe.to_vec();
    for &s in safe {
        mark[s] = true;
    }
    while let Some(j) = stack.pop() {
        for i in 0..n {
            if !mark[i] && p[i][j] > SUPPORT_CUTOFF {
                mark[i] = true;
                stack.push(i);
            }
        }
    }
    (0..n).filter(|&i| mark[i] && !safe.contains(&i)).collect()
}

/// Probability of eventually entering `safe` from each state.
pub fn shutdown_probabilities(p: &[Vec<f64>], safe: &[usize]) -> Result<Vec<f64>> {
    let n = p.len();
    let trans = transient_set(p, safe);
    let ptt = linalg::submatrix(p, &trans, &trans);
    let rhs: Vec<f64> = trans.iter().map(|&i| safe.iter().map(|&s| p[i][s]).sum()).collect();
    let x = linalg::solve(&linalg::identity_minus(&ptt, 1.0), &rhs).ok_or_else(|| Error::NumericalSolve {
        context: "shutdown probability".into(),
        spectral_radius: Some(spectral_radius(&ptt).value),
    })?;
    let mut out = vec![0.0; n];
    for &s in safe {
        out[s] = 1.0;
    }
    for (k, &i) in trans.iter().enumerate() {
        out[i] = x[k].clamp(0.0, 1.0);
    }
    Ok(out)
}

fn check_square(p: &[Vec<f64>], safe: &[usize]) -> Result<()> {
    let n = p.len();
    if p.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("transition matrix must be square".into()));
    }
    if let Some(&s) = safe.iter().find(|&&s| s >= n) {
        return Err(Error::Dimension(format!("safe state {s} out of range")));
    }
    Ok(())
}

/// `Delta_safe + Delta_T (I - P_TT)^{-1} P_{T,safe} 1`.
pub fn shutdown_probability(p: &[Vec<f64>], safe: &[usize], start: &StartDistribution) -> Result<f64> {
    check_square(p, safe)?;
    if start.weights.len() != p.len() {
        return Err(Error::Dimension("start distribution length differs from the chain".into()));
    }
    let h = shutdown_probabilities(p, safe)?;
    Ok(start.weights.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>().clamp(0.0, 1.0))
}

/// Partial sums of `sum_t Delta (P I_trans)^t P v_safe` plus the mass
/// starting inside `safe`, for `t = 0..terms`.
pub fn shutdown_series(p: &[Vec<f64>], safe: &[usize], start: &StartDistribution, terms: usize) -> f64 {
    let n = p.len();
    let trans = transient_set(p, safe);
    let mut row: Vec<f64> = (0..n)
        .map(|i| if trans.contains(&i) { start.weights[i] } else { 0.0 })
        .collect();
    let into_safe: Vec<f64> = (0..n).map(|i| safe.iter().map(|&s| p[i][s]).sum()).collect();
    let mut total: f64 = safe.iter().map(|&s| start.weights[s]).sum();
    for _ in 0..terms {
        total += row.iter().zip(&into_safe).map(|(a, b)| a * b).sum::<f64>();
        let next = linalg::vec_mat(&row, p);
        row = (0..n).map(|j| if trans.contains(&j) { next[j] } else { 0.0 }).collect();
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    /// `||P^64||_1^(1/64)`.
    pub gelfand: f64,
    /// Power iteration and Gelfand estimate agree within 1e-3.
    pub agrees: bool,
    pub converged: bool,
    pub iterations: usize,
}

const POWER_CAP: usize = 200_000;

/// Strongly connected components of the positive-entry graph (Tarjan).
fn components(p: &[Vec<f64>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        p: &'a [Vec<f64>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(st: &mut State<'_>, v: usize) {
        st.index[v] = Some(st.next);
        st.low[v] = st.next;
        st.next += 1;
        st.stack.push(v);
        st.on_stack[v] = true;
        for w in 0..st.p.len() {
            if st.p[v][w] <= 0.0 {
                continue;
            }
            match st.index[w] {
                None => {
                    visit(st, w);
                    st.low[v] = st.low[v].min(st.low[w]);
                }
                Some(iw) if st.on_stack[w] => st.low[v] = st.low[v].min(iw),
                Some(_) => {}
            }
        }
        if Some(st.low[v]) == st.index[v] {
            let mut comp = Vec::new();
            while let Some(w) = st.stack.pop() {
                st.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort_unstable();
            st.out.push(comp);
        }
    }
    let n = p.len();
    let mut st = State {
        p,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if st.index[v].is_none() {
            visit(&mut st, v);
        }
    }
    st.out
}

/// Perron root of an irreducible block: power iteration on `B + I`, whose
/// iterates stay positive, until the Collatz-Wielandt bounds
/// `min_i (Bx)_i / x_i <= rho <= max_i (Bx)_i / x_i` meet to 1e-10 relative.
fn irreducible_radius(b: &[Vec<f64>]) -> (f64, bool, usize) {
    let n = b.len();
    if n == 1 {
        return (b[0][0], true, 0);
    }
    let mut x = vec![1.0; n];
    let mut bounds = (0.0, f64::INFINITY);
    for it in 1..=POWER_CAP {
        let y = linalg::mat_vec(b, &x);
        let ratios = y.iter().zip(&x).map(|(yi, xi)| yi / xi);
        let lower = ratios.clone().fold(f64::INFINITY, f64::min);
        let upper = ratios.fold(0.0, f64::max);
        bounds = (lower, upper);
        if upper - lower <= 1e-10 * upper.max(f64::MIN_POSITIVE) {
            return (0.5 * (lower + upper), true, it);
        }
        let next: Vec<f64> = y.iter().zip(&x).map(|(yi, xi)| yi + xi).collect();
        let scale = next.iter().copied().fold(0.0, f64::max);
        x = next.iter().map(|v| v / scale).collect();
    }
    (0.5 * (bounds.0 + bounds.1), false, POWER_CAP)
}

/// Spectral radius of a nonnegative square matrix: the largest Perron root
/// over the irreducible diagonal blocks, cross-checked by `||P^64||_1^(1/64)`.
pub fn spectral_radius(p: &[Vec<f64>]) -> SpectralEstimate {
    let n = p.len();
    if n == 0 {
        return SpectralEstimate {
            value: 0.0,
            gelfand: 0.0,
            agrees: true,
            converged: true,
            iterations: 0,
        };
    }
    let mut power = p.to_vec();
    for _ in 0..6 {
        power = linalg::mat_mul(&power, &power);
    }
    let gelfand = linalg::one_norm(&power).powf(1.0 / 64.0);

    let mut value = 0.0_f64;
    let mut converged = true;
    let mut iterations = 0;
    for comp in components(p) {
        let (rho, ok, it) = irreducible_radius(&linalg::submatrix(p, &comp, &comp));
        value = value.max(rho);
        converged &= ok;
        iterations = iterations.max(it);
    }
    if !converged {
        value = gelfand;
    }
    SpectralEstimate {
        value,
        gelfand,
        agrees: (value - gelfand).abs() <= 1e-3,
        converged,
        iterations,
    }
}

/// `(1 - l)^{-1} (1 + (1 - l)^{-1}) |S_safe|`.
pub fn decrease_bound(lambda1: f64, n_safe: usize) -> f64 {
    let inv = 1.0 / (1.0 - lambda1);
    inv * (1.0 + inv) * n_safe as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnPolicyAnalysis {
    pub s_trans: Vec<usize>,
    pub lambda1: f64,
    pub spectral: SpectralEstimate,
    pub safety: f64,
    #[serde(rename = "bound_B")]
    pub bound_b: f64,
}

pub fn analyze_chain(p: &[Vec<f64>], safe: &[usize], start: &StartDistribution) -> Result<OnPolicyAnalysis> {
    let safety = shutdown_probability(p, safe, start)?;
    let s_trans = transient_set(p, safe);
    let spectral = spectral_radius(&linalg::submatrix(p, &s_trans, &s_trans));
    let lambda1 = spectral.value;
    Ok(OnPolicyAnalysis {
        bound_b: decrease_bound(lambda1, safe.len()),
        s_trans,
        lambda1,
        spectral,
        safety,
    })
}

pub fn analyze<P: DiffPolicy + ?Sized>(emdp: &EmbeddedMdp, policy: &P, start: &StartDistribution) -> Result<OnPolicyAnalysis> {
    analyze_chain(&realize_chain(emdp, policy)?, emdp.base.safe(), start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta_s: Matrix,
    pub delta_t: Vec<Vec<Vec<f64>>>,
    pub size: f64,
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Perturbation {
    /// Validates the displacement against `emdp` and computes its size.
    pub fn new<P: DiffPolicy + ?Sized>(
        emdp: &EmbeddedMdp,
        policy: &P,
        delta_s: Matrix,
        delta_t: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let mut pert = Self {
            delta_s,
            delta_t,
            size: 0.0,
        };
        pert.size = perturbation_size(emdp, policy, &pert)?;
        Ok(pert)
    }

    pub fn zero(emdp: &EmbeddedMdp) -> Self {
        let (n, m) = (emdp.base.n_states(), emdp.base.n_actions());
        Self {
            delta_s: vec![vec![0.0; emdp.dim()]; n],
            delta_t: vec![vec![vec![0.0; n]; m]; n],
            size: 0.0,
        }
    }

    pub fn delta_s_norm(&self) -> f64 {
        self.delta_s.iter().map(|v| euclid(v)).sum()
    }

    pub fn delta_t_norm(&self) -> f64 {
        self.delta_t.iter().flatten().flatten().map(|v| v.abs()).sum()
    }

    fn check(&self, emdp: &EmbeddedMdp) -> Result<()> {
        let (n, m, d) = (emdp.base.n_states(), emdp.base.n_actions(), emdp.dim());
        if self.delta_s.len() != n || self.delta_s.iter().any(|v| v.len() != d) {
            return Err(Error::Dimension(format!("delta_S must be {n} x {d}")));
        }
        if self.delta_t.len() != n || self.delta_t.iter().any(|r| r.len() != m || r.iter().any(|x| x.len() != n)) {
            return Err(Error::Dimension(format!("delta_T must be {n} x {m} x {n}")));
        }
        for s in 0..n {
            for a in 0..m {
                let base = emdp.base.row(s, a);
                let delta = &self.delta_t[s][a];
                let shift: f64 = delta.iter().sum();
                if shift.abs() > VALIDATION_TOL || base.iter().zip(delta).any(|(p, q)| !(-VALIDATION_TOL..=1.0 + VALIDATION_TOL).contains(&(p + q))) {
                    return Err(Error::InvalidArgument(format!(
                        "perturbed row ({s}, {a}) is not a distribution"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The perturbed embedded MDP.
    pub fn apply(&self, emdp: &EmbeddedMdp) -> Result<EmbeddedMdp> {
        self.check(emdp)?;
        let base = &emdp.base;
        let transition = (0..base.n_states())
            .map(|s| {
                (0..base.n_actions())
                    .map(|a| {
                        base.row(s, a)
                            .iter()
                            .zip(&self.delta_t[s][a])
                            .map(|(p, q)| (p + q).clamp(0.0, 1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mdp = MdpSpec::new(
            base.state_ids().to_vec(),
            base.action_ids().to_vec(),
            transition,
            base.rewards().to_vec(),
            base.discount(),
            base.safe().to_vec(),
        )?;
        let embedding = emdp
            .embedding
            .iter()
            .zip(&self.delta_s)
            .map(|(x, dx)| x.iter().zip(dx).map(|(a, b)| a + b).collect())
            .collect();
        EmbeddedMdp::new(mdp, embedding, Some(emdp.side_info.clone()))
    }
}

/// `1/2 |S| b ||dS||_1 + ||dT||_1` with Euclidean per-state displacements.
pub fn perturbation_size<P: DiffPolicy + ?Sized>(emdp: &EmbeddedMdp, policy: &P, pert: &Perturbation) -> Result<f64> {
    pert.check(emdp)?;
    let n = emdp.base.n_states() as f64;
    Ok(0.5 * n * policy.bound_b() * pert.delta_s_norm() + pert.delta_t_norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainBoundReport {
    /// `|dP_ij|` from both realized chains.
    pub actual: Matrix,
    /// `1/2 ||grad pi(s_i)|| |ds_i| + sum_a |dT(s_i, a, s_j)|`.
    pub rhs: Matrix,
    /// Second-order allowance per entry.
    pub slack: Matrix,
    pub entries_hold: bool,
    pub violations: Vec<(usize, usize)>,
    pub delta_p_norm: f64,
    pub size: f64,
    pub total_slack: f64,
    /// `||dP||_1 <= ||dM||_1 + total_slack`.
    pub aggregate_holds: bool,
    /// Some `|ds_i|` exceeded the linearization threshold.
    pub first_order_only: bool,
}

/// Curvature estimate `max_t ||J(x + t dx) - J(x)|| / (t |dx|)` for `t` in {1/2, 1}.
fn curvature<P: DiffPolicy + ?Sized>(policy: &P, x: &[f64], dx: &[f64]) -> f64 {
    let len = euclid(dx);
    if len == 0.0 {
        return 0.0;
    }
    let j0 = policy.jacobian(x);
    [0.5, 1.0]
        .iter()
        .map(|&t| {
            let xt: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + t * b).collect();
            let jt = policy.jacobian(&xt);
            let diff: Matrix = jt
                .iter()
                .zip(&j0)
                .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a - b).collect())
                .collect();
            jacobian_norm(&diff) / (t * len)
        })
        .fold(0.0, f64::max)
}

pub fn chain_perturbation_bound<P: DiffPolicy + ?Sized>(
    emdp: &EmbeddedMdp,
    policy: &P,
    pert: &Perturbation,
    threshold: f64,
) -> Result<ChainBoundReport> {
    let size = perturbation_size(emdp, policy, pert)?;
    let after = pert.apply(emdp)?;
    let p0 = realize_chain(emdp, policy)?;
    let p1 = realize_chain(&after, policy)?;
    let n = p0.len();
    let m = emdp.base.n_actions();
    let mut actual = vec![vec![0.0; n]; n];
    let mut rhs = vec![vec![0.0; n]; n];
    let mut slack = vec![vec![0.0; n]; n];
    let mut violations = Vec::new();
    let mut first_order_only = false;
    for i in 0..n {
        let x = &emdp.embedding[i];
        let dx = &pert.delta_s[i];
        let len = euclid(dx);
        first_order_only |= len > threshold;
        let grad = jacobian_norm(&policy.jacobian(x));
        let kappa = curvature(policy, x, dx);
        let pi0 = policy.probs(x);
        let pi1 = policy.probs(&after.embedding[i]);
        let dpi: f64 = pi0.iter().zip(&pi1).map(|(a, b)| (a - b).abs()).sum();
        for j in 0..n {
            actual[i][j] = (p1[i][j] - p0[i][j]).abs();
            let dt: f64 = (0..m).map(|a| pert.delta_t[i][a][j].abs()).sum();
            let dt_max = (0..m).map(|a| pert.delta_t[i][a][j].abs()).fold(0.0, f64::max);
            rhs[i][j] = 0.5 * grad * len + dt;
            slack[i][j] = kappa * len * len + dpi * dt_max + 1e-15;
            if actual[i][j] > rhs[i][j] + slack[i][j] {
                violations.push((i, j));
            }
        }
    }
    let delta_p_norm: f64 = actual.iter().flatten().sum();
    let total_slack: f64 = slack.iter().flatten().sum();
    Ok(ChainBoundReport {
        entries_hold: violations.is_empty(),
        violations,
        aggregate_holds: delta_p_norm <= size + total_slack,
        delta_p_norm,
        size,
        total_slack,
        first_order_only,
        actual,
        rhs,
        slack,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub size: f64,
    pub safety_before: f64,
    pub safety_after: f64,
    pub delta_safety: f64,
    /// `-dS / ||dM||_1`, zero for a zero perturbation.
    pub ratio: f64,
    #[serde(rename = "bound_B")]
    pub bound_b: f64,
    pub lambda1: f64,
    pub below_bound: bool,
    /// `S_pi(M + dM) > S_pi(M) - B ||dM||_1`.
    pub lower_witness: bool,
    pub s_trans: Vec<usize>,
    pub s_trans_after: Vec<usize>,
    pub trans_included: bool,
}

pub fn rate_of_decrease_check<P: DiffPolicy + ?Sized>(
    emdp: &EmbeddedMdp,
    policy: &P,
    pert: &Perturbation,
    start: &StartDistribution,
) -> Result<RateReport> {
    let size = perturbation_size(emdp, policy, pert)?;
    let before = analyze(emdp, policy, start)?;
    let after_mdp = pert.apply(emdp)?;
    let after = analyze(&after_mdp, policy, start)?;
    let delta_safety = after.safety - before.safety;
    let ratio = if size > 0.0 { 0.0 - delta_safety / size } else { 0.0 };
    Ok(RateReport {
        size,
        safety_before: before.safety,
        safety_after: after.safety,
        delta_safety,
        ratio,
        bound_b: before.bound_b,
        lambda1: before.lambda1,
        below_bound: ratio < before.bound_b,
        lower_witness: size == 0.0 || after.safety > before.safety - before.bound_b * size,
        trans_included: before.s_trans.iter().all(|s| after.s_trans.contains(s)),
        s_trans: before.s_trans,
        s_trans_after: after.s_trans,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub difference: f64,
    pub l2_distance: f64,
    pub l2_bound_holds: bool,
    /// `1/2 ||d1 - d2||_1`, a bound that holds for every chain.
    pub half_l1_distance: f64,
    pub half_l1_bound_holds: bool,
}

/// `|S_pi(d1) - S_pi(d2)|` against both distances between the starts.
pub fn start_sensitivity(
    p: &[Vec<f64>],
    safe: &[usize],
    d1: &StartDistribution,
    d2: &StartDistribution,
) -> Result<SensitivityReport> {
    check_square(p, safe)?;
    if d1.weights.len() != p.len() || d2.weights.len() != p.len() {
        return Err(Error::Dimension("start distributions must match the chain".into()));
    }
    let h = shutdown_probabilities(p, safe)?;
    let diff: Vec<f64> = d1.weights.iter().zip(&d2.weights).map(|(a, b)| a - b).collect();
    let difference = diff.iter().zip(&h).map(|(d, v)| d * v).sum::<f64>().abs();
    let l2_distance = euclid(&diff);
    let half_l1_distance = 0.5 * diff.iter().map(|d| d.abs()).sum::<f64>();
    Ok(SensitivityReport {
        difference,
        l2_distance,
        l2_bound_holds: difference <= l2_distance + 1e-10,
        half_l1_distance,
        half_l1_bound_holds: difference <= half_l1_distance + 1e-10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_uniform_flat_policy() {
        let policy = make_toy_policy(vec![vec![0.0; 3]; 4], 0.5).unwrap();
        assert_eq!(policy.probs(&[0.3, -1.0, 2.0]), vec![0.25; 4]);
        assert!(policy.jacobian(&[0.3, -1.0, 2.0]).iter().flatten().all(|&v| v == 0.0));
        assert_eq!(policy.bound_b(), 0.0);
    }

    #[test]
    fn single_action_is_constant() {
        let policy = make_toy_policy(vec![vec![1.0, 2.0]], 1.0).unwrap();
        assert_eq!(policy.probs(&[5.0, -3.0]), vec![1.0]);
        assert_eq!(policy.jacobian(&[5.0, -3.0]), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn operator_norm_of_rank_one() {
        // J = [[1, 0], [-1, 0]]: unit x-direction gives l1 norm 2.
        assert!((jacobian_norm(&[vec![1.0, 0.0], vec![-1.0, 0.0]]) - 2.0).abs() < 1e-15);
        // J = [[1, 0], [0, 1]]: best unit vector is (1, 1)/sqrt 2.
        assert!((jacobian_norm(&[vec![1.0, 0.0], vec![0.0, 1.0]]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spectral_radius_small_cases() {
        assert!((spectral_radius(&[vec![0.5]]).value - 0.5).abs() < 1e-10);
        let r = spectral_radius(&[vec![0.0, 0.5], vec![0.5, 0.0]]);
        assert!((r.value - 0.5).abs() < 1e-10);
        assert!(r.agrees);
    }

    #[test]
    fn spectral_radius_of_reducible_matrices() {
        let r = spectral_radius(&[vec![0.3, 0.6], vec![0.0, 0.0]]);
        assert!((r.value - 0.3).abs() < 1e-12);
        let r = spectral_radius(&[vec![0.2, 0.5, 0.0], vec![0.0, 0.1, 0.4], vec![0.0, 0.4, 0.1]]);
        assert!((r.value - 0.5).abs() < 1e-10);
        assert_eq!(spectral_radius(&[vec![0.0, 1.0], vec![0.0, 0.0]]).value, 0.0);
    }

    #[test]
    fn shutdown_probability_cases() {
        // 0: safe. 1 -> safe or dead (2) with equal odds. 2: absorbing dead end.
        let p = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.0, 1.0]];
        let on = |s| StartDistribution::point(3, s).allowing_safe();
        assert_eq!(shutdown_probability(&p, &[0], &on(0)).unwrap(), 1.0);
        assert_eq!(shutdown_probability(&p, &[0], &on(2)).unwrap(), 0.0);
        assert!((shutdown_probability(&p, &[0], &on(1)).unwrap() - 0.5).abs() < 1e-15);
        assert!((shutdown_series(&p, &[0], &on(1), 10) - 0.5).abs() < 1e-15);
        assert_eq!(transient_set(&p, &[0]), vec![1]);
    }

    #[test]
    fn bound_formula() {
        assert_eq!(decrease_bound(0.0, 1), 2.0);
        assert_eq!(decrease_bound(0.5, 2), 2.0 * 3.0 * 2.0);
    }

    #[test]
    fn size_formula_arithmetic() {
        let base = MdpSpec::new(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![vec![vec![0.5, 0.5]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0]; 2],
            0.9,
            vec![1],
        )
        .unwrap();
        let emdp = EmbeddedMdp::new(base, vec![vec![0.0], vec![1.0]], None).unwrap();
        let mut policy = make_toy_policy(vec![vec![0.0]], 1.0).unwrap();
        policy.bound_b = Some(1.0);
        let pert = Perturbation::new(
            &emdp,
            &policy,
            vec![vec![0.1], vec![0.0]],
            vec![vec![vec![0.1, -0.1]], vec![vec![0.0, 0.0]]],
        )
        .unwrap();
        assert!((pert.size - 0.3).abs() < 1e-15);
    }

    #[test]
    fn half_l1_bound_survives_where_l2_fails() {
        // Six states, half of them surely absorbed, half never.
        let n = 6;
        let mut p = vec![vec![0.0; n + 1]; n + 1];
        p[n][n] = 1.0;
        for (i, row) in p.iter_mut().enumerate().take(n) {
            if i < n / 2 {
                row[n] = 1.0;
            } else {
                row[i] = 1.0;
            }
        }
        let d1 = StartDistribution::new((0..=n).map(|i| if i < n / 2 { 1.0 / 3.0 } else { 0.0 }).collect()).unwrap();
        let d2 = StartDistribution::new((0..=n).map(|i| if (n / 2..n).contains(&i) { 1.0 / 3.0 } else { 0.0 }).collect()).unwrap();
        let r = start_sensitivity(&p, &[n], &d1, &d2).unwrap();
        assert!((r.difference - 1.0).abs() < 1e-12);
        assert!(!r.l2_bound_holds);
        assert!(r.half_l1_bound_holds);
    }
}
