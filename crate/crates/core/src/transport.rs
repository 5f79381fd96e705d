//! Exact 1-Wasserstein distance between finite distributions.
//!
//! The solver is the transportation simplex: a basis is a spanning tree of
//! the bipartite support graph with `m + n - 1` cells, potentials satisfy
//! `u_i + v_j = c_ij` on basic cells, and pivots follow Bland's rule
//! (lowest-index entering and leaving cells), so degenerate problems
//! terminate. Zero-weight support points are removed before solving and
//! reinstated afterwards with dual values that keep the certificate feasible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Marginals may differ by at most this much in total mass.
pub const MARGINAL_TOL: f64 = 1e-9;

const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportProblem {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub cost: Matrix,
}

impl TransportProblem {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>, cost: Matrix) -> Result<Self> {
        let problem = Self { mu, nu, cost };
        problem.check()?;
        Ok(problem)
    }

    pub fn check(&self) -> Result<()> {
        check_inputs(&self.mu, &self.nu, &|i, j| self.cost[i][j])?;
        if self.cost.len() != self.mu.len() || self.cost.iter().any(|r| r.len() != self.nu.len()) {
            return Err(Error::Dimension(format!(
                "cost must be {} x {}",
                self.mu.len(),
                self.nu.len()
            )));
        }
        Ok(())
    }

    /// The same problem with sides swapped and the cost transposed.
    pub fn transposed(&self) -> Self {
        let cost = (0..self.nu.len())
            .map(|j| self.cost.iter().map(|row| row[j]).collect())
            .collect();
        Self {
            mu: self.nu.clone(),
            nu: self.mu.clone(),
            cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportSolution {
    pub value: f64,
    pub plan: Matrix,
    /// Potentials with `u_i + v_j <= cost_ij`, tight on the plan's support.
    pub dual_u: Vec<f64>,
    pub dual_v: Vec<f64>,
    pub pivots: usize,
}

impl TransportSolution {
    /// `sum u mu + sum v nu`.
    pub fn dual_objective(&self, mu: &[f64], nu: &[f64]) -> f64 {
        dot(&self.dual_u, mu) + dot(&self.dual_v, nu)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inputs(mu: &[f64], nu: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Result<()> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::Dimension("both supports must be nonempty".into()));
    }
    for (side, w) in [("mu", mu), ("nu", nu)] {
        if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::InvalidArgument(format!("{side} has weight {x}")));
        }
    }
    let (left, right) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
    if (left - right).abs() > MARGINAL_TOL || left <= 0.0 {
        return Err(Error::InfeasibleMarginals { left, right });
    }
    for i in 0..mu.len() {
        for j in 0..nu.len() {
            let c = cost(i, j);
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidArgument(format!("cost[{i}][{j}] = {c}")));
            }
        }
    }
    Ok(())
}

/// Solves the transport problem exactly, returning plan and dual certificate.
pub fn solve_transport(problem: &TransportProblem) -> Result<TransportSolution> {
    problem.check()?;
    solve_with(&problem.mu, &problem.nu, |i, j| problem.cost[i][j])
}

/// `W_cost(mu, nu)` with the cost given as a closure; used on hot paths where
/// building a cost matrix would be wasteful.
pub fn wasserstein_with(mu: &[f64], nu: &[f64], cost: impl Fn(usize, usize) -> f64) -> Result<f64> {
    check_inputs(mu, nu, &cost)?;
    // Identity coupling at zero cost is optimal since costs are nonnegative.
    if mu == nu && (0..mu.len()).all(|i| mu[i] == 0.0 || cost(i, i) == 0.0) {
        return Ok(0.0);
    }
    // Point masses on either side force the coupling.
    let support_mu: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let support_nu: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    if support_mu.len() == 1 {
        let i = support_mu[0];
        return Ok(support_nu.iter().map(|&j| nu[j] * cost(i, j)).sum());
    }
    if support_nu.len() == 1 {
        let j = support_nu[0];
        return Ok(support_mu.iter().map(|&i| mu[i] * cost(i, j)).sum());
    }
    Ok(solve_with(mu, nu, cost)?.value)
}

pub fn solve_with(mu: &[f64], nu: &[f64], cost: impl Fn(usize, usize) -> f64) -> Result<TransportSolution> {
    check_inputs(mu, nu, &cost)?;
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let scale = supply.iter().sum::<f64>() / cols.iter().map(|&j| nu[j]).sum::<f64>();
    let demand: Vec<f64> = cols.iter().map(|&j| nu[j] * scale).collect();
    let compact_cost = |r: usize, c: usize| cost(rows[r], cols[c]);

    let compact = simplex(&supply, &demand, &compact_cost)?;

    let (m_full, n_full) = (mu.len(), nu.len());
    let mut plan = vec![vec![0.0; n_full]; m_full];
    let mut value = 0.0;
    for (&(r, c), &f) in compact.basis.iter().zip(&compact.flows) {
        let f = f.max(0.0);
        plan[rows[r]][cols[c]] = f;
        value += f * compact_cost(r, c);
    }

    let mut dual_u = vec![f64::NAN; m_full];
    let mut dual_v = vec![f64::NAN; n_full];
    for (r, &i) in rows.iter().enumerate() {
        dual_u[i] = compact.u[r];
    }
    for (c, &j) in cols.iter().enumerate() {
        dual_v[j] = compact.v[c];
    }
    // Dropped rows see only kept columns; dropped columns see every row, so
    // dropped-row/dropped-column pairs stay feasible too.
    for i in 0..m_full {
        if dual_u[i].is_nan() {
            dual_u[i] = cols
                .iter()
                .map(|&j| cost(i, j) - dual_v[j])
                .fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..n_full {
        if dual_v[j].is_nan() {
            dual_v[j] = (0..m_full)
                .map(|i| cost(i, j) - dual_u[i])
                .fold(f64::INFINITY, f64::min);
        }
    }

    Ok(TransportSolution {
        value,
        plan,
        dual_u,
        dual_v,
        pivots: compact.pivots,
    })
}

struct Compact {
    basis: Vec<(usize, usize)>,
    flows: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    pivots: usize,
}

/// Northwest-corner staircase: always a spanning tree with `m + n - 1` cells.
fn northwest_corner(supply: &[f64], demand: &[f64]) -> Vec<(usize, usize)> {
    let (m, n) = (supply.len(), demand.len());
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    let mut basis = Vec::with_capacity(m + n - 1);
    loop {
        basis.push((i, j));
        let x = s[i].min(d[j]);
        s[i] -= x;
        d[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || s[i] <= d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    basis
}

/// Node ids: rows `0..m`, columns `m..m+n`.
fn adjacency(m: usize, n: usize, basis: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m + n];
    for (e, &(i, j)) in basis.iter().enumerate() {
        adj[i].push(e);
        adj[m + j].push(e);
    }
    adj
}

/// Flows on the basic cells, determined uniquely by peeling leaves.
fn tree_flows(supply: &[f64], demand: &[f64], basis: &[(usize, usize)]) -> Vec<f64> {
    let m = supply.len();
    let adj = adjacency(m, demand.len(), basis);
    let mut remaining: Vec<f64> = supply.iter().chain(demand).copied().collect();
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut active = vec![true; basis.len()];
    let mut flows = vec![0.0; basis.len()];
    let mut leaves: Vec<usize> = (0..degree.len()).filter(|&v| degree[v] == 1).collect();
    let mut left = basis.len();
    while left > 0 {
        let Some(node) = leaves.pop() else { break };
        if degree[node] != 1 {
            continue;
        }
        let Some(&e) = adj[node].iter().find(|&&e| active[e]) else {
            continue;
        };
        let (i, j) = basis[e];
        let other = if node == i { m + j } else { i };
        flows[e] = remaining[node];
        remaining[other] -= remaining[node];
        remaining[node] = 0.0;
        active[e] = false;
        left -= 1;
        degree[node] -= 1;
        degree[other] -= 1;
        if degree[other] == 1 {
            leaves.push(other);
        }
    }
    flows
}

fn potentials(m: usize, n: usize, basis: &[(usize, usize)], cost: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let adj = adjacency(m, n, basis);
    let mut pot = vec![f64::NAN; m + n];
    pot[0] = 0.0;
    let mut stack = vec![0];
    while let Some(node) = stack.pop() {
        for &e in &adj[node] {
            let (i, j) = basis[e];
            let c = cost(i, j);
            let (other, val) = if node == i { (m + j, c - pot[i]) } else { (i, c - pot[m + j]) };
            if pot[other].is_nan() {
                pot[other] = val;
                stack.push(other);
            }
        }
    }
    let v = pot.split_off(m);
    (pot, v)
}

/// Basic cells on the tree path from row `p` to column `q`, in order.
fn tree_path(m: usize, n: usize, basis: &[(usize, usize)], p: usize, q: usize) -> Vec<usize> {
    let adj = adjacency(m, n, basis);
    let mut parent_edge = vec![usize::MAX; m + n];
    let mut seen = vec![false; m + n];
    seen[p] = true;
    let mut queue = std::collections::VecDeque::from([p]);
    let target = m + q;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        for &e in &adj[node] {
            let (i, j) = basis[e];
            let other = if node == i { m + j } else { i };
            if !seen[other] {
                seen[other] = true;
                parent_edge[other] = e;
                queue.push_back(other);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while node != p {
        let e = parent_edge[node];
        path.push(e);
        let (i, j) = basis[e];
        node = if node == m + j { i } else { m + j };
    }
    path.reverse();
    path
}

fn simplex(supply: &[f64], demand: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Result<Compact> {
    let (m, n) = (supply.len(), demand.len());
    let max_cost = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| cost(i, j))
        .fold(0.0, f64::max);
    let rc_tol = 1e-12 * max_cost.max(1.0);

    let mut basis = northwest_corner(supply, demand);
    let mut in_basis = vec![false; m * n];
    for &(i, j) in &basis {
        in_basis[i * n + j] = true;
    }
    let mut pivots = 0;
    loop {
        let flows = tree_flows(supply, demand, &basis);
        let (u, v) = potentials(m, n, &basis, cost);
        let entering = (0..m * n)
            .filter(|&k| !in_basis[k])
            .find(|&k| cost(k / n, k % n) - u[k / n] - v[k % n] < -rc_tol);
        let Some(k) = entering else {
            return Ok(Compact { basis, flows, u, v, pivots });
        };
        if pivots >= MAX_PIVOTS {
            return Err(Error::NotConverged {
                iterations: pivots,
                residual: cost(k / n, k % n) - u[k / n] - v[k % n],
            });
        }
        let (p, q) = (k / n, k % n);
        let path = tree_path(m, n, &basis, p, q);
        // Cells at even positions along the path lose flow.
        let theta = path
            .iter()
            .step_by(2)
            .map(|&e| flows[e].max(0.0))
            .fold(f64::INFINITY, f64::min);
        let leave = path
            .iter()
            .step_by(2)
            .copied()
            .filter(|&e| flows[e].max(0.0) <= theta + 1e-15)
            .min_by_key(|&e| basis[e].0 * n + basis[e].1)
            .expect("cycle has a decreasing cell");
        let (li, lj) = basis[leave];
        in_basis[li * n + lj] = false;
        in_basis[k] = true;
        basis[leave] = (p, q);
        pivots += 1;
    }
}

/// Weak-duality lower bound `sum f_left mu - sum f_right nu` for potentials
/// with `f_left_i - f_right_j <= cost_ij`.
pub fn kr_lower_bound(problem: &TransportProblem, f_left: &[f64], f_right: &[f64]) -> Result<f64> {
    problem.check()?;
    if f_left.len() != problem.mu.len() || f_right.len() != problem.nu.len() {
        return Err(Error::Dimension("potential lengths must match the supports".into()));
    }
    for (i, &fl) in f_left.iter().enumerate() {
        for (j, &fr) in f_right.iter().enumerate() {
            let excess = fl - fr - problem.cost[i][j];
            if excess > MARGINAL_TOL {
                return Err(Error::InfeasiblePotentials { i, j, excess });
            }
        }
    }
    Ok(dot(f_left, &problem.mu) - dot(f_right, &problem.nu))
}
