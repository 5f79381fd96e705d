//! Independent reference implementations shared by the integration tests.
//! None of these call into the solver paths they check.

#![allow(dead_code)]

use mdp_stability::mdp::MdpSpec;
use mdp_stability::onpolicy::EmbeddedMdp;
use mdp_stability::scenarios::{random_family, RandomFamily};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian elimination with partial pivoting on a copy of `a`.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &v)| {
        let mut row = r.clone();
        row.push(v);
        row
    }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular system");
        for row in col + 1..n {
            let f = m[row][col] / p;
            if f != 0.0 {
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - tail) / m[row][row];
    }
    x
}

/// Optimal transport value by enumerating every basic solution: spanning
/// trees of the `m + n` node bipartite graph, flows from least squares on
/// the marginal equations.
pub fn brute_force_transport(mu: &[f64], nu: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (m, n) = (mu.len(), nu.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..k).collect();
    let rhs: Vec<f64> = mu.iter().chain(nu).copied().collect();
    loop {
        if is_spanning_tree(m, n, &pick.iter().map(|&c| cells[c]).collect::<Vec<_>>()) {
            let a = DMatrix::from_fn(m + n, k, |r, c| {
                let (i, j) = cells[pick[c]];
                if r == i || r == m + j { 1.0 } else { 0.0 }
            });
            let b = nalgebra::DVector::from_column_slice(&rhs);
            let ata = a.transpose() * &a;
            let atb = a.transpose() * b;
            let ata_rows: Vec<Vec<f64>> = (0..k).map(|r| (0..k).map(|c| ata[(r, c)]).collect()).collect();
            let x = gauss_solve(&ata_rows, atb.as_slice());
            if x.iter().all(|&v| v >= -1e-12) {
                let value: f64 = x.iter().zip(&pick).map(|(f, &c)| f.max(0.0) * cost[cells[c].0][cells[c].1]).sum();
                best = best.min(value);
            }
        }
        // Next k-combination of cell indices.
        let total = cells.len();
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] != i + total - k {
                break;
            }
            if i == 0 {
                return best;
            }
        }
        pick[i] += 1;
        for j in i + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

fn is_spanning_tree(m: usize, n: usize, edges: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn root(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            x = p[x];
        }
        x
    }
    for &(i, j) in edges {
        let (a, b) = (root(&mut parent, i), root(&mut parent, m + j));
        if a == b {
            return false;
        }
        parent[a] = b;
    }
    true
}

/// Exact values of every deterministic policy via Gaussian elimination.
pub fn all_policy_values(mdp: &MdpSpec) -> Vec<(Vec<usize>, Vec<f64>)> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let total = m.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let table: Vec<usize> = (0..n).map(|_| {
                let a = code % m;
                code /= m;
                a
            }).collect();
            let g = mdp.discount();
            let a: Vec<Vec<f64>> = (0..n)
                .map(|s| (0..n).map(|t| f64::from(u8::from(s == t)) - g * mdp.prob(s, table[s], t)).collect())
                .collect();
            let r: Vec<f64> = (0..n).map(|s| mdp.reward(s, table[s])).collect();
            let v = gauss_solve(&a, &r);
            (table, v)
        })
        .collect()
}

/// Componentwise maximum over deterministic policies.
pub fn brute_force_optimal_values(mdp: &MdpSpec) -> Vec<f64> {
    let mut best = vec![f64::NEG_INFINITY; mdp.n_states()];
    for (_, v) in all_policy_values(mdp) {
        for (b, x) in best.iter_mut().zip(v) {
            *b = b.max(x);
        }
    }
    best
}

/// Spectral radius from the characteristic polynomial (Faddeev-LeVerrier)
/// and the eigenvalues of its companion matrix.
pub fn char_poly_spectral_radius(p: &[Vec<f64>]) -> f64 {
    let n = p.len();
    let a = DMatrix::from_fn(n, n, |i, j| p[i][j]);
    let mut coeffs = vec![1.0];
    let mut mk = DMatrix::<f64>::identity(n, n);
    for k in 1..=n {
        let am = &a * &mk;
        let ck = -am.trace() / k as f64;
        coeffs.push(ck);
        mk = am + DMatrix::identity(n, n) * ck;
    }
    // x^n + c1 x^{n-1} + ... + cn; roots at zero are factored out first.
    while coeffs.len() > 1 && coeffs.last().unwrap().abs() < 1e-15 {
        coeffs.pop();
    }
    let deg = coeffs.len() - 1;
    if deg == 0 {
        return 0.0;
    }
    let companion = DMatrix::from_fn(deg, deg, |i, j| {
        if i == 0 {
            -coeffs[j + 1]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion
        .try_schur(1e-15, 100_000)
        .expect("Schur iteration converged")
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Random valid MDP with `n` states, `m` actions and `n / 4` (at least one) safe states.
pub fn random_mdp(seed: u64, n: usize, m: usize, gamma: f64) -> MdpSpec {
    let mut family = RandomFamily::new(n, m, 1);
    family.discount = gamma;
    random_family(seed, &family).unwrap().base
}

pub fn random_embedded(seed: u64, n: usize, m: usize, d: usize) -> EmbeddedMdp {
    random_family(seed, &RandomFamily::new(n, m, d)).unwrap()
}

/// Random distribution on `n` points from normalized exponentials.
pub fn random_simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Sum of the first `terms` terms of `Delta Q^k 1` from `k = 0`.
pub fn truncated_occupation(q: &[Vec<f64>], start: &[f64], terms: usize) -> f64 {
    let n = q.len();
    let mut row = start.to_vec();
    let mut total = 0.0;
    for _ in 0..terms {
        total += row.iter().sum::<f64>();
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += row[i] * q[i][j];
            }
        }
        row = next;
    }
    total
}

/// Non-safe states from which a positive path of length at most `n` enters
/// `safe`, found by boolean matrix powers.
pub fn paths_into_safe(p: &[Vec<f64>], safe: &[usize]) -> Vec<usize> {
    let n = p.len();
    let adj: Vec<Vec<bool>> = p.iter().map(|r| r.iter().map(|&v| v > 1e-15).collect()).collect();
    let mut reach = adj.clone();
    let mut power = adj.clone();
    for _ in 1..n {
        power = (0..n)
            .map(|i| (0..n).map(|j| (0..n).any(|k| power[i][k] && adj[k][j])).collect())
            .collect();
        for i in 0..n {
            for j in 0..n {
                reach[i][j] |= power[i][j];
            }
        }
    }
    (0..n)
        .filter(|i| !safe.contains(i) && safe.iter().any(|&s| reach[*i][s]))
        .collect()
}
