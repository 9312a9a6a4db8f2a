//! Linear optimal transport between two discrete marginals.
//!
//! The exact solver is the transportation simplex: a northwest-corner basic
//! feasible solution improved by MODI pivots (row/column potentials, most
//! negative reduced cost enters, ratio test on the basis-tree cycle). It falls
//! back to Bland's rule after a pivot budget so degenerate instances cannot
//! cycle. The entropic solver is log-domain Sinkhorn.

use ndarray::{Array1, Array2};

use super::{Coupling, InnerSolver};
use crate::error::{Error, Result};

const SINKHORN_MAX_ITERS: usize = 20_000;
const SINKHORN_TOL: f64 = 1e-10;

/// Solves `min <cost, pi>` over couplings of `mu1` and `mu2`.
pub fn linear_ot(
    cost: &Array2<f64>,
    mu1: &Array1<f64>,
    mu2: &Array1<f64>,
    solver: InnerSolver,
) -> Result<Coupling> {
    let (m, n) = cost.dim();
    if mu1.len() != m || mu2.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "cost is {m}x{n} but marginals have lengths {} and {}",
            mu1.len(),
            mu2.len()
        )));
    }
    if m == 0 || n == 0 {
        return Err(Error::DegenerateMarginals("empty marginal".into()));
    }
    if mu1
        .iter()
        .chain(mu2.iter())
        .any(|&w| !(w > 0.0) || !w.is_finite())
    {
        return Err(Error::DegenerateMarginals(
            "marginal entries must be positive and finite".into(),
        ));
    }
    if (mu1.sum() - mu2.sum()).abs() > 1e-9 {
        return Err(Error::DegenerateMarginals(format!(
            "marginal masses differ: {} vs {}",
            mu1.sum(),
            mu2.sum()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(
            "cost matrix has non-finite entries".into(),
        ));
    }
    let (pi, iterations, converged) = match solver {
        InnerSolver::Exact => {
            let (pi, it) = transport_simplex(cost, mu1, mu2);
            (pi, it, true)
        }
        InnerSolver::Entropic { epsilon } => {
            if !(epsilon > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "entropic epsilon must be positive, got {epsilon}"
                )));
            }
            sinkhorn_log(cost, mu1, mu2, epsilon)
        }
    };
    let value = (&pi * cost).sum();
    Ok(Coupling {
        pi,
        value,
        iterations,
        converged,
        history: Vec::new(),
    })
}

struct BasisTree {
    rows: usize,
    adj: Vec<Vec<usize>>,
}

impl BasisTree {
    fn new(m: usize, n: usize, basis: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); m + n];
        for &(i, j) in basis {
            adj[i].push(m + j);
            adj[m + j].push(i);
        }
        BasisTree { rows: m, adj }
    }

    /// Potentials with `u_0 = 0` and `u_i + v_j = c_ij` on every basic cell.
    fn potentials(&self, cost: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let m = self.rows;
        let total = self.adj.len();
        let mut pot = vec![f64::NAN; total];
        let mut stack = vec![0usize];
        pot[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &next in &self.adj[node] {
                if pot[next].is_nan() {
                    pot[next] = if node < m {
                        cost[[node, next - m]] - pot[node]
                    } else {
                        cost[[next, node - m]] - pot[node]
                    };
                    stack.push(next);
                }
            }
        }
        let v = pot.split_off(m);
        (pot, v)
    }

    /// Node path from row `p` to column `q` in the tree, both ends included.
    fn path(&self, p: usize, q: usize) -> Vec<usize> {
        let target = self.rows + q;
        let mut parent = vec![usize::MAX; self.adj.len()];
        parent[p] = p;
        let mut stack = vec![p];
        while let Some(node) = stack.pop() {
            if node == target {
                break;
            }
            for &next in &self.adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    stack.push(next);
                }
            }
        }
        let mut path = vec![target];
        let mut cur = target;
        while cur != p {
            cur = parent[cur];
            path.push(cur);
        }
        path.reverse();
        path
    }
}

fn northwest_corner(mu1: &Array1<f64>, mu2: &Array1<f64>) -> (Array2<f64>, Vec<(usize, usize)>) {
    let (m, n) = (mu1.len(), mu2.len());
    let mut x = Array2::zeros((m, n));
    let mut basis = Vec::with_capacity(m + n - 1);
    let mut supply = mu1[0];
    let mut demand = mu2[0];
    let (mut i, mut j) = (0, 0);
    loop {
        let t = supply.min(demand).max(0.0);
        x[[i, j]] = t;
        basis.push((i, j));
        supply -= t;
        demand -= t;
        if i == m - 1 && j == n - 1 {
            break;
        }
        // Advance exactly one index per step so the basis has m+n-1 cells.
        if (supply <= demand && i < m - 1) || j == n - 1 {
            i += 1;
            supply += mu1[i];
        } else {
            j += 1;
            demand += mu2[j];
        }
    }
    (x, basis)
}

/// Exact transportation simplex. Returns the optimal plan and pivot count.
fn transport_simplex(
    cost: &Array2<f64>,
    mu1: &Array1<f64>,
    mu2: &Array1<f64>,
) -> (Array2<f64>, usize) {
    let (m, n) = cost.dim();
    let (mut x, mut basis) = northwest_corner(mu1, mu2);
    let mut is_basic = Array2::from_elem((m, n), false);
    for &(i, j) in &basis {
        is_basic[[i, j]] = true;
    }
    let scale = cost.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale;
    let bland_after = 4 * (m + n) * (m + n) + 50;
    let hard_cap = 50 * bland_after;
    let mut pivots = 0;
    while pivots < hard_cap {
        let tree = BasisTree::new(m, n, &basis);
        let (u, v) = tree.potentials(cost);
        let use_bland = pivots >= bland_after;
        let mut entering = None;
        let mut best = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                if is_basic[[i, j]] {
                    continue;
                }
                let r = cost[[i, j]] - u[i] - v[j];
                if r < best {
                    entering = Some((i, j));
                    if use_bland {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((p, q)) = entering else { break };

        // Cycle: entering cell (+), then path cells alternate starting with (-)
        // walking back from column q to row p.
        let path = tree.path(p, q);
        let mut cells = Vec::with_capacity(path.len());
        for w in path.windows(2).rev() {
            let (a, b) = (w[0], w[1]);
            let cell = if a < m { (a, b - m) } else { (b, a - m) };
            cells.push(cell);
        }
        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for (k, &(i, j)) in cells.iter().enumerate().step_by(2) {
            let val = x[[i, j]];
            let better =
                val < theta || (val == theta && leaving != usize::MAX && cells[k] < cells[leaving]);
            if better {
                theta = val;
                leaving = k;
            }
        }
        let theta = theta.max(0.0);
        x[[p, q]] += theta;
        for (k, &(i, j)) in cells.iter().enumerate() {
            if k % 2 == 0 {
                x[[i, j]] -= theta;
            } else {
                x[[i, j]] += theta;
            }
        }
        let out = cells[leaving];
        x[out] = 0.0;
        is_basic[out] = false;
        is_basic[[p, q]] = true;
        let pos = basis
            .iter()
            .position(|&c| c == out)
            .expect("leaving cell is basic");
        basis[pos] = (p, q);
        pivots += 1;
    }
    x.mapv_inplace(|v| v.max(0.0));
    (x, pivots)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn. Returns plan, iteration count, convergence flag.
fn sinkhorn_log(
    cost: &Array2<f64>,
    mu1: &Array1<f64>,
    mu2: &Array1<f64>,
    epsilon: f64,
) -> (Array2<f64>, usize, bool) {
    let (m, n) = cost.dim();
    let log_a = mu1.mapv(f64::ln);
    let log_b = mu2.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(n);
    let mut converged = false;
    let mut iters = 0;
    while iters < SINKHORN_MAX_ITERS {
        iters += 1;
        for i in 0..m {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost[[i, j]]) / epsilon));
            f[i] = epsilon * (log_a[i] - lse);
        }
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - cost[[i, j]]) / epsilon));
            g[j] = epsilon * (log_b[j] - lse);
        }
        // Columns are exact after the g-update; check rows.
        let err = (0..m)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| ((f[i] + g[j] - cost[[i, j]]) / epsilon).exp())
                    .sum();
                (s - mu1[i]).abs()
            })
            .fold(0.0, f64::max);
        if err < SINKHORN_TOL {
            converged = true;
            break;
        }
    }
    let pi = Array2::from_shape_fn((m, n), |(i, j)| {
        ((f[i] + g[j] - cost[[i, j]]) / epsilon).exp()
    });
    (pi, iters, converged)
}
