//! Fused Gromov-Wasserstein distance between attributed graphs.
//!
//! For graphs `(A1, X1, mu1)` and `(A2, X2, mu2)` the distance is
//!
//! ```text
//! FGW(G1, G2) = min_pi  sum_{i,j,k,l} [ a (A1[i,j] - A2[k,l])^2
//!                                       + (1 - a) |X1[i] - X2[k]|^2 ] pi[i,k] pi[j,l]
//! ```
//!
//! over couplings `pi` with marginals `mu1`, `mu2`. The objective is a
//! non-convex quadratic in `pi`; we minimize it by conditional gradient
//! (Frank-Wolfe) from the product coupling, solving each linearized
//! subproblem with [`linear_ot`] and taking the exact quadratic line search.

mod linear_ot;

pub use linear_ot::linear_ot;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Linear OT subproblem solver used inside the Frank-Wolfe loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InnerSolver {
    Exact,
    Entropic { epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgwConfig {
    /// Structure/feature trade-off in `[0, 1]`; 1 ignores features.
    pub alpha: f64,
    pub max_outer_iters: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    pub solver: InnerSolver,
    /// Number of starts; the first is always the product coupling, the rest
    /// are seeded random vertices blended with it. Best value wins.
    pub restarts: usize,
    pub restart_seed: u64,
}

impl Default for FgwConfig {
    fn default() -> Self {
        FgwConfig {
            alpha: 0.5,
            max_outer_iters: 200,
            tol: 1e-7,
            solver: InnerSolver::Exact,
            restarts: 1,
            restart_seed: 0,
        }
    }
}

impl FgwConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        FgwConfig {
            alpha,
            ..FgwConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "fgw alpha {} outside [0,1]",
                self.alpha
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("fgw tol must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "fgw restarts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One Frank-Wolfe iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    /// Largest absolute deviation of the iterate's row/column sums from the
    /// marginals.
    pub marginal_error: f64,
}

/// A transport plan with the objective value it attains.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub pi: Array2<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective and feasibility per outer iteration, starting with the
    /// initial coupling. Empty for plain linear OT solves.
    pub history: Vec<IterationRecord>,
}

fn check_dims(g1: &Graph, g2: &Graph) -> Result<()> {
    if g1.feature_dim() != g2.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dims {} (`{}`) and {} (`{}`)",
            g1.feature_dim(),
            g1.id(),
            g2.feature_dim(),
            g2.id()
        )));
    }
    Ok(())
}

/// Squared Euclidean distances between node features.
pub fn feature_cost(x1: &Array2<f64>, x2: &Array2<f64>) -> Array2<f64> {
    let (m, n) = (x1.nrows(), x2.nrows());
    Array2::from_shape_fn((m, n), |(i, k)| {
        x1.row(i)
            .iter()
            .zip(x2.row(k).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

/// Precomputed pieces of the FGW objective for one graph pair.
struct Problem<'a> {
    alpha: f64,
    a1: &'a Array2<f64>,
    a2: &'a Array2<f64>,
    mu1: &'a Array1<f64>,
    mu2: &'a Array1<f64>,
    /// `c1[i] + c2[k]`, the marginal-only part of the structure term.
    const_c: Array2<f64>,
    feat: Array2<f64>,
}

impl<'a> Problem<'a> {
    fn new(g1: &'a Graph, g2: &'a Graph, alpha: f64) -> Self {
        let a1 = g1.adjacency();
        let a2 = g2.adjacency();
        let mu1 = g1.node_weights();
        let mu2 = g2.node_weights();
        let c1 = a1.mapv(|v| v * v).dot(mu1);
        let c2 = a2.mapv(|v| v * v).dot(mu2);
        let const_c = Array2::from_shape_fn((a1.nrows(), a2.nrows()), |(i, k)| c1[i] + c2[k]);
        Problem {
            alpha,
            a1,
            a2,
            mu1,
            mu2,
            const_c,
            feat: feature_cost(g1.features(), g2.features()),
        }
    }

    /// `A1 pi A2^T`.
    fn cross(&self, pi: &Array2<f64>) -> Array2<f64> {
        self.a1.dot(pi).dot(&self.a2.t())
    }

    fn objective(&self, pi: &Array2<f64>) -> f64 {
        let cross = self.cross(pi);
        let s = (&self.const_c * pi).sum() - 2.0 * (&cross * pi).sum();
        self.alpha * s + (1.0 - self.alpha) * (&self.feat * pi).sum()
    }

    /// The four-index sum evaluated term by term; nonnegative by construction.
    fn objective_direct(&self, pi: &Array2<f64>) -> f64 {
        let (m, n) = pi.dim();
        let mut structure = 0.0;
        if self.alpha > 0.0 {
            for i in 0..m {
                for k in 0..n {
                    let pik = pi[[i, k]];
                    if pik == 0.0 {
                        continue;
                    }
                    let mut inner = 0.0;
                    for j in 0..m {
                        let a = self.a1[[i, j]];
                        for l in 0..n {
                            let d = a - self.a2[[k, l]];
                            inner += d * d * pi[[j, l]];
                        }
                    }
                    structure += pik * inner;
                }
            }
        }
        let features = (&self.feat * pi).sum();
        self.alpha * structure + (1.0 - self.alpha) * features
    }

    fn marginal_error(&self, pi: &Array2<f64>) -> f64 {
        let rows = pi.sum_axis(Axis(1));
        let cols = pi.sum_axis(Axis(0));
        (&rows - self.mu1)
            .iter()
            .chain((&cols - self.mu2).iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    fn frank_wolfe(&self, mut pi: Array2<f64>, cfg: &FgwConfig) -> Result<Coupling> {
        let alpha = self.alpha;
        let mut f = self.objective(&pi);
        let mut history = vec![IterationRecord {
            objective: f,
            marginal_error: self.marginal_error(&pi),
        }];
        let mut converged = false;
        let mut iterations = 0;
        while iterations < cfg.max_outer_iters {
            iterations += 1;
            let cross = self.cross(&pi);
            let grad = alpha * (2.0 * &self.const_c - 4.0 * &cross) + (1.0 - alpha) * &self.feat;
            let vertex = linear_ot(&grad, self.mu1, self.mu2, cfg.solver)?.pi;
            let dir = &vertex - &pi;
            // f(pi + g dir) = f(pi) + lin g + quad g^2 along the segment.
            let quad = -2.0 * alpha * (&self.cross(&dir) * &dir).sum();
            let lin = alpha * ((&self.const_c * &dir).sum() - 4.0 * (&cross * &dir).sum())
                + (1.0 - alpha) * (&self.feat * &dir).sum();
            // -lin is the Frank-Wolfe duality gap; along a convex direction
            // it bounds the remaining decrease.
            if quad > 0.0 && -lin <= cfg.tol * f.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
            let step = if quad > 0.0 {
                (-lin / (2.0 * quad)).clamp(0.0, 1.0)
            } else if quad + lin < 0.0 {
                1.0
            } else {
                0.0
            };
            if step == 0.0 {
                converged = true;
                break;
            }
            let candidate = &pi + &(step * &dir);
            let f_new = self.objective(&candidate);
            if f_new > f {
                converged = true;
                break;
            }
            pi = candidate;
            let decrease = f - f_new;
            f = f_new;
            history.push(IterationRecord {
                objective: f,
                marginal_error: self.marginal_error(&pi),
            });
            if decrease <= cfg.tol * f.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        let value = self.objective_direct(&pi);
        Ok(Coupling {
            pi,
            value,
            iterations,
            converged,
            history,
        })
    }
}

/// Solves for the FGW distance and its coupling.
pub fn fgw_distance(g1: &Graph, g2: &Graph, cfg: &FgwConfig) -> Result<Coupling> {
    cfg.validate()?;
    check_dims(g1, g2)?;
    let problem = Problem::new(g1, g2, cfg.alpha);
    let product = outer(g1.node_weights(), g2.node_weights());
    let mut best = problem.frank_wolfe(product.clone(), cfg)?;
    if cfg.restarts > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.restart_seed);
        for _ in 1..cfg.restarts {
            let (m, n) = product.dim();
            let random_cost = Array2::from_shape_fn((m, n), |_| rng.random::<f64>());
            let vertex = linear_ot(
                &random_cost,
                g1.node_weights(),
                g2.node_weights(),
                InnerSolver::Exact,
            )?
            .pi;
            let start = 0.5 * (&product + &vertex);
            let candidate = problem.frank_wolfe(start, cfg)?;
            if candidate.value < best.value {
                best = candidate;
            }
        }
    }
    Ok(best)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, k)| a[i] * b[k])
}

/// Gradient of the FGW objective with respect to the first graph's
/// adjacency and features, holding the coupling fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct FgwGradient {
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
}

/// `dA1 = 2a (A1 * r r^T - pi A2 pi^T)`, `dX1 = 2(1-a)(diag(r) X1 - pi X2)`
/// with `r` the row sums of `pi`.
pub fn fgw_gradient(
    g1: &Graph,
    g2: &Graph,
    coupling: &Coupling,
    alpha: f64,
) -> Result<FgwGradient> {
    check_dims(g1, g2)?;
    let pi = &coupling.pi;
    if pi.dim() != (g1.n(), g2.n()) {
        return Err(Error::DimensionMismatch(format!(
            "coupling is {:?}, graphs have {} and {} nodes",
            pi.dim(),
            g1.n(),
            g2.n()
        )));
    }
    let r = pi.sum_axis(Axis(1));
    let rr = outer(&r, &r);
    let adjacency = 2.0 * alpha * (g1.adjacency() * &rr - pi.dot(g2.adjacency()).dot(&pi.t()));
    let mut weighted = g1.features().clone();
    for (mut row, &ri) in weighted.rows_mut().into_iter().zip(r.iter()) {
        row *= ri;
    }
    let features = 2.0 * (1.0 - alpha) * (weighted - pi.dot(g2.features()));
    Ok(FgwGradient {
        adjacency,
        features,
    })
}

/// Gradient with respect to the *second* graph, via the transposed problem.
pub fn fgw_gradient_second(
    g1: &Graph,
    g2: &Graph,
    coupling: &Coupling,
    alpha: f64,
) -> Result<FgwGradient> {
    let transposed = Coupling {
        pi: coupling.pi.t().to_owned(),
        value: coupling.value,
        iterations: coupling.iterations,
        converged: coupling.converged,
        history: Vec::new(),
    };
    fgw_gradient(g2, g1, &transposed, alpha)
}

/// Maps a distance to a similarity in `(0, 1]`.
pub fn similarity_from_distance(d: f64) -> f64 {
    1.0 / (1.0 + d)
}

/// `1 / (1 + FGW(g1, g2))`.
pub fn similarity(g1: &Graph, g2: &Graph, cfg: &FgwConfig) -> Result<f64> {
    Ok(similarity_from_distance(fgw_distance(g1, g2, cfg)?.value))
}
