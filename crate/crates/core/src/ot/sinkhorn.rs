//! Entropic-regularized optimal transport (optional fast path).
//!
//! Log-domain Sinkhorn iterations, so small epsilon does not underflow. The
//! returned plan is rounded onto the transport polytope (scale rows and
//! columns down, then fix the residual with a rank-one correction), which
//! makes its marginals exact; the reported objective is the linear cost of
//! that feasible plan, so it upper-bounds the exact OT value.

use ndarray::{Array1, Array2, ArrayView2};

use crate::{Error, Result};

use super::Coupling;

/// Outcome of a Sinkhorn run. `converged` is false when the marginal error
/// was still above tolerance after `iterations`; the plan is feasible and
/// usable either way.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub coupling: Coupling,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

const CONVERGENCE_TOL: f64 = 1e-9;

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Approximate OT with entropy regularization `epsilon`.
pub fn sinkhorn(
    cost: ArrayView2<'_, f64>,
    row_marginal: &[f64],
    col_marginal: &[f64],
    epsilon: f64,
    max_iters: usize,
) -> Result<SinkhornResult> {
    let (n, m) = cost.dim();
    if row_marginal.len() != n || col_marginal.len() != m {
        return Err(Error::InvalidData("marginal lengths disagree".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be > 0".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidData("cost must be finite".into()));
    }
    let sum_a: f64 = row_marginal.iter().sum();
    let sum_b: f64 = col_marginal.iter().sum();
    if (sum_a - sum_b).abs() > 1e-6 * sum_a.max(sum_b) {
        return Err(Error::Infeasible(format!(
            "unbalanced marginals: {sum_a} vs {sum_b}"
        )));
    }

    let log_a: Vec<f64> = row_marginal.iter().map(|&v| v.ln()).collect(); // ln 0 = -inf is fine
    let log_b: Vec<f64> = col_marginal.iter().map(|&v| v.ln()).collect();
    let mut f = Array1::<f64>::zeros(n); // scaled dual potentials (log u)
    let mut g = Array1::<f64>::zeros(m);

    let log_plan_entry = |f: &Array1<f64>, g: &Array1<f64>, i: usize, j: usize| {
        f[i] + g[j] - cost[[i, j]] / epsilon
    };

    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    while iterations < max_iters {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| g[j] - cost[[i, j]] / epsilon));
            f[i] = if log_a[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_a[i] - lse
            };
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| f[i] - cost[[i, j]] / epsilon));
            g[j] = if log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_b[j] - lse
            };
        }
        iterations += 1;

        if iterations % 5 == 0 || iterations == max_iters {
            // row marginals are exact right after the f update; check columns
            let mut err = 0.0f64;
            for i in 0..n {
                let row: f64 = (0..m)
                    .map(|j| log_plan_entry(&f, &g, i, j).exp())
                    .sum();
                err = err.max((row - row_marginal[i]).abs());
            }
            marginal_error = err;
            if err < CONVERGENCE_TOL {
                break;
            }
        }
    }
    let converged = marginal_error < CONVERGENCE_TOL;

    // materialize and round onto the polytope
    let mut plan = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            plan[[i, j]] = log_plan_entry(&f, &g, i, j).exp();
        }
    }
    round_to_feasible(&mut plan, row_marginal, col_marginal);

    let mut objective = 0.0;
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let mass = plan[[i, j]];
            if mass > 0.0 {
                objective += mass * cost[[i, j]];
                entries.push((i, j, mass));
            }
        }
    }
    let coupling = Coupling::new(
        n,
        m,
        entries,
        row_marginal.to_vec(),
        col_marginal.to_vec(),
    )?;
    Ok(SinkhornResult {
        coupling,
        objective,
        converged,
        iterations,
        marginal_error,
    })
}

/// Scales rows/columns down to their targets and patches the leftover mass
/// with a rank-one term, yielding exact marginals.
fn round_to_feasible(plan: &mut Array2<f64>, a: &[f64], b: &[f64]) {
    let (n, m) = plan.dim();
    for i in 0..n {
        let row_sum: f64 = plan.row(i).sum();
        if row_sum > a[i] && row_sum > 0.0 {
            let scale = a[i] / row_sum;
            plan.row_mut(i).mapv_inplace(|v| v * scale);
        }
    }
    for j in 0..m {
        let col_sum: f64 = plan.column(j).sum();
        if col_sum > b[j] && col_sum > 0.0 {
            let scale = b[j] / col_sum;
            plan.column_mut(j).mapv_inplace(|v| v * scale);
        }
    }
    let err_a: Vec<f64> = (0..n).map(|i| a[i] - plan.row(i).sum()).collect();
    let err_b: Vec<f64> = (0..m).map(|j| b[j] - plan.column(j).sum()).collect();
    let total: f64 = err_a.iter().sum();
    if total > 1e-300 {
        for i in 0..n {
            for j in 0..m {
                plan[[i, j]] += err_a[i] * err_b[j] / total;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::exact_ot;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_cost_gives_product_plan() {
        let cost = Array2::from_elem((3, 4), 2.5);
        let a = [0.2, 0.3, 0.5];
        let b = [0.25; 4];
        let res = sinkhorn(cost.view(), &a, &b, 0.5, 500).unwrap();
        assert!(res.converged);
        let plan = res.coupling.dense();
        for i in 0..3 {
            for j in 0..4 {
                assert_abs_diff_eq!(plan[[i, j]], a[i] * b[j], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn one_by_one_matches_exact() {
        let cost = array![[4.2]];
        let res = sinkhorn(cost.view(), &[1.0], &[1.0], 0.1, 100).unwrap();
        assert_abs_diff_eq!(res.objective, 4.2, epsilon = 1e-12);
    }

    #[test]
    fn epsilon_sweep_approaches_exact_value() {
        let cost = array![
            [0.3, 1.2, 0.7, 2.0],
            [1.1, 0.2, 1.5, 0.9],
            [0.8, 1.9, 0.1, 1.3],
            [2.2, 0.6, 1.4, 0.4]
        ];
        let w = [0.25; 4];
        let (_, exact) = exact_ot(cost.view(), &w, &w).unwrap();
        let mut costs_sorted: Vec<f64> = cost.iter().cloned().collect();
        costs_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = costs_sorted[costs_sorted.len() / 2];

        let mut prev = f64::INFINITY;
        for &scale in &[1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001] {
            let eps = scale * median;
            let res = sinkhorn(cost.view(), &w, &w, eps, 200_000).unwrap();
            assert!(
                res.objective <= prev + 1e-7,
                "objective rose from {prev} to {} at eps {eps}",
                res.objective
            );
            prev = res.objective;
        }
        assert!(
            (prev - exact).abs() / exact <= 0.01,
            "sinkhorn {prev} vs exact {exact}"
        );
    }

    #[test]
    fn reports_non_convergence_gracefully() {
        let cost = array![[0.0, 1.0], [1.0, 0.5]];
        let res = sinkhorn(cost.view(), &[0.3, 0.7], &[0.6, 0.4], 0.7, 1).unwrap();
        assert!(!res.converged);
        // rounding still hands back a feasible plan
        res.coupling.validate(1e-8).unwrap();
    }
}
