//! Label-aware optimal transport between embedding distributions.
//!
//! The base distance between labelled samples is Euclidean in feature space
//! and infinite across differing labels, so transport never mixes classes.
//! Two computation modes exist:
//!
//! - `ExactInfinity`: infinite costs are a structural mask, never a large
//!   float. Requires matching class priors; the joint distance decomposes
//!   into a prior-weighted sum of per-class feature-space distances, each
//!   solved exactly by network simplex.
//! - `Surrogate`: the differentiable stand-in `||z - z'|| + nu * sqrt(2)`
//!   across labels (one-hot difference norm), solved as one joint problem.
//!   This is the cost the optimization loop couples against.

mod network_simplex;
mod sinkhorn;

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};

pub use network_simplex::{solve_transport, TransportSolution};
pub use sinkhorn::{sinkhorn, SinkhornResult};

use crate::dataset::EmbeddingDataset;
use crate::{Error, Result};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// How cross-label mass movement is priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtMode {
    /// Forbidden outright; distance decomposes per class (requires matched priors).
    ExactInfinity,
    /// Penalized at `nu * sqrt(2)` per unit mass; fully differentiable.
    Surrogate,
}

/// Parameters of the label-aware cost.
#[derive(Debug, Clone, Copy)]
pub struct CostParams {
    pub nu: f64,
    pub mode: OtMode,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            nu: 1e8,
            mode: OtMode::ExactInfinity,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::InvalidConfig("nu must be > 0".into()));
        }
        Ok(())
    }
}

fn euclidean(z: ArrayView1<'_, f64>, z2: ArrayView1<'_, f64>) -> f64 {
    z.iter()
        .zip(z2.iter())
        .map(|(&a, &b)| {
            let t = a - b;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// `||z - z'||_2` when labels agree, `+inf` otherwise.
pub fn base_distance(
    z: ArrayView1<'_, f64>,
    y: usize,
    z2: ArrayView1<'_, f64>,
    y2: usize,
) -> Result<f64> {
    if z.len() != z2.len() {
        return Err(Error::InvalidData(format!(
            "dimension mismatch: {} vs {}",
            z.len(),
            z2.len()
        )));
    }
    if y != y2 {
        return Ok(f64::INFINITY);
    }
    Ok(euclidean(z, z2))
}

/// Differentiable approximation: `||z - z'||_2 + nu * ||e(y) - e(y')||_2`,
/// where the one-hot difference norm is sqrt(2) for distinct labels.
pub fn surrogate_distance(
    z: ArrayView1<'_, f64>,
    y: usize,
    z2: ArrayView1<'_, f64>,
    y2: usize,
    nu: f64,
) -> Result<f64> {
    if z.len() != z2.len() {
        return Err(Error::InvalidData(format!(
            "dimension mismatch: {} vs {}",
            z.len(),
            z2.len()
        )));
    }
    let label_term = if y == y2 { 0.0 } else { nu * SQRT_2 };
    Ok(euclidean(z, z2) + label_term)
}

/// A transport plan with fixed marginals. Entries are stored sparsely in
/// (row, col, mass) form; exact solves produce at most n + m - 1 of them.
#[derive(Debug, Clone)]
pub struct Coupling {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl Coupling {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<(usize, usize, f64)>,
        row_marginal: Vec<f64>,
        col_marginal: Vec<f64>,
    ) -> Result<Self> {
        let c = Self {
            n_rows,
            n_cols,
            entries,
            row_marginal,
            col_marginal,
        };
        c.validate(1e-8)?;
        Ok(c)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    /// Checks non-negativity and that plan marginals match the stored ones.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let mut rows = vec![0.0; self.n_rows];
        let mut cols = vec![0.0; self.n_cols];
        for &(i, j, mass) in &self.entries {
            if i >= self.n_rows || j >= self.n_cols {
                return Err(Error::InvalidData("coupling entry out of range".into()));
            }
            if !(mass >= 0.0) {
                return Err(Error::InvalidData(format!(
                    "negative coupling mass {mass} at ({i}, {j})"
                )));
            }
            rows[i] += mass;
            cols[j] += mass;
        }
        let row_err = rows
            .iter()
            .zip(&self.row_marginal)
            .map(|(&g, &w)| (g - w).abs())
            .fold(0.0f64, f64::max);
        let col_err = cols
            .iter()
            .zip(&self.col_marginal)
            .map(|(&g, &w)| (g - w).abs())
            .fold(0.0f64, f64::max);
        if row_err > tol || col_err > tol {
            return Err(Error::InvalidData(format!(
                "coupling marginals off by {:.3e}",
                row_err.max(col_err)
            )));
        }
        Ok(())
    }

    pub fn dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for &(i, j, mass) in &self.entries {
            out[[i, j]] += mass;
        }
        out
    }

    /// Dumps the plan as `row,col,mass` CSV for inspection.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "row,col,mass")?;
        for &(i, j, mass) in &self.entries {
            writeln!(w, "{i},{j},{mass}")?;
        }
        Ok(())
    }
}

/// Exact minimizer of `<plan, cost>` under marginal constraints.
/// Returns the optimal coupling and its objective value.
pub fn exact_ot(
    cost: ArrayView2<'_, f64>,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<(Coupling, f64)> {
    let (n, m) = cost.dim();
    let cost_slice = cost
        .as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| cost.iter().cloned().collect());
    let sol = solve_transport(&cost_slice, n, m, row_marginal, col_marginal)?;
    let coupling = Coupling::new(
        n,
        m,
        sol.entries,
        row_marginal.to_vec(),
        col_marginal.to_vec(),
    )?;
    Ok((coupling, sol.objective))
}

/// Minimum mean assignment cost over all n! bijections; equals the OT value
/// for uniform equal-size marginals. Infinite entries are skipped naturally.
/// Oracle-grade: only feasible for small n (n <= ~9).
pub fn brute_force_uniform_ot(cost: ArrayView2<'_, f64>) -> Result<f64> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::InvalidData(
            "brute force needs equal-size point sets".into(),
        ));
    }
    if n > 9 {
        return Err(Error::InvalidData("brute force capped at n = 9".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if total < best {
            best = total;
        }
    });
    Ok(best / n as f64)
}

fn permute(items: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// A weighted, labelled point set: an empirical joint distribution.
#[derive(Debug, Clone)]
pub struct WeightedPoints<'a> {
    features: ArrayView2<'a, f64>,
    labels: &'a [usize],
    weights: Vec<f64>,
    k: usize,
}

impl<'a> WeightedPoints<'a> {
    pub fn new(
        features: ArrayView2<'a, f64>,
        labels: &'a [usize],
        weights: Vec<f64>,
        k: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || weights.len() != n {
            return Err(Error::InvalidData(
                "features, labels, weights must agree in length".into(),
            ));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidData("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidData(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::InvalidData("label out of range".into()));
        }
        Ok(Self {
            features,
            labels,
            weights,
            k,
        })
    }

    /// Uniformly weighted view of a dataset.
    pub fn uniform(ds: &'a EmbeddingDataset) -> Self {
        Self {
            features: ds.features(),
            labels: ds.labels(),
            weights: vec![1.0 / ds.n() as f64; ds.n()],
            k: ds.k(),
        }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn features(&self) -> ArrayView2<'a, f64> {
        self.features
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-class total mass.
    pub fn prior(&self) -> Vec<f64> {
        let mut prior = vec![0.0; self.k];
        for (&y, &w) in self.labels.iter().zip(&self.weights) {
            prior[y] += w;
        }
        prior
    }
}

/// Outcome of a joint distance computation: the masked-infinite base distance
/// is infinite whenever class priors differ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointDistance {
    Finite(f64),
    Infinite,
}

impl JointDistance {
    pub fn finite(self) -> Option<f64> {
        match self {
            JointDistance::Finite(v) => Some(v),
            JointDistance::Infinite => None,
        }
    }
}

fn thread_cap() -> usize {
    std::env::var("TASKREL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

/// Type-1 Wasserstein distance between two labelled empirical distributions
/// under the label-aware base distance.
///
/// In `ExactInfinity` mode the class priors must match within 1e-6 per class
/// (otherwise the distance is reported as [`JointDistance::Infinite`]) and
/// the result is the prior-weighted sum of per-class feature-space OT
/// distances. In `Surrogate` mode the full joint problem is solved under the
/// finite nu-weighted cost.
pub fn joint_wasserstein(
    p: &WeightedPoints<'_>,
    q: &WeightedPoints<'_>,
    params: &CostParams,
) -> Result<JointDistance> {
    params.validate()?;
    if p.features.ncols() != q.features.ncols() {
        return Err(Error::InvalidData("feature dimensions differ".into()));
    }
    let k = p.k.max(q.k);
    match params.mode {
        OtMode::Surrogate => {
            let mut cost = Array2::zeros((p.n(), q.n()));
            for i in 0..p.n() {
                for j in 0..q.n() {
                    cost[[i, j]] = euclidean(p.features.row(i), q.features.row(j))
                        + if p.labels[i] == q.labels[j] {
                            0.0
                        } else {
                            params.nu * SQRT_2
                        };
                }
            }
            let (_, value) = exact_ot(cost.view(), p.weights(), q.weights())?;
            Ok(JointDistance::Finite(value))
        }
        OtMode::ExactInfinity => {
            let prior_p = {
                let mut v = p.prior();
                v.resize(k, 0.0);
                v
            };
            let prior_q = {
                let mut v = q.prior();
                v.resize(k, 0.0);
                v
            };
            for y in 0..k {
                if (prior_p[y] - prior_q[y]).abs() > 1e-6 {
                    return Ok(JointDistance::Infinite);
                }
            }
            let classes: Vec<usize> = (0..k)
                .filter(|&y| 0.5 * (prior_p[y] + prior_q[y]) > 1e-12)
                .collect();
            let values = per_class_distances(p, q, &classes)?;
            let mut total = 0.0;
            for (idx, &y) in classes.iter().enumerate() {
                // symmetric common prior keeps W(p, q) = W(q, p) exactly
                total += 0.5 * (prior_p[y] + prior_q[y]) * values[idx];
            }
            Ok(JointDistance::Finite(total))
        }
    }
}

/// Per-class conditional OT distances, optionally across threads
/// (TASKREL_THREADS); aggregation order is fixed by class index either way.
fn per_class_distances(
    p: &WeightedPoints<'_>,
    q: &WeightedPoints<'_>,
    classes: &[usize],
) -> Result<Vec<f64>> {
    let one = |y: usize| -> Result<f64> {
        let pi: Vec<usize> = (0..p.n()).filter(|&i| p.labels[i] == y).collect();
        let qi: Vec<usize> = (0..q.n()).filter(|&j| q.labels[j] == y).collect();
        if pi.is_empty() || qi.is_empty() {
            return Err(Error::Infeasible(format!(
                "class {y} carries prior mass but has no samples on one side"
            )));
        }
        let wp: f64 = pi.iter().map(|&i| p.weights[i]).sum();
        let wq: f64 = qi.iter().map(|&j| q.weights[j]).sum();
        let a: Vec<f64> = pi.iter().map(|&i| p.weights[i] / wp).collect();
        let b: Vec<f64> = qi.iter().map(|&j| q.weights[j] / wq).collect();
        let mut cost = Array2::zeros((pi.len(), qi.len()));
        for (r, &i) in pi.iter().enumerate() {
            for (c, &j) in qi.iter().enumerate() {
                cost[[r, c]] = euclidean(p.features.row(i), q.features.row(j));
            }
        }
        let (_, value) = exact_ot(cost.view(), &a, &b)?;
        Ok(value)
    };

    let threads = thread_cap().min(classes.len().max(1));
    if threads <= 1 {
        return classes.iter().map(|&y| one(y)).collect();
    }
    let mut results: Vec<Option<Result<f64>>> = (0..classes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = classes.len().div_ceil(threads);
        for (slot_chunk, class_chunk) in results.chunks_mut(chunk).zip(classes.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, &y) in slot_chunk.iter_mut().zip(class_chunk) {
                    *slot = Some(one(y));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("class slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_distance_cases() {
        let z = array![0.0, 0.0];
        let z2 = array![3.0, 4.0];
        assert_abs_diff_eq!(base_distance(z.view(), 1, z.view(), 1).unwrap(), 0.0);
        assert_abs_diff_eq!(base_distance(z.view(), 0, z2.view(), 0).unwrap(), 5.0);
        assert!(base_distance(z.view(), 0, z2.view(), 1)
            .unwrap()
            .is_infinite());
        assert!(base_distance(z.view(), 0, array![1.0].view(), 0).is_err());
    }

    #[test]
    fn surrogate_distance_cases() {
        let z = array![1.0, 0.0];
        let o = array![0.0, 0.0];
        assert_abs_diff_eq!(
            surrogate_distance(z.view(), 2, o.view(), 2, 1e8).unwrap(),
            1.0
        );
        assert_abs_diff_eq!(
            surrogate_distance(o.view(), 0, o.view(), 1, 1e8).unwrap(),
            1e8 * SQRT_2
        );
        assert_abs_diff_eq!(
            surrogate_distance(z.view(), 0, o.view(), 1, 1.0).unwrap(),
            1.0 + SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn exact_ot_identical_points() {
        let n = 4;
        let mut cost = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                cost[[i, j]] = (i as f64 - j as f64).abs();
            }
        }
        let w = vec![0.25; n];
        let (coupling, value) = exact_ot(cost.view(), &w, &w).unwrap();
        assert_abs_diff_eq!(value, 0.0);
        coupling.validate(1e-12).unwrap();
    }

    #[test]
    fn exact_ot_line_example() {
        let cost = array![[2.0, 3.0], [1.0, 2.0]];
        let (_, value) = exact_ot(cost.view(), &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let n = rng.gen_range(1..=8);
            let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..10.0));
            let w = vec![1.0 / n as f64; n];
            let (coupling, value) = exact_ot(cost.view(), &w, &w).unwrap();
            let oracle = brute_force_uniform_ot(cost.view()).unwrap();
            assert!(
                (value - oracle).abs() <= 1e-9,
                "simplex {value} vs brute {oracle}"
            );
            coupling.validate(1e-10).unwrap();
        }
    }

    #[test]
    fn objective_invariant_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let m = 6;
        let cost = Array2::from_shape_fn((n, m), |_| rng.gen_range(0.0..5.0));
        let a: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| v / t).collect()
        };
        let b: Vec<f64> = {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| v / t).collect()
        };
        let (_, value) = exact_ot(cost.view(), &a, &b).unwrap();

        // permute rows and columns
        let rp: Vec<usize> = vec![3, 1, 4, 0, 2];
        let cp: Vec<usize> = vec![5, 0, 3, 1, 4, 2];
        let cost2 = Array2::from_shape_fn((n, m), |(i, j)| cost[[rp[i], cp[j]]]);
        let a2: Vec<f64> = rp.iter().map(|&i| a[i]).collect();
        let b2: Vec<f64> = cp.iter().map(|&j| b[j]).collect();
        let (_, value2) = exact_ot(cost2.view(), &a2, &b2).unwrap();
        assert_abs_diff_eq!(value, value2, epsilon = 1e-10);
    }

    #[test]
    fn joint_wasserstein_zero_on_identity() {
        let feats = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]];
        let labels = vec![0, 1, 0];
        let ds = EmbeddingDataset::new("p", feats, labels, 2).unwrap();
        let p = WeightedPoints::uniform(&ds);
        let d = joint_wasserstein(&p, &p, &CostParams::default()).unwrap();
        assert_eq!(d, JointDistance::Finite(0.0));
    }

    #[test]
    fn joint_wasserstein_per_class_singletons() {
        // class 0 shifted by 1, class 1 shifted by 3, priors (0.5, 0.5)
        let p_feats = array![[0.0], [10.0]];
        let q_feats = array![[1.0], [13.0]];
        let labels = vec![0usize, 1];
        let p = WeightedPoints::new(p_feats.view(), &labels, vec![0.5, 0.5], 2).unwrap();
        let q = WeightedPoints::new(q_feats.view(), &labels, vec![0.5, 0.5], 2).unwrap();
        let d = joint_wasserstein(&p, &q, &CostParams::default()).unwrap();
        assert_abs_diff_eq!(d.finite().unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn joint_wasserstein_prior_mismatch_is_infinite() {
        let feats = array![[0.0], [1.0]];
        let l1 = vec![0usize, 1];
        let l2 = vec![0usize, 0];
        let p = WeightedPoints::new(feats.view(), &l1, vec![0.5, 0.5], 2).unwrap();
        let q = WeightedPoints::new(feats.view(), &l2, vec![0.5, 0.5], 2).unwrap();
        let d = joint_wasserstein(&p, &q, &CostParams::default()).unwrap();
        assert_eq!(d, JointDistance::Infinite);
    }

    #[test]
    fn surrogate_mode_agrees_with_exact_on_matched_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let per_class = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=2);
            let n = per_class * k;
            let d = rng.gen_range(1..=3);
            let feats_p = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
            let feats_q = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let w = vec![1.0 / n as f64; n];
            let p = WeightedPoints::new(feats_p.view(), &labels, w.clone(), k).unwrap();
            let q = WeightedPoints::new(feats_q.view(), &labels, w, k).unwrap();
            let exact = joint_wasserstein(&p, &q, &CostParams::default())
                .unwrap()
                .finite()
                .unwrap();
            let sur = joint_wasserstein(
                &p,
                &q,
                &CostParams {
                    nu: 1e8,
                    mode: OtMode::Surrogate,
                },
            )
            .unwrap()
            .finite()
            .unwrap();
            let rel = (exact - sur).abs() / exact.abs().max(1e-9);
            assert!(rel < 1e-6, "exact {exact} vs surrogate {sur}");
        }
    }

    #[test]
    fn symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let n = rng.gen_range(2..=6);
            let k = 2;
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let fp = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
            let fq = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
            let w = vec![1.0 / n as f64; n];
            let p = WeightedPoints::new(fp.view(), &labels, w.clone(), k).unwrap();
            let q = WeightedPoints::new(fq.view(), &labels, w, k).unwrap();
            let params = CostParams::default();
            let dpq = joint_wasserstein(&p, &q, &params).unwrap().finite().unwrap();
            let dqp = joint_wasserstein(&q, &p, &params).unwrap().finite().unwrap();
            assert_abs_diff_eq!(dpq, dqp, epsilon = 1e-9);
        }
    }

    #[test]
    fn triangle_inequality_on_feature_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..25 {
            let n = rng.gen_range(2..=5);
            let labels: Vec<usize> = vec![0; n];
            let make = |rng: &mut ChaCha8Rng| {
                Array2::from_shape_fn((n, 2), |_| rng.gen_range(-3.0..3.0))
            };
            let (fa, fb, fc) = (make(&mut rng), make(&mut rng), make(&mut rng));
            let w = vec![1.0 / n as f64; n];
            let a = WeightedPoints::new(fa.view(), &labels, w.clone(), 1).unwrap();
            let b = WeightedPoints::new(fb.view(), &labels, w.clone(), 1).unwrap();
            let c = WeightedPoints::new(fc.view(), &labels, w, 1).unwrap();
            let params = CostParams::default();
            let dab = joint_wasserstein(&a, &b, &params).unwrap().finite().unwrap();
            let dbc = joint_wasserstein(&b, &c, &params).unwrap().finite().unwrap();
            let dac = joint_wasserstein(&a, &c, &params).unwrap().finite().unwrap();
            assert!(dac <= dab + dbc + 1e-7, "{dac} > {dab} + {dbc}");
        }
    }

    #[test]
    fn coupling_csv_dump() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let (coupling, _) = exact_ot(cost.view(), &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let mut buf = Vec::new();
        coupling.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row,col,mass\n"));
        assert!(text.lines().count() >= 2);
    }
}
