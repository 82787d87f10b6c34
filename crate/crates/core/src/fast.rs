//! Moment-matching distance for efficient task-relatedness.
//!
//! Replaces the per-epoch optimal-coupling solve with
//!
//! ```text
//! Gamma(R''', T) = ||mu_R''' - mu_T||^2 + lambda ||Sigma_R''' - Sigma_T||^2
//! ```
//!
//! (Frobenius norm on the covariance difference), which depends only on the
//! first two moments of the pushed reference and the target. The resulting
//! score ranks encoders well but is not a certified upper bound: Gamma is
//! not a Wasserstein distance, so reports flag it as a relative metric.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::SoftmaxClassifier;
use crate::dataset::{empirical_prior, subsample_by_prior, ClassPrior, EmbeddingDataset, Replacement};
use crate::optimizer::{
    common_objective_parts, initial_transforms, pseudo_label_targets, Alg1Config, Batch,
    BoundTrace, EpochRecord, TargetLabelMode,
};
use crate::transforms::TransformSet;
use crate::{Error, Result};

/// First two moments of a weighted feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
}

/// Weighted mean and population covariance. Weights must sum to 1;
/// pass uniform weights for plain empirical moments.
pub fn moment_stats(features: ArrayView2<'_, f64>, weights: &[f64]) -> Result<MomentStats> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::InvalidData("moment stats need n >= 2".into()));
    }
    if weights.len() != n {
        return Err(Error::InvalidData("weight length mismatch".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidData(format!(
            "weights must sum to 1, got {total}"
        )));
    }
    let mut mu = Array1::<f64>::zeros(d);
    for (i, &w) in weights.iter().enumerate() {
        mu.scaled_add(w, &features.row(i));
    }
    let mut sigma = Array2::<f64>::zeros((d, d));
    for (i, &w) in weights.iter().enumerate() {
        let c = &features.row(i) - &mu;
        for r in 0..d {
            let wr = w * c[r];
            let mut row = sigma.row_mut(r);
            for (s, &cv) in row.iter_mut().zip(&c) {
                *s += wr * cv;
            }
        }
    }
    Ok(MomentStats { mu, sigma })
}

/// `||mu1 - mu2||^2 + lambda ||Sigma1 - Sigma2||_F^2`. Zero exactly on equal
/// moment pairs; symmetric and non-negative.
pub fn gamma_distance(s1: &MomentStats, s2: &MomentStats, lambda: f64) -> Result<f64> {
    if s1.mu.len() != s2.mu.len() {
        return Err(Error::InvalidData("moment dimensions differ".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let dm = (&s1.mu - &s2.mu).mapv(|v| v * v).sum();
    let ds = (&s1.sigma - &s2.sigma).mapv(|v| v * v).sum();
    Ok(dm + lambda * ds)
}

/// Gamma between the pushed batch A z and fixed target moments, with its
/// gradient w.r.t. A. `raw` holds the batch's own (pre-push) moments.
pub fn gamma_and_grad_wrt_map(
    raw: &MomentStats,
    a: &Array2<f64>,
    target: &MomentStats,
    lambda: f64,
) -> Result<(f64, Array2<f64>)> {
    let mu1 = a.dot(&raw.mu);
    let sigma1 = a.dot(&raw.sigma).dot(&a.t());
    let pushed = MomentStats {
        mu: mu1.clone(),
        sigma: sigma1.clone(),
    };
    let value = gamma_distance(&pushed, target, lambda)?;
    let dmu = &mu1 - &target.mu;
    let dsig = &sigma1 - &target.sigma;
    // d/dA ||A mu - mu_T||^2 = 2 (A mu - mu_T) mu^T
    let mut grad = Array2::from_shape_fn((a.nrows(), a.ncols()), |(r, c)| {
        2.0 * dmu[r] * raw.mu[c]
    });
    // d/dA lambda ||A S A^T - S_T||_F^2 = 4 lambda (A S A^T - S_T) A S
    grad.scaled_add(4.0 * lambda, &dsig.dot(a).dot(&raw.sigma));
    Ok((value, grad))
}

/// Configuration for the fast estimator: the usual loop parameters plus the
/// covariance weight lambda.
#[derive(Debug, Clone)]
pub struct FastConfig {
    pub loop_cfg: Alg1Config,
    pub lambda: f64,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self {
            loop_cfg: Alg1Config::default(),
            lambda: 0.01,
        }
    }
}

/// Output of the fast estimator. `score` is reweighted loss + entropy +
/// Gamma on the full datasets; a relative ranking metric, not an upper bound.
#[derive(Debug, Clone)]
pub struct FastOutput {
    pub transforms: TransformSet,
    pub score: f64,
    pub reweighted_reference_loss: f64,
    pub label_mismatch: f64,
    pub gamma: f64,
    pub trace: BoundTrace,
}

/// Runs the minimization loop with Gamma in place of the coupled Wasserstein
/// term (no transport solve anywhere on the hot path).
pub fn fast_task_relatedness(
    ref_ds: &EmbeddingDataset,
    tgt_ds: &EmbeddingDataset,
    h_r: &SoftmaxClassifier,
    cfg: &FastConfig,
) -> Result<FastOutput> {
    let d = ref_ds.d();
    cfg.loop_cfg.validate(d)?;
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    if tgt_ds.d() != d {
        return Err(Error::InvalidData("feature dimensions differ".into()));
    }
    if ref_ds.k() < tgt_ds.k() {
        return Err(Error::InvalidData(format!(
            "need K_R >= K_T, got {} < {}",
            ref_ds.k(),
            tgt_ds.k()
        )));
    }

    let loop_cfg = &cfg.loop_cfg;
    let ref_prior = empirical_prior(ref_ds);
    let supervised_tgt_prior = empirical_prior(tgt_ds);
    let mut transforms = initial_transforms(d, &ref_prior, tgt_ds.k(), loop_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(loop_cfg.seed);
    let mut trace = BoundTrace::default();

    for _epoch in 0..loop_cfg.epochs {
        let d_prior = ClassPrior::new(transforms.prior.d_vector())
            .map_err(|e| Error::Numeric(format!("prior degenerated: {e}")))?;
        let ref_batch_ds = subsample_by_prior(
            ref_ds,
            &d_prior,
            loop_cfg.batch_ref,
            rng.gen::<u64>(),
            loop_cfg.replacement,
        )?;
        let batch_ref = Batch::from_dataset(&ref_batch_ds);

        let tgt_idx: Vec<usize> = match loop_cfg.replacement {
            Replacement::With => (0..loop_cfg.batch_tgt)
                .map(|_| rng.gen_range(0..tgt_ds.n()))
                .collect(),
            Replacement::Without => {
                if loop_cfg.batch_tgt > tgt_ds.n() {
                    return Err(Error::InvalidConfig(
                        "target batch larger than dataset without replacement".into(),
                    ));
                }
                rand::seq::index::sample(&mut rng, tgt_ds.n(), loop_cfg.batch_tgt).into_vec()
            }
        };
        let tgt_batch_ds = tgt_ds.select(&tgt_idx, "tgt-batch")?;
        let mut batch_tgt = Batch::from_dataset(&tgt_batch_ds);
        if loop_cfg.target_labels == TargetLabelMode::Pseudo {
            batch_tgt.labels = pseudo_label_targets(batch_tgt.features.view(), h_r, &transforms)?;
        }
        let tgt_prior: Vec<f64> = match loop_cfg.target_labels {
            TargetLabelMode::Supervised => supervised_tgt_prior.weights().to_vec(),
            TargetLabelMode::Pseudo => {
                let mut counts = vec![0.0; tgt_ds.k()];
                for &y in &batch_tgt.labels {
                    counts[y] += 1.0;
                }
                counts.iter().map(|c| c / batch_tgt.n() as f64).collect()
            }
        };

        for step in 0..loop_cfg.sgd_steps_per_epoch {
            let mut common = common_objective_parts(
                &batch_ref,
                &transforms,
                h_r,
                &ref_prior,
                &tgt_prior,
                loop_cfg.penalty_prior_weight,
                loop_cfg.penalty_inv_weight,
            )?;
            let uniform_ref = vec![1.0 / batch_ref.n() as f64; batch_ref.n()];
            let uniform_tgt = vec![1.0 / batch_tgt.n() as f64; batch_tgt.n()];
            let raw = moment_stats(batch_ref.features.view(), &uniform_ref)?;
            let target = moment_stats(batch_tgt.features.view(), &uniform_tgt)?;
            let (gamma, grad_a) =
                gamma_and_grad_wrt_map(&raw, &transforms.feature.a, &target, cfg.lambda)?;
            common.grads.a += &grad_a;

            let record = EpochRecord {
                objective: gamma
                    + common.reweighted
                    + common.entropy
                    + common.prior_penalty
                    + common.inv_penalty,
                reweighted_loss: common.reweighted,
                entropy: common.entropy,
                distance: gamma,
                prior_penalty: common.prior_penalty,
                inv_penalty: common.inv_penalty,
            };
            if !record.objective.is_finite() {
                return Err(Error::Diverged("objective is not finite".into()));
            }
            if step == 0 {
                trace.epochs.push(record);
            }

            transforms
                .feature
                .a
                .scaled_add(-loop_cfg.learning_rate, &common.grads.a);
            transforms
                .feature
                .a_bar
                .scaled_add(-loop_cfg.learning_rate, &common.grads.a_bar);
            if let (Some(logits), Some(g)) =
                (transforms.label.logits_mut(), common.grads.b_logits)
            {
                logits.scaled_add(-loop_cfg.learning_rate, &g);
            }
            if let (Some(logits), Some(g)) =
                (transforms.prior.logits_mut(), common.grads.d_logits)
            {
                logits.scaled_add(-loop_cfg.learning_rate, &g);
            }
        }
    }

    // final score on the full datasets: reweighted loss + entropy + Gamma
    // between the D-weighted pushed reference and the target
    let d_vec = transforms.prior.d_vector();
    let d_prior = ClassPrior::new(d_vec.clone())
        .map_err(|e| Error::Numeric(format!("prior degenerated: {e}")))?;
    let term1 = crate::classifier::reweighted_loss(h_r, ref_ds, &d_prior)?;
    let term2 = crate::transforms::conditional_entropy(&transforms.label, &d_vec)?;
    let mut counts = vec![0usize; ref_ds.k()];
    for &y in ref_ds.labels() {
        counts[y] += 1;
    }
    let ref_weights: Vec<f64> = ref_ds
        .labels()
        .iter()
        .map(|&y| d_vec[y] / counts[y].max(1) as f64)
        .collect();
    let pushed = transforms.feature.map_batch(ref_ds.features());
    let pushed_stats = moment_stats(pushed.view(), &ref_weights)?;
    let tgt_uniform = vec![1.0 / tgt_ds.n() as f64; tgt_ds.n()];
    let tgt_stats = moment_stats(tgt_ds.features(), &tgt_uniform)?;
    let gamma = gamma_distance(&pushed_stats, &tgt_stats, cfg.lambda)?;

    Ok(FastOutput {
        transforms,
        score: term1 + term2 + gamma,
        reweighted_reference_loss: term1,
        label_mismatch: term2,
        gamma,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn moment_stats_hand_example() {
        let feats = array![[0.0], [2.0]];
        let stats = moment_stats(feats.view(), &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(stats.mu[0], 1.0);
        assert_abs_diff_eq!(stats.sigma[[0, 0]], 1.0);
    }

    #[test]
    fn repeated_point_has_zero_covariance() {
        let feats = array![[3.0, -1.0], [3.0, -1.0], [3.0, -1.0]];
        let w = vec![1.0 / 3.0; 3];
        let stats = moment_stats(feats.view(), &w).unwrap();
        assert!(stats.sigma.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn moments_respect_affine_transformation_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20;
        let d = 3;
        let feats = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
        let w = vec![1.0 / n as f64; n];
        let m = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
        let c = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let mapped = feats.dot(&m.t()) + &c.view().insert_axis(ndarray::Axis(0));
        let s0 = moment_stats(feats.view(), &w).unwrap();
        let s1 = moment_stats(mapped.view(), &w).unwrap();
        let expect_mu = m.dot(&s0.mu) + &c;
        let expect_sigma = m.dot(&s0.sigma).dot(&m.t());
        for (a, b) in s1.mu.iter().zip(expect_mu.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        for (a, b) in s1.sigma.iter().zip(expect_sigma.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn moment_stats_oracle_small_n() {
        // direct O(n d^2) summation oracle on n <= 16
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=4);
            let feats = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
            let w = vec![1.0 / n as f64; n];
            let stats = moment_stats(feats.view(), &w).unwrap();
            for a in 0..d {
                let mean_a: f64 = (0..n).map(|i| feats[[i, a]]).sum::<f64>() / n as f64;
                assert_abs_diff_eq!(stats.mu[a], mean_a, epsilon = 1e-10);
                for b in 0..d {
                    let mean_b: f64 = (0..n).map(|i| feats[[i, b]]).sum::<f64>() / n as f64;
                    let cov: f64 = (0..n)
                        .map(|i| (feats[[i, a]] - mean_a) * (feats[[i, b]] - mean_b))
                        .sum::<f64>()
                        / n as f64;
                    assert_abs_diff_eq!(stats.sigma[[a, b]], cov, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn gamma_basics() {
        let s1 = MomentStats {
            mu: array![1.0, 2.0],
            sigma: array![[1.0, 0.0], [0.0, 1.0]],
        };
        assert_abs_diff_eq!(gamma_distance(&s1, &s1, 0.5).unwrap(), 0.0);

        let s2 = MomentStats {
            mu: array![2.0, 4.0],
            sigma: s1.sigma.clone(),
        };
        // means differ by (1, 2): squared norm 5, any lambda
        assert_abs_diff_eq!(gamma_distance(&s1, &s2, 123.0).unwrap(), 5.0);

        let s3 = MomentStats {
            mu: s1.mu.clone(),
            sigma: array![[1.0, 2.0], [0.0, 1.0]],
        };
        // covariances differ by E with ||E||_F = 2, lambda = 0.01 -> 0.04
        assert_abs_diff_eq!(gamma_distance(&s1, &s3, 0.01).unwrap(), 0.04, epsilon = 1e-12);
    }

    #[test]
    fn gamma_symmetry_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d = rng.gen_range(1..4);
            let mk = |rng: &mut ChaCha8Rng| {
                let m = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
                MomentStats {
                    mu: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
                    sigma: &m + &m.t(), // symmetric
                }
            };
            let s1 = mk(&mut rng);
            let s2 = mk(&mut rng);
            let g12 = gamma_distance(&s1, &s2, 0.01).unwrap();
            let g21 = gamma_distance(&s2, &s1, 0.01).unwrap();
            assert_abs_diff_eq!(g12, g21, epsilon = 1e-12);
            assert!(g12 >= 0.0);
            assert!(gamma_distance(&s1, &s1, 0.01).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let d = rng.gen_range(1..4);
            let n = rng.gen_range(3..8);
            let feats = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
            let w = vec![1.0 / n as f64; n];
            let raw = moment_stats(feats.view(), &w).unwrap();
            let tgt_feats = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
            let target = moment_stats(tgt_feats.view(), &w).unwrap();
            let a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.5..1.5));
            let lambda = 0.01;
            let (_, grad) = gamma_and_grad_wrt_map(&raw, &a, &target, lambda).unwrap();
            let eps = 1e-5;
            for r in 0..d {
                for c in 0..d {
                    let mut ap = a.clone();
                    ap[[r, c]] += eps;
                    let mut am = a.clone();
                    am[[r, c]] -= eps;
                    let (vp, _) = gamma_and_grad_wrt_map(&raw, &ap, &target, lambda).unwrap();
                    let (vm, _) = gamma_and_grad_wrt_map(&raw, &am, &target, lambda).unwrap();
                    let fd = (vp - vm) / (2.0 * eps);
                    let denom = grad[[r, c]].abs().max(1e-4);
                    assert!(
                        (grad[[r, c]] - fd).abs() / denom < 1e-4,
                        "A[{r},{c}] analytic {} vs fd {fd}",
                        grad[[r, c]]
                    );
                }
            }
        }
    }
}
