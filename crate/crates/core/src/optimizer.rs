//! Alternating minimization of the transferability bound.
//!
//! Each epoch resamples a reference batch by the current prior D, draws (or
//! pseudo-labels) a target batch, pushes the reference through (A, B), solves
//! an exact optimal coupling under the differentiable surrogate cost, and
//! takes SGD steps on
//!
//! ```text
//! sum_ij pi*_ij d~(pushed_i, target_j)            (coupling-weighted distance)
//! + mean_i D(y_i)/P_R(y_i) ce(h_R(z_i), y_i)      (reweighted reference loss)
//! + H(B | D)                                      (label mismatch)
//! + w_prior ||P_T - B D||^2                       (prior-matching penalty)
//! + w_inv (||A A_bar - I||_F + ||A_bar A - I||_F) (invertibility penalty)
//! ```
//!
//! with the coupling held fixed during the step. The final report re-evaluates
//! the bound on the full datasets with the masked-exact distance.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy_loss, SoftmaxClassifier};
use crate::dataset::{
    empirical_prior, subsample_by_prior, ClassPrior, EmbeddingDataset, Replacement,
};
use crate::ot::{exact_ot, Coupling, OtMode, SQRT_2};
use crate::transforms::{
    evaluate_bound, push_reference, BoundOptions, BoundReport, FeatureMap, LabelMap, PriorVector,
    TransformSet,
};
use crate::{Error, Result};

/// Which transformations are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformMode {
    /// B frozen to a seeded random permutation (requires K_R = K_T) and D
    /// frozen to the reference prior; only A and A_bar move.
    LearnedA,
    /// B and D learned through their softmax parameterizations as well.
    LearnedAll,
}

/// Where target labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetLabelMode {
    Supervised,
    /// Labels predicted by the transformed reference classifier, refreshed
    /// every epoch with the current transforms.
    Pseudo,
}

/// Configuration of the minimization loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Alg1Config {
    pub epochs: usize,
    pub batch_ref: usize,
    pub batch_tgt: usize,
    pub learning_rate: f64,
    pub penalty_prior_weight: f64,
    pub penalty_inv_weight: f64,
    pub mode: TransformMode,
    pub target_labels: TargetLabelMode,
    pub tau: f64,
    pub nu: f64,
    pub seed: u64,
    /// SGD steps per coupling refresh.
    pub sgd_steps_per_epoch: usize,
    /// Batch sampling discipline; `Without` with full-size batches makes the
    /// per-epoch data deterministic.
    pub replacement: Replacement,
}

impl Default for Alg1Config {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_ref: 1000,
            batch_tgt: 1000,
            learning_rate: 0.01,
            penalty_prior_weight: 1.0,
            penalty_inv_weight: 1.0,
            mode: TransformMode::LearnedA,
            target_labels: TargetLabelMode::Supervised,
            tau: 0.02,
            nu: 1e8,
            seed: 0,
            sgd_steps_per_epoch: 1,
            replacement: Replacement::With,
        }
    }
}

impl Alg1Config {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_ref < d || self.batch_tgt < d {
            return Err(Error::InvalidConfig(format!(
                "batch sizes ({}, {}) must be >= feature dimension {d}; smaller \
                 batches let the feature map overfit each batch exactly",
                self.batch_ref, self.batch_tgt
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.penalty_prior_weight < 0.0 || self.penalty_inv_weight < 0.0 {
            return Err(Error::InvalidConfig("penalty weights must be >= 0".into()));
        }
        if !(self.tau >= 0.0) || !(self.nu > 0.0) {
            return Err(Error::InvalidConfig("need tau >= 0 and nu > 0".into()));
        }
        if self.sgd_steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("sgd steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch objective decomposition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRecord {
    pub objective: f64,
    pub reweighted_loss: f64,
    pub entropy: f64,
    pub distance: f64,
    pub prior_penalty: f64,
    pub inv_penalty: f64,
}

/// Objective trace across epochs.
#[derive(Debug, Clone, Default)]
pub struct BoundTrace {
    pub epochs: Vec<EpochRecord>,
}

impl BoundTrace {
    /// `epoch,objective,term1,term2,term3,prior_pen,inv_pen` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,objective,term1,term2,term3,prior_pen,inv_pen")?;
        for (e, r) in self.epochs.iter().enumerate() {
            writeln!(
                w,
                "{e},{},{},{},{},{},{}",
                r.objective, r.reweighted_loss, r.entropy, r.distance, r.prior_penalty, r.inv_penalty
            )?;
        }
        Ok(())
    }
}

/// A mini-batch of labelled features.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &EmbeddingDataset) -> Self {
        Self {
            features: ds.features().to_owned(),
            labels: ds.labels().to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

/// Gradients w.r.t. the learnable transform parameters; `None` entries
/// correspond to frozen parameterizations.
#[derive(Debug, Clone)]
pub struct TransformGradients {
    pub a: Array2<f64>,
    pub a_bar: Array2<f64>,
    pub b_logits: Option<Array2<f64>>,
    pub d_logits: Option<Array1<f64>>,
}

/// Pseudo-labels for target features: argmax of B h_R(A_bar z), ties to the
/// lowest index.
pub fn pseudo_label_targets(
    features: ArrayView2<'_, f64>,
    h_r: &SoftmaxClassifier,
    transforms: &TransformSet,
) -> Result<Vec<usize>> {
    let tc = transforms.transformed_classifier(h_r)?;
    Ok((0..features.nrows())
        .map(|i| tc.pseudo_label(features.row(i)))
        .collect())
}

/// Surrogate cost matrix between a pushed reference batch and a target batch.
fn surrogate_cost_matrix(
    pushed: &Array2<f64>,
    pushed_labels: &[usize],
    tgt: ArrayView2<'_, f64>,
    tgt_labels: &[usize],
    nu: f64,
) -> Array2<f64> {
    let (n, m) = (pushed.nrows(), tgt.nrows());
    let mut cost = Array2::zeros((n, m));
    let label_cost = nu * SQRT_2;
    for i in 0..n {
        let pi = pushed.row(i);
        let pi = pi.as_slice().unwrap();
        for j in 0..m {
            let tj = tgt.row(j);
            let tj = tj.as_slice().unwrap();
            let mut acc = 0.0;
            for (a, b) in pi.iter().zip(tj) {
                let t = a - b;
                acc += t * t;
            }
            cost[[i, j]] = acc.sqrt()
                + if pushed_labels[i] == tgt_labels[j] {
                    0.0
                } else {
                    label_cost
                };
        }
    }
    cost
}

fn softmax_chain(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

/// Shared objective pieces: everything except the distribution-distance
/// term. Returned gradients carry only these contributions (the caller adds
/// its distance term's A-gradient on top).
pub(crate) struct CommonParts {
    pub reweighted: f64,
    pub entropy: f64,
    pub prior_penalty: f64,
    pub inv_penalty: f64,
    pub grads: TransformGradients,
}

pub(crate) fn common_objective_parts(
    batch_ref: &Batch,
    transforms: &TransformSet,
    h_r: &SoftmaxClassifier,
    ref_prior: &ClassPrior,
    tgt_prior: &[f64],
    penalty_prior_weight: f64,
    penalty_inv_weight: f64,
) -> Result<CommonParts> {
    let d = transforms.d();
    let k_r = transforms.k_r();
    let k_t = transforms.k_t();
    if tgt_prior.len() != k_t {
        return Err(Error::InvalidData("target prior length != K_T".into()));
    }
    let n_r = batch_ref.n();

    let a = &transforms.feature.a;
    let a_bar = &transforms.feature.a_bar;
    let mut grad_a = Array2::<f64>::zeros((d, d));
    let mut grad_a_bar = Array2::<f64>::zeros((d, d));

    // --- reweighted reference loss ---
    let d_vec = transforms.prior.d_vector();
    let mut reweighted = 0.0;
    let mut grad_d_direct = vec![0.0; k_r]; // d objective / d D_k before softmax chain
    for i in 0..n_r {
        let y = batch_ref.labels[i];
        let base = ref_prior.weight(y);
        if base <= 0.0 {
            return Err(Error::InvalidData(format!(
                "reference prior is zero for class {y} present in the batch"
            )));
        }
        let loss = cross_entropy_loss(h_r, batch_ref.features.row(i), y)?;
        reweighted += d_vec[y] / base * loss / n_r as f64;
        grad_d_direct[y] += loss / (base * n_r as f64);
    }

    // --- label-mismatch conditional entropy H(B | D) ---
    let b = transforms.label.matrix();
    let mut column_entropy = vec![0.0; k_r];
    for j in 0..k_r {
        let mut h = 0.0;
        for &bij in b.column(j) {
            if bij > 0.0 {
                h -= bij * bij.ln();
            }
        }
        column_entropy[j] = h;
    }
    let entropy: f64 = d_vec
        .iter()
        .zip(&column_entropy)
        .map(|(&dj, &hj)| dj * hj)
        .sum();
    for (g, &hj) in grad_d_direct.iter_mut().zip(&column_entropy) {
        *g += hj;
    }

    // --- prior-matching penalty ||P_T - B D||^2 ---
    let bd: Vec<f64> = (0..k_t)
        .map(|i| (0..k_r).map(|j| b[[i, j]] * d_vec[j]).sum())
        .collect();
    let residual: Vec<f64> = bd.iter().zip(tgt_prior).map(|(&x, &t)| x - t).collect();
    let prior_penalty = penalty_prior_weight * residual.iter().map(|&r| r * r).sum::<f64>();
    for j in 0..k_r {
        let mut acc = 0.0;
        for i in 0..k_t {
            acc += b[[i, j]] * residual[i];
        }
        grad_d_direct[j] += 2.0 * penalty_prior_weight * acc;
    }

    // --- B-logit gradients (entropy + prior penalty), per column softmax ---
    let grad_b_logits = if transforms.label.is_frozen() {
        None
    } else {
        let mut grad = Array2::<f64>::zeros((k_t, k_r));
        for j in 0..k_r {
            let col: Vec<f64> = b.column(j).to_vec();
            let mut g_col = vec![0.0; k_t];
            for i in 0..k_t {
                // entropy: d/dB_ij of -D_j B ln B  = -D_j (ln B + 1)
                let safe = col[i].max(1e-300);
                g_col[i] = -d_vec[j] * (safe.ln() + 1.0)
                    + 2.0 * penalty_prior_weight * residual[i] * d_vec[j];
            }
            let chained = softmax_chain(&col, &g_col);
            for i in 0..k_t {
                grad[[i, j]] = chained[i];
            }
        }
        Some(grad)
    };

    let grad_d_logits = if transforms.prior.is_frozen() {
        None
    } else {
        Some(Array1::from_vec(softmax_chain(&d_vec, &grad_d_direct)))
    };

    // --- invertibility penalty ||A A_bar - I||_F + ||A_bar A - I||_F ---
    let eye = Array2::<f64>::eye(d);
    let m_fwd = a.dot(a_bar) - &eye;
    let m_bwd = a_bar.dot(a) - &eye;
    let norm_fwd = m_fwd.mapv(|v| v * v).sum().sqrt();
    let norm_bwd = m_bwd.mapv(|v| v * v).sum().sqrt();
    let inv_penalty = penalty_inv_weight * (norm_fwd + norm_bwd);
    if penalty_inv_weight > 0.0 {
        if norm_fwd > 1e-12 {
            let unit = m_fwd.mapv(|v| v / norm_fwd);
            grad_a.scaled_add(penalty_inv_weight, &unit.dot(&a_bar.t()));
            grad_a_bar.scaled_add(penalty_inv_weight, &a.t().dot(&unit));
        }
        if norm_bwd > 1e-12 {
            let unit = m_bwd.mapv(|v| v / norm_bwd);
            grad_a.scaled_add(penalty_inv_weight, &a_bar.t().dot(&unit));
            grad_a_bar.scaled_add(penalty_inv_weight, &unit.dot(&a.t()));
        }
    }

    Ok(CommonParts {
        reweighted,
        entropy,
        prior_penalty,
        inv_penalty,
        grads: TransformGradients {
            a: grad_a,
            a_bar: grad_a_bar,
            b_logits: grad_b_logits,
            d_logits: grad_d_logits,
        },
    })
}

/// Evaluates the full step objective and its analytic gradients, treating
/// the coupling as constant. `ref_prior` is the full reference dataset's
/// empirical prior (the reweighting base) and `tgt_prior` the target prior
/// used by the prior-matching penalty.
#[allow(clippy::too_many_arguments)]
pub fn objective_and_gradients(
    batch_ref: &Batch,
    batch_tgt: &Batch,
    coupling: &Coupling,
    transforms: &TransformSet,
    h_r: &SoftmaxClassifier,
    ref_prior: &ClassPrior,
    tgt_prior: &[f64],
    cfg: &Alg1Config,
) -> Result<(EpochRecord, TransformGradients)> {
    let d = transforms.d();
    let mut common = common_objective_parts(
        batch_ref,
        transforms,
        h_r,
        ref_prior,
        tgt_prior,
        cfg.penalty_prior_weight,
        cfg.penalty_inv_weight,
    )?;

    // --- coupling-weighted surrogate distance ---
    let (pushed, pushed_labels) = push_reference(
        batch_ref.features.view(),
        &batch_ref.labels,
        &transforms.feature,
        &transforms.label,
    )?;
    let mut distance = 0.0;
    for &(i, j, w) in coupling.entries() {
        let zi = batch_ref.features.row(i);
        let pi = pushed.row(i);
        let tj = batch_tgt.features.row(j);
        let diff = &pi - &tj;
        let dist = diff.dot(&diff).sqrt();
        distance += w * dist;
        if pushed_labels[i] != batch_tgt.labels[j] {
            distance += w * cfg.nu * SQRT_2;
        }
        if dist > 1e-12 {
            // d||A z - t|| / dA = (A z - t) z^T / ||A z - t||
            let scale = w / dist;
            for r in 0..d {
                let dr = scale * diff[r];
                let mut row = common.grads.a.row_mut(r);
                for (g, &zv) in row.iter_mut().zip(zi) {
                    *g += dr * zv;
                }
            }
        }
    }

    let record = EpochRecord {
        objective: distance
            + common.reweighted
            + common.entropy
            + common.prior_penalty
            + common.inv_penalty,
        reweighted_loss: common.reweighted,
        entropy: common.entropy,
        distance,
        prior_penalty: common.prior_penalty,
        inv_penalty: common.inv_penalty,
    };
    if !record.objective.is_finite() {
        return Err(Error::Diverged("objective is not finite".into()));
    }
    Ok((record, common.grads))
}

/// Result of the minimization loop.
#[derive(Debug, Clone)]
pub struct Alg1Output {
    pub transforms: TransformSet,
    pub trace: BoundTrace,
    pub report: BoundReport,
}

/// Builds the initial transform set for a run. LearnedA freezes B to
/// `LabelMap::random_permutation(k_t, cfg.seed)` and D to the reference
/// prior; LearnedAll starts B at seeded random logits and D at the prior.
pub fn initial_transforms(
    d: usize,
    ref_prior: &ClassPrior,
    k_t: usize,
    cfg: &Alg1Config,
) -> Result<TransformSet> {
    let k_r = ref_prior.k();
    let label = match cfg.mode {
        TransformMode::LearnedA => {
            if k_r != k_t {
                return Err(Error::InvalidConfig(format!(
                    "LearnedA freezes B to a permutation and needs K_R = K_T; \
                     got {k_r} vs {k_t} (subsample the reference to {k_t} classes)"
                )));
            }
            LabelMap::random_permutation(k_t, cfg.seed)
        }
        TransformMode::LearnedAll => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            LabelMap::learned(Array2::from_shape_fn((k_t, k_r), |_| {
                rng.gen_range(-0.1..0.1)
            }))
        }
    };
    let prior = match cfg.mode {
        TransformMode::LearnedA => PriorVector::frozen(ref_prior),
        TransformMode::LearnedAll => PriorVector::learned_from(ref_prior),
    };
    let t = TransformSet {
        feature: FeatureMap::identity(d),
        label,
        prior,
    };
    t.validate()?;
    Ok(t)
}

/// Runs the full minimization and evaluates the final bound on the complete
/// datasets with the masked-exact distance (prior-projected). The last
/// epoch's batch-level surrogate distance is reported alongside.
pub fn alg1_minimize(
    ref_ds: &EmbeddingDataset,
    tgt_ds: &EmbeddingDataset,
    h_r: &SoftmaxClassifier,
    cfg: &Alg1Config,
) -> Result<Alg1Output> {
    let d = ref_ds.d();
    cfg.validate(d)?;
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
    if h_r.k() != ref_ds.k() || h_r.d() != d {
        return Err(Error::InvalidData(
            "reference probe does not match the reference dataset".into(),
        ));
    }

    let ref_prior = empirical_prior(ref_ds);
    let supervised_tgt_prior = empirical_prior(tgt_ds);
    let mut transforms = initial_transforms(d, &ref_prior, tgt_ds.k(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = BoundTrace::default();
    let mut last_batch_distance = 0.0;

    for _epoch in 0..cfg.epochs {
        // step 1: resample the reference batch by the current prior D
        let d_prior = ClassPrior::new(transforms.prior.d_vector())
            .map_err(|e| Error::Numeric(format!("prior degenerated: {e}")))?;
        let ref_batch_ds = subsample_by_prior(
            ref_ds,
            &d_prior,
            cfg.batch_ref,
            rng.gen::<u64>(),
            cfg.replacement,
        )?;
        let batch_ref = Batch::from_dataset(&ref_batch_ds);

        // steps 2-8: target batch, labelled or pseudo-labelled
        let tgt_idx: Vec<usize> = match cfg.replacement {
            Replacement::With => (0..cfg.batch_tgt)
                .map(|_| rng.gen_range(0..tgt_ds.n()))
                .collect(),
            Replacement::Without => {
                if cfg.batch_tgt > tgt_ds.n() {
                    return Err(Error::InvalidConfig(
                        "target batch larger than dataset without replacement".into(),
                    ));
                }
                rand::seq::index::sample(&mut rng, tgt_ds.n(), cfg.batch_tgt).into_vec()
            }
        };
        let tgt_batch_ds = tgt_ds.select(&tgt_idx, "tgt-batch")?;
        let mut batch_tgt = Batch::from_dataset(&tgt_batch_ds);
        if cfg.target_labels == TargetLabelMode::Pseudo {
            batch_tgt.labels = pseudo_label_targets(batch_tgt.features.view(), h_r, &transforms)?;
        }
        let tgt_prior: Vec<f64> = match cfg.target_labels {
            TargetLabelMode::Supervised => supervised_tgt_prior.weights().to_vec(),
            TargetLabelMode::Pseudo => {
                let mut counts = vec![0.0; tgt_ds.k()];
                for &y in &batch_tgt.labels {
                    counts[y] += 1.0;
                }
                counts.iter().map(|c| c / batch_tgt.n() as f64).collect()
            }
        };

        // steps 9-11: push the reference and solve the optimal coupling
        let (pushed, pushed_labels) = push_reference(
            batch_ref.features.view(),
            &batch_ref.labels,
            &transforms.feature,
            &transforms.label,
        )?;
        let cost = surrogate_cost_matrix(
            &pushed,
            &pushed_labels,
            batch_tgt.features.view(),
            &batch_tgt.labels,
            cfg.nu,
        );
        let row_w = vec![1.0 / batch_ref.n() as f64; batch_ref.n()];
        let col_w = vec![1.0 / batch_tgt.n() as f64; batch_tgt.n()];
        let (coupling, _) = exact_ot(cost.view(), &row_w, &col_w)?;

        // step 12: SGD on the objective with the coupling fixed
        let mut epoch_record = None;
        for _ in 0..cfg.sgd_steps_per_epoch {
            let (record, grads) = objective_and_gradients(
                &batch_ref,
                &batch_tgt,
                &coupling,
                &transforms,
                h_r,
                &ref_prior,
                &tgt_prior,
                cfg,
            )?;
            if epoch_record.is_none() {
                epoch_record = Some(record);
            }
            transforms
                .feature
                .a
                .scaled_add(-cfg.learning_rate, &grads.a);
            transforms
                .feature
                .a_bar
                .scaled_add(-cfg.learning_rate, &grads.a_bar);
            if let (Some(logits), Some(g)) = (transforms.label.logits_mut(), grads.b_logits) {
                logits.scaled_add(-cfg.learning_rate, &g);
            }
            if let (Some(logits), Some(g)) = (transforms.prior.logits_mut(), grads.d_logits) {
                logits.scaled_add(-cfg.learning_rate, &g);
            }
        }
        let record = epoch_record.expect("at least one sgd step");
        last_batch_distance = record.distance;
        trace.epochs.push(record);
    }

    // final bound on the full data; pseudo mode evaluates against
    // pseudo-labelled targets since true labels are unavailable
    let report = match cfg.target_labels {
        TargetLabelMode::Supervised => evaluate_bound(
            ref_ds,
            tgt_ds,
            h_r,
            &transforms,
            &BoundOptions {
                tau: cfg.tau,
                ot_mode: OtMode::ExactInfinity,
                nu: cfg.nu,
                with_surrogate: false,
            },
            None,
        )?,
        TargetLabelMode::Pseudo => {
            let pseudo = pseudo_label_targets(tgt_ds.features(), h_r, &transforms)?;
            let pseudo_ds = EmbeddingDataset::new(
                format!("{}[pseudo]", tgt_ds.name()),
                tgt_ds.features().to_owned(),
                pseudo,
                tgt_ds.k(),
            )?;
            evaluate_bound(
                ref_ds,
                &pseudo_ds,
                h_r,
                &transforms,
                &BoundOptions {
                    tau: cfg.tau,
                    ot_mode: OtMode::ExactInfinity,
                    nu: cfg.nu,
                    with_surrogate: false,
                },
                None,
            )?
        }
    };
    let mut report = report;
    report.distribution_mismatch_surrogate = Some(cfg.tau * last_batch_distance);

    Ok(Alg1Output {
        transforms,
        trace,
        report,
    })
}
