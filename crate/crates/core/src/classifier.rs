//! Softmax linear probes trained with a gradient-norm penalty.
//!
//! The probe h(z) = softmax(Wz + b) is fit by mini-batch SGD on
//!
//! ```text
//! mean_i [ ce(h(z_i), y_i) + rho * max_y max{0, ||grad_z ce(h(z_i), y)||_2 - tau}^2 ]
//! ```
//!
//! which drives the Lipschitz constant of the loss/probe composition toward
//! the budget `tau` at the training samples. All gradients (including the
//! penalty's, through the softmax) are analytic; the hinge kink uses
//! subgradient zero.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassPrior, EmbeddingDataset, StandardizationStats};
use crate::{Error, Result};

/// A linear probe producing probability vectors on the K-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    weights: Array2<f64>, // K x d
    bias: Array1<f64>,    // K
}

impl SoftmaxClassifier {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::InvalidData(format!(
                "weight rows {} != bias length {}",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::InvalidData("probe must have K >= 1, d >= 1".into()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite probe parameter".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            weights: Array2::zeros((k, d)),
            bias: Array1::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn logits(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weights.dot(&z) + &self.bias
    }

    /// Probability vector on the simplex (max-subtracted softmax).
    pub fn predict_probs(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        softmax(&self.logits(z))
    }

    pub fn predict_label(&self, z: ArrayView1<'_, f64>) -> usize {
        argmax(self.logits(z).as_slice().unwrap())
    }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - m).exp());
    let total = out.sum();
    out.mapv_inplace(|v| v / total);
    out
}

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &Array1<f64>) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy -log h(z)_y, computed from logits without forming probs.
pub fn cross_entropy_loss(h: &SoftmaxClassifier, z: ArrayView1<'_, f64>, y: usize) -> Result<f64> {
    if y >= h.k() {
        return Err(Error::InvalidData(format!(
            "label {y} out of range for K={}",
            h.k()
        )));
    }
    let logits = h.logits(z);
    Ok(log_sum_exp(&logits) - logits[y])
}

/// Euclidean norm of grad_z ce(h(z), y) = W^T (p - e_y), computed analytically.
pub fn grad_norm_wrt_input(
    h: &SoftmaxClassifier,
    z: ArrayView1<'_, f64>,
    y: usize,
) -> Result<f64> {
    if y >= h.k() {
        return Err(Error::InvalidData(format!(
            "label {y} out of range for K={}",
            h.k()
        )));
    }
    let p = h.predict_probs(z);
    let mut g = h.weights.t().dot(&p);
    g -= &h.weights.row(y);
    Ok(g.dot(&g).sqrt())
}

/// Largest input-gradient norm over all labels for one sample, with the
/// attaining label (ties break low). This is the quantity the training
/// penalty hinges on.
pub fn max_grad_norm_over_labels(h: &SoftmaxClassifier, z: ArrayView1<'_, f64>) -> (f64, usize) {
    let p = h.predict_probs(z);
    let g0 = h.weights.t().dot(&p); // W^T p
    let mut best = (f64::NEG_INFINITY, 0);
    for y in 0..h.k() {
        let gy = &g0 - &h.weights.row(y);
        let norm = gy.dot(&gy).sqrt();
        if norm > best.0 {
            best = (norm, y);
        }
    }
    best
}

/// Max over a dataset of the per-sample max-over-labels gradient norm.
pub fn max_grad_norm(h: &SoftmaxClassifier, ds: &EmbeddingDataset) -> f64 {
    (0..ds.n())
        .map(|i| max_grad_norm_over_labels(h, ds.feature_row(i)).0)
        .fold(0.0, f64::max)
}

/// Empirical mean cross-entropy of the probe on a dataset. With h = h_T this
/// is the measured transferability.
pub fn average_loss(h: &SoftmaxClassifier, ds: &EmbeddingDataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..ds.n() {
        total += cross_entropy_loss(h, ds.feature_row(i), ds.labels()[i])?;
    }
    Ok(total / ds.n() as f64)
}

/// Mean loss with per-sample importance weight D(y)/P_R(y), where P_R is the
/// dataset's empirical prior. Equals [`average_loss`] when D = P_R.
pub fn reweighted_loss(
    h: &SoftmaxClassifier,
    ds: &EmbeddingDataset,
    d_prior: &ClassPrior,
) -> Result<f64> {
    let p_r = crate::dataset::empirical_prior(ds);
    reweighted_loss_with_base(h, ds, d_prior, &p_r)
}

/// As [`reweighted_loss`] but with an explicitly supplied base prior,
/// so batches resampled from a larger dataset keep the full-data weights.
pub fn reweighted_loss_with_base(
    h: &SoftmaxClassifier,
    ds: &EmbeddingDataset,
    d_prior: &ClassPrior,
    base_prior: &ClassPrior,
) -> Result<f64> {
    if d_prior.k() != ds.k() || base_prior.k() != ds.k() {
        return Err(Error::InvalidData(
            "prior length does not match class count".into(),
        ));
    }
    for c in 0..ds.k() {
        if d_prior.weight(c) > 0.0 && base_prior.weight(c) == 0.0 {
            return Err(Error::InvalidData(format!(
                "transformed prior puts mass on class {c} with zero base prior"
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..ds.n() {
        let y = ds.labels()[i];
        let w = if d_prior.weight(y) == 0.0 {
            0.0
        } else {
            d_prior.weight(y) / base_prior.weight(y)
        };
        if w != 0.0 {
            total += w * cross_entropy_loss(h, ds.feature_row(i), y)?;
        }
    }
    Ok(total / ds.n() as f64)
}

/// Fraction of correctly argmax-classified samples.
pub fn accuracy(h: &SoftmaxClassifier, ds: &EmbeddingDataset) -> f64 {
    let hits = (0..ds.n())
        .filter(|&i| h.predict_label(ds.feature_row(i)) == ds.labels()[i])
        .count();
    hits as f64 / ds.n() as f64
}

/// Probe training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Lipschitz budget for the loss-gradient norm.
    pub tau: f64,
    /// Gradient-norm penalty weight.
    pub rho: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; keeps the large-rho penalty stable at
    /// ordinary learning rates. `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            rho: 1e4,
            learning_rate: 0.1,
            momentum: 0.0,
            clip_grad_norm: Some(1.0),
            epochs: 5000,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::InvalidConfig("tau and rho must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("clip_grad_norm must be > 0".into()));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of probe training, with the post-training diagnostics needed to
/// sanity-check the Lipschitz budget.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: SoftmaxClassifier,
    pub final_loss: f64,
    pub max_grad_norm: f64,
    pub accuracy: f64,
}

/// Batch-mean objective gradient (loss + penalty) w.r.t. probe parameters.
/// Exposed for gradient-fidelity tests.
pub fn probe_objective_and_gradients(
    h: &SoftmaxClassifier,
    ds: &EmbeddingDataset,
    indices: &[usize],
    tau: f64,
    rho: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let k = h.k();
    let d = h.d();
    let mut grad_w = Array2::zeros((k, d));
    let mut grad_b = Array1::zeros(k);
    let mut objective = 0.0;
    let scale = 1.0 / indices.len() as f64;

    for &i in indices {
        let z = ds.feature_row(i);
        let y = ds.labels()[i];
        let logits = h.logits(z);
        let p = softmax(&logits);
        objective += scale * (log_sum_exp(&logits) - logits[y]);

        // cross-entropy term: dW = (p - e_y) z^T, db = p - e_y
        for r in 0..k {
            let coeff = scale * (p[r] - if r == y { 1.0 } else { 0.0 });
            grad_b[r] += coeff;
            let mut row = grad_w.row_mut(r);
            for (g, &zv) in row.iter_mut().zip(z) {
                *g += coeff * zv;
            }
        }

        if rho > 0.0 {
            let g0 = h.weights.t().dot(&p);
            let mut s = f64::NEG_INFINITY;
            let mut y_star = 0;
            for label in 0..k {
                let gy = &g0 - &h.weights.row(label);
                let norm = gy.dot(&gy).sqrt();
                if norm > s {
                    s = norm;
                    y_star = label;
                }
            }
            if s > tau {
                objective += scale * rho * (s - tau) * (s - tau);
                // subgradient through ||W^T (p - e_{y*})|| with p = softmax(Wz+b)
                let g = &g0 - &h.weights.row(y_star);
                let u = g.mapv(|v| v / s);
                let wu = h.weights.dot(&u); // K
                let pwu = p.dot(&wu);
                let coeff = scale * 2.0 * rho * (s - tau);
                for r in 0..k {
                    let q_r = p[r] - if r == y_star { 1.0 } else { 0.0 };
                    let v_r = p[r] * (wu[r] - pwu);
                    grad_b[r] += coeff * v_r;
                    let mut row = grad_w.row_mut(r);
                    for ((g_val, &u_val), &z_val) in row.iter_mut().zip(&u).zip(z) {
                        *g_val += coeff * (q_r * u_val + v_r * z_val);
                    }
                }
            }
        }
    }
    (objective, grad_w, grad_b)
}

/// Trains a probe by mini-batch SGD on the penalized objective.
/// Deterministic given the seed; errors out if the objective turns
/// non-finite (learning rate too high).
pub fn train_lipschitz_softmax(ds: &EmbeddingDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = ds.k();
    let d = ds.d();
    let mut h = SoftmaxClassifier::zeros(k, d);
    let mut vel_w = Array2::<f64>::zeros((k, d));
    let mut vel_b = Array1::<f64>::zeros(k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.n()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (obj, mut grad_w, mut grad_b) =
                probe_objective_and_gradients(&h, ds, batch, cfg.tau, cfg.rho);
            if !obj.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite objective at epoch {epoch}"
                )));
            }
            if let Some(max_norm) = cfg.clip_grad_norm {
                let norm = (grad_w.mapv(|g| g * g).sum() + grad_b.mapv(|g| g * g).sum()).sqrt();
                if norm > max_norm {
                    let scale = max_norm / norm;
                    grad_w.mapv_inplace(|g| g * scale);
                    grad_b.mapv_inplace(|g| g * scale);
                }
            }
            if cfg.momentum > 0.0 {
                vel_w.zip_mut_with(&grad_w, |v, &g| *v = cfg.momentum * *v + g);
                vel_b.zip_mut_with(&grad_b, |v, &g| *v = cfg.momentum * *v + g);
                h.weights.scaled_add(-cfg.learning_rate, &vel_w);
                h.bias.scaled_add(-cfg.learning_rate, &vel_b);
            } else {
                h.weights.scaled_add(-cfg.learning_rate, &grad_w);
                h.bias.scaled_add(-cfg.learning_rate, &grad_b);
            }
        }
    }

    if h.weights.iter().chain(h.bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite parameters after training".into()));
    }
    let final_loss = average_loss(&h, ds)?;
    let max_norm = max_grad_norm(&h, ds);
    let acc = accuracy(&h, ds);
    Ok(TrainOutcome {
        classifier: h,
        final_loss,
        max_grad_norm: max_norm,
        accuracy: acc,
    })
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    d: usize,
    k: usize,
    weights: String,
    bias: String,
    standardization: Option<StandardizationStats>,
}

pub(crate) fn encode_f32_base64(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    BASE64.encode(bytes)
}

pub(crate) fn decode_f32_base64(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 blob: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes the probe (f32 blobs) plus the standardization used at train time.
pub fn save_classifier(
    h: &SoftmaxClassifier,
    stats: Option<&StandardizationStats>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = ClassifierFile {
        d: h.d(),
        k: h.k(),
        weights: encode_f32_base64(h.weights.iter().cloned()),
        bias: encode_f32_base64(h.bias.iter().cloned()),
        standardization: stats.cloned(),
    };
    let out = File::create(path.as_ref())?;
    serde_json::to_writer_pretty(BufWriter::new(out), &file)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn load_classifier(
    path: impl AsRef<Path>,
) -> Result<(SoftmaxClassifier, Option<StandardizationStats>)> {
    let file = File::open(path.as_ref())
        .map_err(|e| Error::InvalidData(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let parsed: ClassifierFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(format!("bad classifier file: {e}")))?;
    let weights = Array2::from_shape_vec(
        (parsed.k, parsed.d),
        decode_f32_base64(&parsed.weights, parsed.k * parsed.d)?,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    let bias = Array1::from_vec(decode_f32_base64(&parsed.bias, parsed.k)?);
    Ok((SoftmaxClassifier::new(weights, bias)?, parsed.standardization))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::empirical_prior;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn uniform_probe_loss_is_ln_k() {
        let h = SoftmaxClassifier::zeros(2, 3);
        let z = array![0.4, -1.0, 2.0];
        assert_abs_diff_eq!(
            cross_entropy_loss(&h, z.view(), 0).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let h10 = SoftmaxClassifier::zeros(10, 3);
        assert_abs_diff_eq!(
            cross_entropy_loss(&h10, z.view(), 4).unwrap(),
            10f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn confident_logits_loss() {
        // logits (10, 0), y = 0: loss = ln(1 + e^-10)
        let h = SoftmaxClassifier::new(array![[10.0], [0.0]], array![0.0, 0.0]).unwrap();
        let z = array![1.0];
        let expected = (1.0 + (-10f64).exp()).ln();
        assert_abs_diff_eq!(
            cross_entropy_loss(&h, z.view(), 0).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert!((cross_entropy_loss(&h, z.view(), 0).unwrap() - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn label_out_of_range_is_error() {
        let h = SoftmaxClassifier::zeros(2, 1);
        assert!(cross_entropy_loss(&h, array![0.0].view(), 2).is_err());
        assert!(grad_norm_wrt_input(&h, array![0.0].view(), 5).is_err());
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let h = SoftmaxClassifier::zeros(3, 4);
        let z = array![1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(grad_norm_wrt_input(&h, z.view(), 1).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_gradient_norm() {
        // w0 = (1,0), w1 = (-1,0), z = 0: p = (1/2, 1/2), grad = (-1, 0)
        let h = SoftmaxClassifier::new(array![[1.0, 0.0], [-1.0, 0.0]], array![0.0, 0.0]).unwrap();
        let z = array![0.0, 0.0];
        assert_abs_diff_eq!(
            grad_norm_wrt_input(&h, z.view(), 0).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn probs_lie_on_simplex_and_are_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.gen_range(2..6);
            let d = rng.gen_range(1..5);
            let w = Array2::from_shape_fn((k, d), |_| rng.gen_range(-3.0..3.0));
            let b = Array1::from_shape_fn(k, |_| rng.gen_range(-3.0..3.0));
            let h = SoftmaxClassifier::new(w.clone(), b.clone()).unwrap();
            let z = Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0));
            let p = h.predict_probs(z.view());
            assert!(p.iter().all(|&v| v >= 0.0));
            assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-9);

            let shifted = SoftmaxClassifier::new(w, b.mapv(|v| v + 7.5)).unwrap();
            let p2 = shifted.predict_probs(z.view());
            for (a, c) in p.iter().zip(p2.iter()) {
                assert_abs_diff_eq!(a, c, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-4;
        for _ in 0..100 {
            let k = rng.gen_range(2..5);
            let d = rng.gen_range(1..6);
            let h = SoftmaxClassifier::new(
                Array2::from_shape_fn((k, d), |_| rng.gen_range(-2.0..2.0)),
                Array1::from_shape_fn(k, |_| rng.gen_range(-1.0..1.0)),
            )
            .unwrap();
            let z = Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0));
            let y = rng.gen_range(0..k);

            // analytic gradient vector
            let p = h.predict_probs(z.view());
            let mut g = h.weights().t().dot(&p);
            g -= &h.weights().row(y);

            let mut fd = Array1::zeros(d);
            for a in 0..d {
                let mut zp = z.clone();
                zp[a] += eps;
                let mut zm = z.clone();
                zm[a] -= eps;
                fd[a] = (cross_entropy_loss(&h, zp.view(), y).unwrap()
                    - cross_entropy_loss(&h, zm.view(), y).unwrap())
                    / (2.0 * eps);
            }
            let denom = g.dot(&g).sqrt().max(1e-8);
            let diff = (&g - &fd).mapv(|v| v * v).sum().sqrt();
            assert!(diff / denom < 1e-4, "rel err {}", diff / denom);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..30 {
            let k = rng.gen_range(2..4);
            let d = rng.gen_range(1..4);
            let n = rng.gen_range(2..6);
            let feats = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
            let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let ds = EmbeddingDataset::new("g", feats, labels, k).unwrap();
            let h = SoftmaxClassifier::new(
                Array2::from_shape_fn((k, d), |_| rng.gen_range(-1.5..1.5)),
                Array1::from_shape_fn(k, |_| rng.gen_range(-0.5..0.5)),
            )
            .unwrap();
            let idx: Vec<usize> = (0..n).collect();
            let tau = 0.1;
            let rho = if trial % 2 == 0 { 10.0 } else { 0.0 };
            let (_, gw, gb) = probe_objective_and_gradients(&h, &ds, &idx, tau, rho);

            let eval = |h: &SoftmaxClassifier| probe_objective_and_gradients(h, &ds, &idx, tau, rho).0;
            let eps = 1e-5;
            for r in 0..k {
                for c in 0..d {
                    let mut hp = h.clone();
                    hp.weights[[r, c]] += eps;
                    let mut hm = h.clone();
                    hm.weights[[r, c]] -= eps;
                    let fd = (eval(&hp) - eval(&hm)) / (2.0 * eps);
                    let denom = gw[[r, c]].abs().max(1e-4);
                    assert!(
                        (gw[[r, c]] - fd).abs() / denom < 1e-3,
                        "W[{r},{c}] analytic {} vs fd {fd}",
                        gw[[r, c]]
                    );
                }
                let mut hp = h.clone();
                hp.bias[r] += eps;
                let mut hm = h.clone();
                hm.bias[r] -= eps;
                let fd = (eval(&hp) - eval(&hm)) / (2.0 * eps);
                let denom = gb[r].abs().max(1e-4);
                assert!((gb[r] - fd).abs() / denom < 1e-3);
            }
        }
    }

    #[test]
    fn average_loss_basics() {
        let h = SoftmaxClassifier::zeros(3, 1);
        let ds = EmbeddingDataset::new("x", array![[0.5]], vec![1], 3).unwrap();
        assert_abs_diff_eq!(
            average_loss(&h, &ds).unwrap(),
            cross_entropy_loss(&h, ds.feature_row(0), 1).unwrap()
        );

        let ds2 = EmbeddingDataset::new(
            "x",
            array![[0.5], [0.5], [-1.0], [-1.0]],
            vec![1, 1, 0, 0],
            3,
        )
        .unwrap();
        assert_abs_diff_eq!(average_loss(&h, &ds2).unwrap(), 3f64.ln(), epsilon = 1e-12);

        // duplicating leaves the mean unchanged
        let dup = ds2.select(&[0, 1, 2, 3, 0, 1, 2, 3], "dup").unwrap();
        let w = Array2::from_shape_fn((3, 1), |(r, _)| r as f64 * 0.3 - 0.2);
        let h2 = SoftmaxClassifier::new(w, array![0.1, -0.1, 0.0]).unwrap();
        assert_abs_diff_eq!(
            average_loss(&h2, &ds2).unwrap(),
            average_loss(&h2, &dup).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn reweighted_loss_with_empirical_prior_is_average_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let ds = EmbeddingDataset::new(
            "x",
            Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0)),
            (0..40).map(|_| rng.gen_range(0..3)).collect(),
            3,
        )
        .unwrap();
        let h = SoftmaxClassifier::new(
            Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)),
            Array1::zeros(3),
        )
        .unwrap();
        let prior = empirical_prior(&ds);
        let lhs = reweighted_loss(&h, &ds, &prior).unwrap();
        let rhs = average_loss(&h, &ds).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * ds.n() as f64);
    }

    #[test]
    fn reweighted_loss_single_class_prior() {
        // prior (0.5, 0.5), D = (1, 0): value equals mean loss over class-0 samples
        let h = SoftmaxClassifier::new(array![[0.7], [-0.2]], array![0.0, 0.1]).unwrap();
        let ds = EmbeddingDataset::new(
            "x",
            array![[1.0], [2.0], [-1.0], [-2.0]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let d = ClassPrior::new(vec![1.0, 0.0]).unwrap();
        let got = reweighted_loss(&h, &ds, &d).unwrap();
        let class0 = (cross_entropy_loss(&h, ds.feature_row(0), 0).unwrap()
            + cross_entropy_loss(&h, ds.feature_row(1), 0).unwrap())
            / 2.0;
        assert_abs_diff_eq!(got, class0, epsilon = 1e-12);
    }

    #[test]
    fn separable_training_reaches_perfect_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100;
        let mut feats = Array2::zeros((n, 1));
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let y = i % 2;
            labels[i] = y;
            let mean = if y == 0 { -3.0 } else { 3.0 };
            feats[[i, 0]] = mean + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let ds = EmbeddingDataset::new("sep", feats, labels, 2).unwrap();
        let cfg = TrainConfig {
            tau: 100.0,
            rho: 1e4,
            learning_rate: 0.5,
            epochs: 300,
            batch_size: 50,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train_lipschitz_softmax(&ds, &cfg).unwrap();
        assert_eq!(out.accuracy, 1.0);
        assert!(out.final_loss < 0.1, "loss {}", out.final_loss);

        // independent Newton fit of 1-d logistic regression as oracle
        let oracle_loss = newton_logistic_1d(&ds);
        assert!(
            out.final_loss <= oracle_loss + 0.05,
            "trained {} vs oracle {oracle_loss}",
            out.final_loss
        );
    }

    // Unconstrained 1-d two-class logistic fit by Newton's method; returns
    // the optimal mean cross-entropy. Independent of the SGD path above.
    fn newton_logistic_1d(ds: &EmbeddingDataset) -> f64 {
        let n = ds.n();
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut g_w, mut g_b) = (0.0, 0.0);
            let (mut h_ww, mut h_wb, mut h_bb) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = ds.features()[[i, 0]];
                let t = if ds.labels()[i] == 1 { 1.0 } else { 0.0 };
                let p = 1.0 / (1.0 + (-(w * x + b)).exp());
                g_w += (p - t) * x / n as f64;
                g_b += (p - t) / n as f64;
                let s = p * (1.0 - p);
                h_ww += s * x * x / n as f64;
                h_wb += s * x / n as f64;
                h_bb += s / n as f64;
            }
            let det = h_ww * h_bb - h_wb * h_wb;
            if det.abs() < 1e-12 {
                break;
            }
            w -= (h_bb * g_w - h_wb * g_b) / det;
            b -= (h_ww * g_b - h_wb * g_w) / det;
        }
        let mut loss = 0.0;
        for i in 0..n {
            let x = ds.features()[[i, 0]];
            let logit = w * x + b;
            let t = if ds.labels()[i] == 1 { 1.0 } else { 0.0 };
            loss += ((1.0 + logit.exp()).ln() - t * logit) / n as f64;
        }
        loss
    }

    #[test]
    fn zero_tau_forces_uniform_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let k = 3;
        let feats = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let labels = (0..n).map(|i| i % k).collect();
        let ds = EmbeddingDataset::new("x", feats, labels, k).unwrap();
        let cfg = TrainConfig {
            tau: 0.0,
            rho: 1e4,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 64,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_lipschitz_softmax(&ds, &cfg).unwrap();
        assert!(
            (out.final_loss - (k as f64).ln()).abs() < 0.05,
            "loss {} vs ln K {}",
            out.final_loss,
            (k as f64).ln()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = Array2::from_shape_fn((60, 2), |_| rng.gen_range(-1.0..1.0));
        let labels = (0..60).map(|i| i % 2).collect();
        let ds = EmbeddingDataset::new("x", feats, labels, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 99,
            ..TrainConfig::default()
        };
        let a = train_lipschitz_softmax(&ds, &cfg).unwrap();
        let b = train_lipschitz_softmax(&ds, &cfg).unwrap();
        assert_eq!(a.classifier, b.classifier);
    }

    #[test]
    fn classifier_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        let h = SoftmaxClassifier::new(array![[0.5, -1.25], [2.0, 0.0]], array![0.25, -0.5]).unwrap();
        let stats = StandardizationStats {
            mean: vec![0.5, 1.0],
            std: vec![2.0, 1.0],
        };
        save_classifier(&h, Some(&stats), &path).unwrap();
        let (back, back_stats) = load_classifier(&path).unwrap();
        // all values here are exactly representable in f32
        assert_eq!(back, h);
        assert_eq!(back_stats.unwrap(), stats);
    }
}
