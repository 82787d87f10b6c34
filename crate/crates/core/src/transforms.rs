//! The task transformation chain and the transferability bound.
//!
//! A reference distribution is carried toward the target in three steps: a
//! class-prior change D, a column-stochastic label map B (target class given
//! reference class), and an invertible linear feature map A with learned
//! inverse. The transformed classifier is z -> B h_R(A_bar z), and the bound
//!
//! ```text
//! target loss <= E[D(y)/P_R(y) * ce(h_R(z), y)]   (reweighted reference loss)
//!              + H(B | D)                          (label mismatch)
//!              + tau * W_d(pushed reference, target)  (distribution mismatch)
//! ```
//!
//! holds when ce o h is tau-Lipschitz and the transformed prior matches the
//! target prior. B and D use softmax parameterizations while learned;
//! frozen variants store exact values so equality cases stay exact.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    argmax, average_loss, decode_f32_base64, encode_f32_base64, reweighted_loss, softmax,
    SoftmaxClassifier,
};
use crate::dataset::{empirical_prior, ClassPrior, EmbeddingDataset};
use crate::ot::{joint_wasserstein, CostParams, JointDistance, OtMode, WeightedPoints};
use crate::{Error, Result};

/// Largest allowed gap between the transformed reference prior and the
/// target prior before exact-OT bound evaluation refuses to project.
pub const PRIOR_MATCH_TOL: f64 = 0.05;

/// Invertible linear feature map with a separately learned inverse.
/// `A_bar` approximates `A^-1`; the residual is penalized during
/// optimization rather than enforced exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub a: Array2<f64>,
    pub a_bar: Array2<f64>,
}

impl FeatureMap {
    pub fn identity(d: usize) -> Self {
        Self {
            a: Array2::eye(d),
            a_bar: Array2::eye(d),
        }
    }

    pub fn new(a: Array2<f64>, a_bar: Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.dim() != a_bar.dim() {
            return Err(Error::InvalidData(
                "feature map must be square with matching inverse".into(),
            ));
        }
        Ok(Self { a, a_bar })
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    /// Frobenius residuals (||A A_bar - I||, ||A_bar A - I||).
    pub fn invertibility_residual(&self) -> (f64, f64) {
        let d = self.d();
        let eye = Array2::<f64>::eye(d);
        let fwd = (self.a.dot(&self.a_bar) - &eye).mapv(|v| v * v).sum().sqrt();
        let bwd = (self.a_bar.dot(&self.a) - &eye).mapv(|v| v * v).sum().sqrt();
        (fwd, bwd)
    }

    /// Applies A to every row of a batch.
    pub fn map_batch(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        features.dot(&self.a.t())
    }

    /// Applies A_bar (the learned inverse) to a single feature vector.
    pub fn unmap(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.a_bar.dot(&z)
    }
}

/// Column-stochastic label transformation B (K_T x K_R), either learned via
/// column softmax or frozen to an exact permutation of identity.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelMap {
    /// perm[j] is the target class of reference class j; requires K_T = K_R.
    FrozenPermutation(Vec<usize>),
    /// Column-softmax parameterization, K_T x K_R.
    Learned { logits: Array2<f64> },
}

impl LabelMap {
    pub fn permutation(perm: Vec<usize>) -> Result<Self> {
        let k = perm.len();
        let mut seen = vec![false; k];
        for &t in &perm {
            if t >= k || seen[t] {
                return Err(Error::InvalidData("not a permutation".into()));
            }
            seen[t] = true;
        }
        Ok(Self::FrozenPermutation(perm))
    }

    pub fn learned(logits: Array2<f64>) -> Self {
        Self::Learned { logits }
    }

    /// Uniformly random permutation map on k classes.
    pub fn random_permutation(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        Self::FrozenPermutation(perm)
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Self::FrozenPermutation(_))
    }

    pub fn k_t(&self) -> usize {
        match self {
            Self::FrozenPermutation(p) => p.len(),
            Self::Learned { logits } => logits.nrows(),
        }
    }

    pub fn k_r(&self) -> usize {
        match self {
            Self::FrozenPermutation(p) => p.len(),
            Self::Learned { logits } => logits.ncols(),
        }
    }

    /// The stochastic matrix B. Each column sums to 1; frozen permutations
    /// produce exact 0/1 entries.
    pub fn matrix(&self) -> Array2<f64> {
        match self {
            Self::FrozenPermutation(perm) => {
                let k = perm.len();
                let mut b = Array2::zeros((k, k));
                for (j, &i) in perm.iter().enumerate() {
                    b[[i, j]] = 1.0;
                }
                b
            }
            Self::Learned { logits } => {
                let (kt, kr) = logits.dim();
                let mut b = Array2::zeros((kt, kr));
                for j in 0..kr {
                    let col = softmax(&logits.column(j).to_owned());
                    b.column_mut(j).assign(&col);
                }
                b
            }
        }
    }

    /// Deterministic relabeling: reference class j maps to argmax_i B_ij
    /// (ties break to the lowest target index).
    pub fn argmax_map(&self) -> Vec<usize> {
        match self {
            Self::FrozenPermutation(perm) => perm.clone(),
            Self::Learned { logits } => (0..logits.ncols())
                .map(|j| argmax(logits.column(j).to_owned().as_slice().unwrap()))
                .collect(),
        }
    }

    pub fn logits(&self) -> Option<&Array2<f64>> {
        match self {
            Self::FrozenPermutation(_) => None,
            Self::Learned { logits } => Some(logits),
        }
    }

    pub fn logits_mut(&mut self) -> Option<&mut Array2<f64>> {
        match self {
            Self::FrozenPermutation(_) => None,
            Self::Learned { logits } => Some(logits),
        }
    }
}

/// Transformed reference prior D over the K_R reference classes, either
/// learned via softmax or frozen to an exact probability vector.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorVector {
    Frozen(Vec<f64>),
    Learned { logits: Array1<f64> },
}

impl PriorVector {
    pub fn frozen(prior: &ClassPrior) -> Self {
        Self::Frozen(prior.weights().to_vec())
    }

    /// Learned parameterization initialized so softmax(logits) = prior.
    pub fn learned_from(prior: &ClassPrior) -> Self {
        let logits = Array1::from_iter(prior.weights().iter().map(|&w| w.max(1e-300).ln()));
        Self::Learned { logits }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Self::Frozen(_))
    }

    pub fn k(&self) -> usize {
        match self {
            Self::Frozen(w) => w.len(),
            Self::Learned { logits } => logits.len(),
        }
    }

    /// The probability vector D.
    pub fn d_vector(&self) -> Vec<f64> {
        match self {
            Self::Frozen(w) => w.clone(),
            Self::Learned { logits } => softmax(logits).to_vec(),
        }
    }

    pub fn logits(&self) -> Option<&Array1<f64>> {
        match self {
            Self::Frozen(_) => None,
            Self::Learned { logits } => Some(logits),
        }
    }

    pub fn logits_mut(&mut self) -> Option<&mut Array1<f64>> {
        match self {
            Self::Frozen(_) => None,
            Self::Learned { logits } => Some(logits),
        }
    }
}

/// The full transformation set (A, A_bar, B, D).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    pub feature: FeatureMap,
    pub label: LabelMap,
    pub prior: PriorVector,
}

impl TransformSet {
    pub fn d(&self) -> usize {
        self.feature.d()
    }

    pub fn k_r(&self) -> usize {
        self.label.k_r()
    }

    pub fn k_t(&self) -> usize {
        self.label.k_t()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prior.k() != self.k_r() {
            return Err(Error::InvalidData(format!(
                "prior over {} classes but label map expects K_R = {}",
                self.prior.k(),
                self.k_r()
            )));
        }
        Ok(())
    }

    pub fn transformed_classifier<'a>(
        &'a self,
        h_r: &'a SoftmaxClassifier,
    ) -> Result<TransformedClassifier<'a>> {
        TransformedClassifier::new(h_r, self)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TransformFile::from(self);
        let out = File::create(path.as_ref())?;
        serde_json::to_writer_pretty(BufWriter::new(out), &file)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref()).map_err(|e| {
            Error::InvalidData(format!("cannot open {}: {e}", path.as_ref().display()))
        })?;
        let parsed: TransformFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("bad transform file: {e}")))?;
        parsed.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct TransformFile {
    d: usize,
    k_r: usize,
    k_t: usize,
    a: String,
    a_bar: String,
    label_map: LabelMapFile,
    prior: PriorFile,
}

#[derive(Serialize, Deserialize)]
enum LabelMapFile {
    #[serde(rename = "frozen_permutation")]
    FrozenPermutation(Vec<usize>),
    #[serde(rename = "logits")]
    Logits(String),
}

#[derive(Serialize, Deserialize)]
enum PriorFile {
    #[serde(rename = "frozen")]
    Frozen(Vec<f64>),
    #[serde(rename = "logits")]
    Logits(String),
}

impl From<&TransformSet> for TransformFile {
    fn from(t: &TransformSet) -> Self {
        Self {
            d: t.d(),
            k_r: t.k_r(),
            k_t: t.k_t(),
            a: encode_f32_base64(t.feature.a.iter().cloned()),
            a_bar: encode_f32_base64(t.feature.a_bar.iter().cloned()),
            label_map: match &t.label {
                LabelMap::FrozenPermutation(p) => LabelMapFile::FrozenPermutation(p.clone()),
                LabelMap::Learned { logits } => {
                    LabelMapFile::Logits(encode_f32_base64(logits.iter().cloned()))
                }
            },
            prior: match &t.prior {
                PriorVector::Frozen(w) => PriorFile::Frozen(w.clone()),
                PriorVector::Learned { logits } => {
                    PriorFile::Logits(encode_f32_base64(logits.iter().cloned()))
                }
            },
        }
    }
}

impl TryFrom<TransformFile> for TransformSet {
    type Error = Error;

    fn try_from(f: TransformFile) -> Result<Self> {
        let a = Array2::from_shape_vec((f.d, f.d), decode_f32_base64(&f.a, f.d * f.d)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let a_bar = Array2::from_shape_vec((f.d, f.d), decode_f32_base64(&f.a_bar, f.d * f.d)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let label = match f.label_map {
            LabelMapFile::FrozenPermutation(p) => LabelMap::permutation(p)?,
            LabelMapFile::Logits(text) => LabelMap::learned(
                Array2::from_shape_vec((f.k_t, f.k_r), decode_f32_base64(&text, f.k_t * f.k_r)?)
                    .map_err(|e| Error::Format(e.to_string()))?,
            ),
        };
        let prior = match f.prior {
            PriorFile::Frozen(w) => PriorVector::Frozen(w),
            PriorFile::Logits(text) => PriorVector::Learned {
                logits: Array1::from_vec(decode_f32_base64(&text, f.k_r)?),
            },
        };
        let out = Self {
            feature: FeatureMap::new(a, a_bar)?,
            label,
            prior,
        };
        out.validate()?;
        Ok(out)
    }
}

/// H(Y_R'' | Y_R') = -sum_j P(j) sum_i B_ij ln B_ij, with 0 ln 0 = 0.
/// Zero exactly when every column of B is a basis vector; at most ln K_T.
pub fn conditional_entropy(label_map: &LabelMap, prior: &[f64]) -> Result<f64> {
    if prior.len() != label_map.k_r() {
        return Err(Error::InvalidData(format!(
            "prior length {} != K_R {}",
            prior.len(),
            label_map.k_r()
        )));
    }
    Ok(conditional_entropy_matrix(label_map.matrix().view(), prior))
}

pub(crate) fn conditional_entropy_matrix(b: ArrayView2<'_, f64>, prior: &[f64]) -> f64 {
    let mut h = 0.0;
    for (j, &pj) in prior.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        let mut col_entropy = 0.0;
        for &bij in b.column(j) {
            if bij > 0.0 {
                col_entropy -= bij * bij.ln();
            }
        }
        h += pj * col_entropy;
    }
    h
}

/// Maps a reference batch into the target domain: features through A, label
/// j to argmax_i B_ij (ties to the lowest index).
pub fn push_reference(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    feature_map: &FeatureMap,
    label_map: &LabelMap,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let k_r = label_map.k_r();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k_r) {
        return Err(Error::InvalidData(format!(
            "reference label {bad} out of range for K_R={k_r}"
        )));
    }
    if features.ncols() != feature_map.d() {
        return Err(Error::InvalidData("feature dimension mismatch".into()));
    }
    let sigma = label_map.argmax_map();
    let pushed = feature_map.map_batch(features);
    let new_labels = labels.iter().map(|&y| sigma[y]).collect();
    Ok((pushed, new_labels))
}

/// The classifier induced on the target domain: z -> B h_R(A_bar z).
/// Outputs probability vectors on the K_T simplex.
pub struct TransformedClassifier<'a> {
    h_r: &'a SoftmaxClassifier,
    a_bar: &'a Array2<f64>,
    b: Array2<f64>,
}

impl<'a> TransformedClassifier<'a> {
    pub fn new(h_r: &'a SoftmaxClassifier, transforms: &'a TransformSet) -> Result<Self> {
        transforms.validate()?;
        if h_r.k() != transforms.k_r() {
            return Err(Error::InvalidData(format!(
                "probe has {} classes but label map expects K_R = {}",
                h_r.k(),
                transforms.k_r()
            )));
        }
        if h_r.d() != transforms.d() {
            return Err(Error::InvalidData("probe/transform dimension mismatch".into()));
        }
        Ok(Self {
            h_r,
            a_bar: &transforms.feature.a_bar,
            b: transforms.label.matrix(),
        })
    }

    pub fn k_t(&self) -> usize {
        self.b.nrows()
    }

    pub fn probs(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let u = self.a_bar.dot(&z);
        let p = self.h_r.predict_probs(u.view());
        self.b.dot(&p)
    }

    pub fn loss(&self, z: ArrayView1<'_, f64>, y: usize) -> Result<f64> {
        if y >= self.k_t() {
            return Err(Error::InvalidData(format!(
                "label {y} out of range for K_T={}",
                self.k_t()
            )));
        }
        Ok(-self.probs(z)[y].ln())
    }

    /// Most probable target label; ties break to the lowest index.
    pub fn pseudo_label(&self, z: ArrayView1<'_, f64>) -> usize {
        argmax(self.probs(z).as_slice().unwrap())
    }

    /// `||grad_z (-ln (B softmax(W A_bar z + b))_y)||_2`, analytic.
    pub fn grad_norm(&self, z: ArrayView1<'_, f64>, y: usize) -> Result<f64> {
        if y >= self.k_t() {
            return Err(Error::InvalidData(format!(
                "label {y} out of range for K_T={}",
                self.k_t()
            )));
        }
        let u = self.a_bar.dot(&z);
        let p = self.h_r.predict_probs(u.view());
        let beta = self.b.row(y);
        let q_y: f64 = p.dot(&beta);
        // (diag(p) - p p^T) beta, then back through W and A_bar
        let pb: f64 = p.dot(&beta);
        let v = Array1::from_shape_fn(p.len(), |i| p[i] * (beta[i] - pb));
        let wv = self.h_r.weights().t().dot(&v);
        let g = self.a_bar.t().dot(&wv).mapv(|x| -x / q_y);
        Ok(g.dot(&g).sqrt())
    }

    /// Mean loss over a pushed batch.
    pub fn average_loss(&self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total += self.loss(features.row(i), y)?;
        }
        Ok(total / labels.len() as f64)
    }
}

/// Post-hoc verification that the loss/transformed-classifier composition
/// stays within the Lipschitz budget at the samples.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzReport {
    pub max_grad_norm: f64,
    pub tau: f64,
}

impl LipschitzReport {
    pub fn within(&self, slack: f64) -> bool {
        self.max_grad_norm <= self.tau * (1.0 + slack)
    }
}

/// Max over dataset samples and all target labels of the transformed
/// classifier's input gradient norm.
pub fn lipschitz_check(
    tc: &TransformedClassifier<'_>,
    ds: &EmbeddingDataset,
    tau: f64,
) -> Result<LipschitzReport> {
    let mut max_norm = 0.0f64;
    for i in 0..ds.n() {
        for y in 0..tc.k_t() {
            max_norm = max_norm.max(tc.grad_norm(ds.feature_row(i), y)?);
        }
    }
    Ok(LipschitzReport {
        max_grad_norm: max_norm,
        tau,
    })
}

/// The three bound terms, their sum, and (optionally) the measured target
/// loss and the bound gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub reweighted_reference_loss: f64,
    pub label_mismatch: f64,
    /// tau * W_d between the transformed reference and the target.
    pub distribution_mismatch: f64,
    /// Sum of the three terms; lower means more related.
    pub task_relatedness: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_transferability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    /// tau times the surrogate (nu-cost) distance, when one was computed;
    /// informational, since the certified term uses the masked distance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution_mismatch_surrogate: Option<f64>,
}

impl BoundReport {
    pub fn new(term1: f64, term2: f64, term3: f64) -> Result<Self> {
        for (name, v) in [
            ("reweighted reference loss", term1),
            ("label mismatch", term2),
            ("distribution mismatch", term3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numeric(format!("{name} term is {v}")));
            }
        }
        Ok(Self {
            reweighted_reference_loss: term1,
            label_mismatch: term2,
            distribution_mismatch: term3,
            task_relatedness: term1 + term2 + term3,
            measured_transferability: None,
            gap: None,
            distribution_mismatch_surrogate: None,
        })
    }

    pub fn with_transferability(mut self, measured: f64) -> Self {
        self.measured_transferability = Some(measured);
        self.gap = Some(self.task_relatedness - measured);
        self
    }
}

/// Options for [`evaluate_bound`].
#[derive(Debug, Clone, Copy)]
pub struct BoundOptions {
    pub tau: f64,
    pub ot_mode: OtMode,
    pub nu: f64,
    /// Also evaluate the full-data surrogate distance (one joint OT solve).
    pub with_surrogate: bool,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            tau: 0.02,
            ot_mode: OtMode::ExactInfinity,
            nu: 1e8,
            with_surrogate: false,
        }
    }
}

/// Builds the transformed-reference point cloud: features through A, labels
/// through argmax B, sample weights D(y)/count(y).
fn pushed_reference_cloud(
    ref_ds: &EmbeddingDataset,
    transforms: &TransformSet,
) -> Result<(Array2<f64>, Vec<usize>, Vec<f64>)> {
    let (pushed, labels) =
        push_reference(ref_ds.features(), ref_ds.labels(), &transforms.feature, &transforms.label)?;
    let d_vec = transforms.prior.d_vector();
    let mut counts = vec![0usize; ref_ds.k()];
    for &y in ref_ds.labels() {
        counts[y] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if d_vec[c] > 1e-12 && count == 0 {
            return Err(Error::Infeasible(format!(
                "transformed prior puts mass on empty reference class {c}"
            )));
        }
    }
    let weights: Vec<f64> = ref_ds
        .labels()
        .iter()
        .map(|&y| {
            if counts[y] == 0 {
                0.0
            } else {
                d_vec[y] / counts[y] as f64
            }
        })
        .collect();
    Ok((pushed, labels, weights))
}

/// Evaluates the Theorem-3 style report for a transformation set.
///
/// In exact mode the transformed reference prior must match the target prior
/// within [`PRIOR_MATCH_TOL`]; the per-class distances are then evaluated
/// under the common (projected) target prior. Passing the target probe adds
/// the measured transferability and the bound gap.
pub fn evaluate_bound(
    ref_ds: &EmbeddingDataset,
    tgt_ds: &EmbeddingDataset,
    h_r: &SoftmaxClassifier,
    transforms: &TransformSet,
    opts: &BoundOptions,
    h_t: Option<&SoftmaxClassifier>,
) -> Result<BoundReport> {
    transforms.validate()?;
    let k_r = ref_ds.k();
    let k_t = tgt_ds.k();
    if k_r < k_t {
        return Err(Error::InvalidData(format!(
            "need K_R >= K_T, got {k_r} < {k_t}"
        )));
    }
    if transforms.k_r() != k_r || transforms.k_t() != k_t {
        return Err(Error::InvalidData(
            "transform class counts do not match the datasets".into(),
        ));
    }
    if !(opts.tau >= 0.0) {
        return Err(Error::InvalidConfig("tau must be >= 0".into()));
    }

    let d_vec = transforms.prior.d_vector();
    let d_prior = ClassPrior::new(d_vec.clone())
        .map_err(|e| Error::Numeric(format!("transformed prior invalid: {e}")))?;
    let term1 = reweighted_loss(h_r, ref_ds, &d_prior)?;
    let term2 = conditional_entropy(&transforms.label, &d_vec)?;

    let (pushed, pushed_labels, weights) = pushed_reference_cloud(ref_ds, transforms)?;
    let tgt_prior = empirical_prior(tgt_ds);

    let w_d = match opts.ot_mode {
        OtMode::ExactInfinity => {
            // check, then project the pushed prior onto the target prior
            let mut pushed_prior = vec![0.0; k_t];
            for (&y, &w) in pushed_labels.iter().zip(&weights) {
                pushed_prior[y] += w;
            }
            let mismatch = pushed_prior
                .iter()
                .zip(tgt_prior.weights())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if mismatch > PRIOR_MATCH_TOL {
                return Err(Error::Infeasible(format!(
                    "transformed prior differs from target prior by {mismatch:.4} \
                     (tolerance {PRIOR_MATCH_TOL}); exact OT distance is infinite"
                )));
            }
            for y in 0..k_t {
                if tgt_prior.weight(y) > 1e-12 && pushed_prior[y] <= 1e-12 {
                    return Err(Error::Infeasible(format!(
                        "no transformed reference mass lands on target class {y}"
                    )));
                }
            }
            let projected: Vec<f64> = pushed_labels
                .iter()
                .zip(&weights)
                .map(|(&y, &w)| {
                    if pushed_prior[y] <= 0.0 {
                        0.0
                    } else {
                        w * tgt_prior.weight(y) / pushed_prior[y]
                    }
                })
                .collect();
            let p = WeightedPoints::new(pushed.view(), &pushed_labels, projected, k_t)?;
            let q = WeightedPoints::uniform(tgt_ds);
            match joint_wasserstein(
                &p,
                &q,
                &CostParams {
                    nu: opts.nu,
                    mode: OtMode::ExactInfinity,
                },
            )? {
                JointDistance::Finite(v) => v,
                JointDistance::Infinite => {
                    return Err(Error::Infeasible(
                        "exact OT distance infinite after projection".into(),
                    ))
                }
            }
        }
        OtMode::Surrogate => {
            let p = WeightedPoints::new(pushed.view(), &pushed_labels, weights.clone(), k_t)?;
            let q = WeightedPoints::uniform(tgt_ds);
            joint_wasserstein(
                &p,
                &q,
                &CostParams {
                    nu: opts.nu,
                    mode: OtMode::Surrogate,
                },
            )?
            .finite()
            .expect("surrogate distance is always finite")
        }
    };

    let mut report = BoundReport::new(term1, term2, opts.tau * w_d)?;

    if opts.with_surrogate && opts.ot_mode != OtMode::Surrogate {
        let p = WeightedPoints::new(pushed.view(), &pushed_labels, weights, k_t)?;
        let q = WeightedPoints::uniform(tgt_ds);
        let sur = joint_wasserstein(
            &p,
            &q,
            &CostParams {
                nu: opts.nu,
                mode: OtMode::Surrogate,
            },
        )?
        .finite()
        .expect("surrogate distance is always finite");
        report.distribution_mismatch_surrogate = Some(opts.tau * sur);
    }

    if let Some(h_t) = h_t {
        let measured = average_loss(h_t, tgt_ds)?;
        report = report.with_transferability(measured);
    }
    Ok(report)
}
