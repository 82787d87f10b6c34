//! Seeded synthetic task generators for tests, benchmarks, and demos.
//!
//! These build embedding datasets with known structure: Gaussian mixtures
//! for reference tasks, and targets derived from a reference by rotation,
//! label permutation, prior tilt, and additive noise, so transfer instances
//! with controllable relatedness can be produced deterministically.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{ClassPrior, EmbeddingDataset};
use crate::Result;

/// Isotropic Gaussian mixture with class means on a sphere of radius
/// `separation`; labels cycle so classes stay near-balanced.
pub fn gaussian_mixture(
    name: &str,
    k: usize,
    d: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Array2::<f64>::zeros((k, d));
    for mut row in means.rows_mut() {
        let mut v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt().max(1e-12);
        v.mapv_inplace(|x| x / norm * separation);
        row.assign(&v);
    }
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        labels.push(y);
        for c in 0..d {
            features[[i, c]] = means[[y, c]] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    EmbeddingDataset::new(name, features, labels, k)
}

/// Haar-ish random rotation from composed Givens rotations.
pub fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::<f64>::eye(d);
    let sweeps = 2;
    for _ in 0..sweeps {
        for i in 0..d {
            for j in (i + 1)..d {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                for r in 0..d {
                    let (qi, qj) = (q[[r, i]], q[[r, j]]);
                    q[[r, i]] = c * qi - s * qj;
                    q[[r, j]] = s * qi + c * qj;
                }
            }
        }
    }
    q
}

/// Random invertible matrix with condition number at most `cond`, returned
/// with its exact inverse: A = R1 diag(s) R2, A^-1 = R2^T diag(1/s) R1^T.
pub fn random_invertible(d: usize, cond: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r1 = random_rotation(d, rng.gen());
    let r2 = random_rotation(d, rng.gen());
    let half = cond.sqrt();
    let singular: Vec<f64> = (0..d)
        .map(|_| {
            let t: f64 = rng.gen_range(-1.0..1.0);
            half.powf(t) // log-uniform in [1/sqrt(cond), sqrt(cond)]
        })
        .collect();
    let mut diag = Array2::<f64>::zeros((d, d));
    let mut diag_inv = Array2::<f64>::zeros((d, d));
    for (i, &s) in singular.iter().enumerate() {
        diag[[i, i]] = s;
        diag_inv[[i, i]] = 1.0 / s;
    }
    let a = r1.dot(&diag).dot(&r2);
    let a_inv = r2.t().dot(&diag_inv).dot(&r1.t());
    (a, a_inv)
}

/// Exact copy of the dataset with labels mapped through `perm`.
pub fn permuted_label_copy(
    ds: &EmbeddingDataset,
    perm: &[usize],
    name: &str,
) -> Result<EmbeddingDataset> {
    let labels = ds.labels().iter().map(|&y| perm[y]).collect();
    EmbeddingDataset::new(name, ds.features().to_owned(), labels, ds.k())
}

/// Recipe for deriving a target task from a reference task.
#[derive(Debug, Clone)]
pub struct TargetRecipe {
    /// Apply a random rotation to the features.
    pub rotate: bool,
    /// Relabel classes through a random permutation.
    pub permute_labels: bool,
    /// Mix the class prior with a random one: 0 keeps the reference prior.
    pub prior_tilt: f64,
    /// Additive isotropic Gaussian noise.
    pub noise_std: f64,
    /// Target sample count.
    pub n: usize,
    pub seed: u64,
}

/// The derived target plus the ground-truth pieces that built it.
#[derive(Debug, Clone)]
pub struct SynthTarget {
    pub dataset: EmbeddingDataset,
    pub permutation: Vec<usize>,
    pub rotation: Option<Array2<f64>>,
}

/// Builds a target task by resampling the reference under a tilted prior,
/// rotating, relabelling, and adding noise.
pub fn synth_target(ref_ds: &EmbeddingDataset, recipe: &TargetRecipe) -> Result<SynthTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let k = ref_ds.k();
    let d = ref_ds.d();

    let base_prior = crate::dataset::empirical_prior(ref_ds);
    let prior = if recipe.prior_tilt > 0.0 {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = base_prior
            .weights()
            .iter()
            .zip(&raw)
            .map(|(&p, &r)| (1.0 - recipe.prior_tilt) * p + recipe.prior_tilt * r / total)
            .collect();
        let total: f64 = weights.iter().sum();
        ClassPrior::new(weights.iter().map(|w| w / total).collect())?
    } else {
        base_prior
    };

    let resampled = crate::dataset::subsample_by_prior(
        ref_ds,
        &prior,
        recipe.n,
        rng.gen(),
        crate::dataset::Replacement::With,
    )?;

    let rotation = recipe.rotate.then(|| random_rotation(d, rng.gen()));
    let mut features = match &rotation {
        Some(q) => resampled.features().dot(&q.t()),
        None => resampled.features().to_owned(),
    };
    if recipe.noise_std > 0.0 {
        for v in features.iter_mut() {
            *v += recipe.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let permutation: Vec<usize> = if recipe.permute_labels {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..k).collect();
        p.shuffle(&mut rng);
        p
    } else {
        (0..k).collect()
    };
    let labels: Vec<usize> = resampled.labels().iter().map(|&y| permutation[y]).collect();

    Ok(SynthTarget {
        dataset: EmbeddingDataset::new(format!("{}[target]", ref_ds.name()), features, labels, k)?,
        permutation,
        rotation,
    })
}
