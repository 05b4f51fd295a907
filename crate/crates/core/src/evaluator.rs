//! Metrics: Fréchet distance between Gaussian fits of pooled semantic
//! features, attribute-alignment accuracy under a fixed judge, sample
//! diversity, steps-to-threshold and mode coverage.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::conditioner::{predict, Conditioner};
use crate::error::{Error, Result};
use crate::models::{Component, Models, Pipeline};
use crate::numerics::ParamStore;
use crate::sampler::{generate_grid, SamplerConfig};
use crate::world::{ImageGrid, LatentSeq, PromptSpec, World};

/// Negative eigenvalues smaller than this fraction of the spectral radius
/// are treated as round-off and clipped.
const PSD_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, symmetric.
    pub cov: Vec<f64>,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::shape("GaussianFit", &[d, d], &[cov.len()]));
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self {
            mean,
            cov: sym.transpose().as_slice().to_vec(),
        })
    }

    /// Sample mean and unbiased covariance of `features`.
    pub fn fit(features: &[Vec<f32>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::contract("a Gaussian fit needs at least two samples"));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::contract("features differ in length"));
        }
        let mut mean = vec![0.0f64; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0f64; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] as f64 - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (f[j] as f64 - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        Self::new(mean, cov)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Eigenvalues of a symmetric matrix with round-off negatives clipped to 0.
fn clipped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let radius = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = -PSD_SLACK * radius.max(1e-12);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < floor) {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalue {bad:e} (spectrum {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(m, what)?;
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½)`.
///
/// The trace of the cross term is computed as `tr((Σa^½ Σb Σa^½)^½)`, which
/// stays symmetric.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let ra = psd_sqrt(sa.clone(), "Σa")?;
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clipped_eigen(inner, "Σa^½ Σb Σa^½")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    clipped_eigen(sb.clone(), "Σb")?;
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// A frozen understanding model used to score generated images.
#[derive(Clone, Debug)]
pub struct Judge {
    conditioner: Conditioner,
    store: ParamStore,
}

impl Judge {
    /// Snapshot of the understanding path of `models`.
    pub fn from_models(models: &Models) -> Result<Self> {
        models.require(Component::Understanding)?;
        Ok(Self {
            conditioner: models.conditioner.clone(),
            store: models.store.clone(),
        })
    }

    pub fn classify(&self, lats: &[LatentSeq]) -> Result<Vec<[usize; 4]>> {
        let refs: Vec<&LatentSeq> = lats.iter().collect();
        let mut out = Vec::with_capacity(lats.len());
        for chunk in refs.chunks(256) {
            out.extend(self.conditioner.understand_batch(&self.store, chunk)?.iter().map(predict));
        }
        Ok(out)
    }

    /// Per-attribute accuracy on world samples `indices`.
    pub fn probe(&self, world: &World, indices: &[usize]) -> Result<[f64; 4]> {
        if indices.is_empty() {
            return Err(Error::contract("probe needs at least one sample"));
        }
        let lats: Vec<LatentSeq> = indices.iter().map(|&i| world.samples[i].semantic.clone()).collect();
        let preds = self.classify(&lats)?;
        let mut hits = [0usize; 4];
        for (p, &i) in preds.iter().zip(indices) {
            let labels = world.samples[i].spec.labels();
            (0..4).for_each(|k| hits[k] += (p[k] == labels[k]) as usize);
        }
        Ok(hits.map(|h| h as f64 / indices.len() as f64))
    }
}

/// Fraction of images whose re-encoded features the judge classifies
/// correctly on all four attributes.
pub fn alignment_accuracy(judge: &Judge, world: &World, samples: &[(ImageGrid, PromptSpec)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("alignment needs at least one sample"));
    }
    let lats: Vec<LatentSeq> = samples.iter().map(|(img, _)| world.encode_semantic(img)).collect();
    let preds = judge.classify(&lats)?;
    let hits = preds
        .iter()
        .zip(samples)
        .filter(|(p, (_, spec))| **p == spec.labels())
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Pooled semantic feature of an image, as seen by the metrics.
pub fn image_feature(world: &World, img: &ImageGrid) -> Vec<f32> {
    world.encode_semantic(img).pooled()
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise Euclidean distance between features of samples of one
/// prompt.
pub fn diversity(features: &[Vec<f32>]) -> Result<f64> {
    let k = features.len();
    if k < 2 {
        return Err(Error::contract(format!("diversity needs K >= 2 samples, got {k}")));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += dist(&features[i], &features[j]);
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Median filter over a window of up to 5 points centred on each point,
/// shrunk symmetrically at the ends. Leaves monotone curves unchanged.
pub fn smooth(values: &[f32]) -> Vec<f32> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let r = 2.min(i).min(n - 1 - i);
            let mut w: Vec<f32> = values[i - r..=i + r].to_vec();
            w.sort_by(f32::total_cmp);
            w[r]
        })
        .collect()
}

/// First recorded step whose smoothed loss is below `tau`.
pub fn steps_to_threshold(steps: &[usize], losses: &[f32], tau: f32) -> Result<Option<usize>> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", "must be positive"));
    }
    if steps.len() != losses.len() {
        return Err(Error::contract("curve steps and losses differ in length"));
    }
    Ok(smooth(losses).iter().position(|&l| l < tau).map(|i| steps[i]))
}

/// Occupancy of each centroid when every feature is assigned to its
/// nearest one. Ties go to the lower index.
pub fn mode_coverage(features: &[Vec<f32>], centroids: &[Vec<f32>]) -> Result<Vec<f64>> {
    if centroids.len() < 2 {
        return Err(Error::contract("mode coverage needs at least two centroids"));
    }
    if features.is_empty() {
        return Err(Error::contract("mode coverage needs at least one sample"));
    }
    let mut counts = vec![0usize; centroids.len()];
    for f in features {
        let best = centroids
            .iter()
            .map(|c| dist(f, c))
            .enumerate()
            .fold((0, f64::INFINITY), |b, (i, d)| if d < b.1 { (i, d) } else { b })
            .0;
        counts[best] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / features.len() as f64).collect())
}

/// Alignment, Fréchet distance and diversity of one pipeline on a prompt set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub alignment_acc: f64,
    pub frechet: f64,
    /// Mean over prompts of the per-prompt diversity.
    pub diversity: f64,
}

/// Generates every `(spec, seed)` pair and scores it. The Fréchet reference
/// is every world rendering of the same classes.
pub fn evaluate_pipeline(
    models: &Models,
    pipeline: Pipeline,
    judge: &Judge,
    world: &World,
    specs: &[PromptSpec],
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<PipelineMetrics> {
    if seeds.len() < 2 {
        return Err(Error::contract("evaluation needs at least two seeds per prompt"));
    }
    let generated = generate_grid(specs, seeds, pipeline, models, sampler)?;
    let k = seeds.len();
    let pairs: Vec<(ImageGrid, PromptSpec)> = generated
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image.clone(), specs[i / k]))
        .collect();
    let alignment_acc = alignment_accuracy(judge, world, &pairs)?;
    let feats: Vec<Vec<f32>> = generated.iter().map(|g| image_feature(world, &g.image)).collect();
    let mut div = 0.0;
    for chunk in feats.chunks(k) {
        div += diversity(chunk)?;
    }
    let real: Vec<Vec<f32>> = specs
        .iter()
        .flat_map(|s| world.style_features(s.class_index()))
        .collect();
    let frechet = frechet_distance(&GaussianFit::fit(&real)?, &GaussianFit::fit(&feats)?)?;
    Ok(PipelineMetrics {
        alignment_acc,
        frechet,
        diversity: div / specs.len() as f64,
    })
}

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub steps: Vec<usize>,
    pub loss: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub pipeline: Pipeline,
    pub strategy: String,
    pub seed: u64,
    pub frechet: f64,
    pub alignment_acc: f64,
    pub diversity: f64,
    pub steps_to_threshold: Option<usize>,
    pub curve: CurveData,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frechet", self.frechet),
            ("alignment_acc", self.alignment_acc),
            ("diversity", self.diversity),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("report field {name} is {v}")));
            }
        }
        if self.curve.loss.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("report curve holds a non-finite loss".into()));
        }
        Ok(())
    }
}
