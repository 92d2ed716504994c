//! Fréchet distance between Gaussian fits of image features, and mean
//! image/text cosine similarity.

use std::collections::BTreeMap;
use std::path::Path;

use galip_autograd::{no_grad, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::backbone::{to_backbone_space, Backbone};
use crate::error::{shape_err, Error, Result};
use crate::objectives::mean_cosine;

/// Maps `[N, 3, S, S]` images in `[-1, 1]` to `[N, D]` features.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn extract(&self, images: &Tensor) -> Result<Tensor>;
}

/// The backbone's image embedding, evaluated in chunks.
pub struct ClipImageFeatures<'a> {
    pub backbone: &'a Backbone,
    pub chunk: usize,
}

impl<'a> ClipImageFeatures<'a> {
    pub fn new(backbone: &'a Backbone) -> Self {
        Self { backbone, chunk: 32 }
    }
}

impl FeatureExtractor for ClipImageFeatures<'_> {
    fn id(&self) -> String {
        format!("clip-image:{}", self.backbone.id())
    }

    fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = self.chunk.max(1).min(n - start);
            let x = Var::constant(images.narrow(0, start, len));
            parts.push(no_grad(|| self.backbone.encode_image(&to_backbone_space(&x)))?.value().clone());
            start += len;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Statistics of the rows of an `[N, D]` feature matrix.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, d) = match features.shape() {
            [n, d] => (*n, *d),
            other => return Err(shape_err("feature_stats", format!("features must be [N, D], got {other:?}"))),
        };
        if n < 2 {
            return Err(Error::InvalidArgument(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mean: DVector<f64> = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean: mean.iter().copied().collect(), cov: cov.transpose().as_slice().to_vec(), count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

pub fn feature_stats(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    FeatureStats::from_features(&extractor.extract(images)?)
}

/// Symmetric positive semi-definite square root, negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at zero.
///
/// The trace of `(Σa Σb)^½` is taken as the trace of the symmetric matrix
/// `(Σa^½ Σb Σa^½)^½`, which has the same eigenvalues.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err("frechet_distance", format!("feature dimensions {} and {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa);
    let cross = psd_sqrt(&(&ra * &sb * &ra));
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Mean cosine similarity between image embeddings of `images` (in
/// `[-1, 1]`) and the paired sentence embeddings, without graph recording.
pub fn clipsim_score(images: &Tensor, text_embeddings: &Tensor, backbone: &Backbone) -> Result<f64> {
    if images.shape()[0] != text_embeddings.shape()[0] {
        return Err(shape_err(
            "clipsim_score",
            format!("{} images for {} texts", images.shape()[0], text_embeddings.shape()[0]),
        ));
    }
    let feats = ClipImageFeatures::new(backbone).extract(images)?;
    no_grad(|| mean_cosine(&Var::constant(feats), &Var::constant(text_embeddings.clone()))).map(|v| v.item())
}

/// A named set of metric values with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint_step: u64,
    pub split: String,
    pub extractor: String,
}

impl MetricReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
