use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, Features};

/// Mean and sample covariance of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Shape(format!("{d}-dim mean with a {:?} covariance", cov.shape())));
        }
        if count < 2 {
            return Err(Error::UndefinedMetric("covariance of fewer than two samples"));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "Gaussian statistics".into(), step: 0 });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-9 * scale {
            return Err(Error::Shape("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov, count })
    }

    /// Two-pass estimate with the unbiased `n − 1` normaliser. Rows are
    /// shifted by the first one, so identical rows give an exactly zero
    /// covariance.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::UndefinedMetric("covariance of fewer than two samples"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let n = rows.len();
        let origin = DVector::from_column_slice(&rows[0]);
        let shifted: Vec<DVector<f64>> = rows.iter().map(|r| DVector::from_column_slice(r) - &origin).collect();
        let centre = shifted.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &shifted {
            let c = r - &centre;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        Self::new(origin + centre, cov, n)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `V diag(√max(λ, 0))` for `Σ = V diag(λ) Vᵀ`, so that `R Rᵀ = Σ`.
fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    e.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// With `Σ = R Rᵀ` from the clipped eigendecomposition, the eigenvalues of
/// `Σa Σb` are the squared singular values of `Raᵀ Rb`, so the trace of the
/// root is a nuclear norm. Unlike a nested square root this stays accurate
/// for the rank-deficient covariances that small sample sets produce.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{}-dim vs {}-dim statistics", a.dim(), b.dim())));
    }
    let cross = psd_factor(&a.cov).transpose() * psd_factor(&b.cov);
    let tr_root: f64 = cross.singular_values().iter().sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(Error::NonFinite { what: "Frechet distance".into(), step: 0 });
    }
    Ok(d)
}

/// A deterministic map from `(B, 3, H, W)` images to `(B, d)` features.
pub trait Embedder {
    fn name(&self) -> &str;
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

/// Global-average-pooled activations of a fixed-seed random conv stack,
/// concatenated over layers.
pub struct RandomEmbedder {
    net: FeatureExtractor,
}

impl RandomEmbedder {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];

    pub fn new(seed: u64) -> Result<Self> {
        Self::with_widths(seed, &Self::WIDTHS)
    }

    pub fn with_widths(seed: u64, widths: &[usize]) -> Result<Self> {
        Ok(Self { net: FeatureExtractor::random(seed, widths, DType::F32)? })
    }
}

impl Embedder for RandomEmbedder {
    fn name(&self) -> &str {
        "random"
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let pooled =
            self.net.layers(images)?.iter().map(|l| l.mean((2, 3))).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("no images".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Shape("images differ in size".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("{c} channels, expected 3")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    (0..b).map(|i| RgbImage::new(w, h, flat[i * 3 * w * h..(i + 1) * 3 * w * h].to_vec())).collect()
}

const EMBED_CHUNK: usize = 16;

pub fn embed_rows(images: &[RgbImage], embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let f = embedder.embed(&images_to_tensor(chunk, DType::F32)?)?;
        rows.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(rows)
}

pub fn embed_images(images: &[RgbImage], embedder: &dyn Embedder) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(Error::UndefinedMetric("embedding statistics of fewer than two images"));
    }
    GaussianStats::from_rows(&embed_rows(images, embedder)?)
}
