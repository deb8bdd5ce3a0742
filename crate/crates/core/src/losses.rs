//! Hinge adversarial losses, feature matching on RGB-stream features, and a
//! perceptual loss over a fixed feature function.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminator::PatchScoreSet;
use crate::error::{Error, Result};
use crate::nn::{positive_part, Conv2d, ConvSpec, ParamStore, Path};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_percept: f64,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_percept: 10.0, lambda_feat: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_percept >= 0.0 && self.lambda_feat >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How per-scale feature-matching terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleReduction {
    #[default]
    Mean,
    Sum,
}

/// `Σ_k [ mean(max(0, 1 − real_k)) + mean(max(0, 1 + fake_k)) ]`.
pub fn hinge_loss_d(real: &PatchScoreSet, fake: &PatchScoreSet) -> Result<Tensor> {
    if real.num_scales() != fake.num_scales() || real.num_scales() == 0 {
        return Err(Error::Shape(format!("score sets have {} and {} scales", real.num_scales(), fake.num_scales())));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.scores.iter().zip(&fake.scores) {
        let term =
            (positive_part(&r.affine(-1.0, 1.0)?)?.mean_all()? + positive_part(&f.affine(1.0, 1.0)?)?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// `−Σ_k mean(fake_k)`.
pub fn hinge_loss_g(fake: &PatchScoreSet) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for f in &fake.scores {
        let m = f.mean_all()?;
        total = Some(match total {
            Some(t) => (t + m)?,
            None => m,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("score set has no scales".into()))?;
    Ok(total.neg()?)
}

/// L1 distance between RGB-stream features, summed over layers and reduced
/// over scales. Real features are treated as constants.
pub fn feature_matching_loss(real: &PatchScoreSet, fake: &PatchScoreSet, reduction: ScaleReduction) -> Result<Tensor> {
    if real.rgb_features.len() != fake.rgb_features.len() || real.rgb_features.is_empty() {
        return Err(Error::Shape("feature sets cover different scales".into()));
    }
    let mut total: Option<Tensor> = None;
    for (rs, fs) in real.rgb_features.iter().zip(&fake.rgb_features) {
        if rs.len() != fs.len() {
            return Err(Error::Shape(format!("{} real layers vs {} fake layers", rs.len(), fs.len())));
        }
        for (r, f) in rs.iter().zip(fs) {
            let term = (f - r.detach())?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Shape("feature sets are empty".into()))?;
    Ok(match reduction {
        ScaleReduction::Mean => (total / real.rgb_features.len() as f64)?,
        ScaleReduction::Sum => total,
    })
}

/// A fixed multi-layer image feature function with per-layer weights.
pub trait Features {
    fn layers(&self, image: &Tensor) -> Result<Vec<Tensor>>;
    fn layer_weights(&self) -> &[f64];
}

/// Seed-deterministic stack of strided 3×3 convolutions with ReLU. Its
/// parameters are never handed to an optimizer.
pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    weights: Vec<f64>,
    seed: u64,
}

impl FeatureExtractor {
    pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];

    pub fn random(seed: u64, widths: &[usize], dtype: DType) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("feature extractor needs at least one layer".into()));
        }
        let mut store = ParamStore::new(dtype, seed);
        let mut ch = 3;
        let mut convs = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let spec = ConvSpec { stride: 2, ..ConvSpec::same(ch, w, 3, 1) };
            convs.push(Conv2d::new(&mut store, &Path::new("percept").join(i), spec)?);
            ch = w;
        }
        Ok(Self { weights: vec![1.0; widths.len()], convs, seed })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.convs.len() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("one nonnegative weight per layer is required".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Features for FeatureExtractor {
    fn layers(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = image.to_dtype(self.convs[0].weight().dtype())?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn layer_weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `Σ_l w_l · mean|fx_l(out) − fx_l(real)|`.
pub fn perceptual_loss(out: &Tensor, real: &Tensor, fx: &dyn Features) -> Result<Tensor> {
    if out.dims() != real.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", out.dims(), real.dims())));
    }
    let a = fx.layers(out)?;
    let b = fx.layers(&real.detach())?;
    let mut total = Tensor::zeros((), a[0].dtype(), a[0].device())?;
    for ((x, y), &w) in a.iter().zip(&b).zip(fx.layer_weights()) {
        if w != 0.0 {
            total = (total + ((x - y)?.abs()?.mean_all()? * w)?)?;
        }
    }
    Ok(total)
}

/// `λ_percept · L_perc + λ_feat · L_FM + L_adv`.
pub fn generator_total_loss(
    l_perc: &Tensor,
    l_fm: &Tensor,
    fake: &PatchScoreSet,
    weights: &LossWeights,
) -> Result<Tensor> {
    let adv = hinge_loss_g(fake)?;
    Ok(((l_perc * weights.lambda_percept)? + (l_fm * weights.lambda_feat)? + adv)?)
}
