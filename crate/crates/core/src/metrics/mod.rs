//! Scoring of edited images: masked SSIM, Fréchet distance between embedded
//! image sets, and segmentation consistency.

mod fid;
mod segmentation;
mod segmenter;
mod ssim;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fid::{
    embed_images, embed_rows, frechet_distance, images_to_tensor, tensor_to_images, Embedder, GaussianStats,
    RandomEmbedder,
};
pub use segmentation::{confusion_matrix, segmentation_consistency, ConfusionMatrix, Segment, SegmentationScores};
pub use segmenter::{train_segmenter, Segmenter, SegmenterConfig, SegmenterTraining};
pub use ssim::{masked_ssim, SsimParams, SsimRegion};

use crate::data::{EditBatch, EditSample, FreeformParams, RemovalParams, RgbImage, Scene, SemanticsScope};
use crate::error::{Error, Result};
use crate::generator::{composite_image, Generator};
use crate::training::{draw_edit_sample, load_generator, MaskKind, SamplingParams};

/// Produces a full generated image for every sample of a batch.
pub trait Inpainter {
    fn dtype(&self) -> DType;
    fn inpaint(&self, batch: &EditBatch) -> Result<Tensor>;
}

impl Inpainter for Generator {
    fn dtype(&self) -> DType {
        self.store().dtype()
    }

    fn inpaint(&self, batch: &EditBatch) -> Result<Tensor> {
        self.forward_batch(batch)
    }
}

/// Returns the real image: after compositing, a perfect edit.
pub struct IdentityInpainter;

impl Inpainter for IdentityInpainter {
    fn dtype(&self) -> DType {
        DType::F32
    }

    fn inpaint(&self, batch: &EditBatch) -> Result<Tensor> {
        Ok(batch.real.clone())
    }
}

/// Builds the embedder registered under `name`. `"segmenter"` reuses the
/// given segmenter's encoder.
pub fn embedder_by_name<'a>(name: &str, seed: u64, segmenter: Option<&'a Segmenter>) -> Result<Box<dyn Embedder + 'a>> {
    match name {
        "random" => Ok(Box::new(RandomEmbedder::new(seed)?)),
        "segmenter" => match segmenter {
            Some(s) => Ok(Box::new(SegmenterEmbedder(s))),
            None => Err(Error::Config("the segmenter embedder needs a trained segmenter".into())),
        },
        other => Err(Error::Config(format!("unknown embedder {other:?}; expected random or segmenter"))),
    }
}

struct SegmenterEmbedder<'a>(&'a Segmenter);

impl Embedder for SegmenterEmbedder<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.0.embed(images)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// One sample per scene and kind.
    pub kinds: Vec<MaskKind>,
    pub seed: u64,
    pub batch_size: usize,
    pub ssim: SsimParams,
    pub embedder: String,
    pub embedder_seed: u64,
    pub freeform: FreeformParams,
    pub removal: RemovalParams,
    pub bbox_margin: usize,
    pub semantics_scope: SemanticsScope,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kinds: MaskKind::ALL.to_vec(),
            seed: 2024,
            batch_size: 8,
            ssim: SsimParams::default(),
            embedder: "random".into(),
            embedder_seed: 0,
            freeform: FreeformParams::default(),
            removal: RemovalParams::default(),
            bbox_margin: 0,
            semantics_scope: SemanticsScope::Full,
        }
    }
}

impl EvalConfig {
    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        if cfg.kinds.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Config("evaluation needs a mask kind and a nonzero batch size".into()));
        }
        Ok(cfg)
    }

    fn sampling(&self) -> SamplingParams {
        SamplingParams {
            freeform: self.freeform.clone(),
            removal: self.removal.clone(),
            bbox_margin: self.bbox_margin,
            scope: self.semantics_scope,
        }
    }

    /// The evaluation edits: one per scene and kind, each from its own
    /// random stream so the set does not depend on batching.
    pub fn samples(&self, scenes: &[Scene], background: &[u8]) -> Result<Vec<(MaskKind, EditSample)>> {
        let params = self.sampling();
        let mut out = Vec::with_capacity(scenes.len() * self.kinds.len());
        for (i, scene) in scenes.iter().enumerate() {
            for (k, &kind) in self.kinds.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream((i * self.kinds.len() + k) as u64);
                out.push((kind, draw_edit_sample(scene, kind, &params, background, &mut rng)?));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssim_masked: f64,
    pub ssim_by_kind: BTreeMap<String, f64>,
    pub fid: f64,
    pub embedder: String,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub count: usize,
}

impl MetricsReport {
    /// Columns in the order SSIM, accu, mIoU, FID.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:>8} {:>8} {:>8} {:>10}\n{:>8.4} {:>8} {:>8} {:>10.4}\n",
            "SSIM",
            "accu",
            "mIoU",
            "FID",
            self.ssim_masked,
            opt(self.pixel_accuracy),
            opt(self.miou),
            self.fid
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Edits every evaluation sample with `model`, composites, and scores the
/// composites against the real images.
pub fn evaluate_suite(
    model: &dyn Inpainter,
    scenes: &[Scene],
    background: &[u8],
    cfg: &EvalConfig,
    segmenter: Option<&Segmenter>,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluation needs at least one scene".into()));
    }
    if cfg.kinds.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("evaluation needs a mask kind and a nonzero batch size".into()));
    }
    let embedder = embedder_by_name(&cfg.embedder, cfg.embedder_seed, segmenter)?;
    let samples = cfg.samples(scenes, background)?;

    let mut reals: Vec<RgbImage> = Vec::with_capacity(samples.len());
    let mut edited: Vec<RgbImage> = Vec::with_capacity(samples.len());
    let mut by_kind: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut ssim_total = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let items: Vec<EditSample> = chunk.iter().map(|(_, s)| s.clone()).collect();
        let batch = EditBatch::from_samples(&items, model.dtype())?;
        let generated = tensor_to_images(&model.inpaint(&batch)?)?;
        for ((kind, s), g) in chunk.iter().zip(&generated) {
            let out = composite_image(g, &s.image_real, &s.mask)?;
            let v = masked_ssim(&s.image_real, &out, &s.mask, &cfg.ssim)?;
            ssim_total += v;
            let e = by_kind.entry(kind.as_str().to_string()).or_default();
            e.0 += v;
            e.1 += 1;
            reals.push(s.image_real.clone());
            edited.push(out);
        }
    }

    let fid = frechet_distance(&embed_images(&reals, embedder.as_ref())?, &embed_images(&edited, embedder.as_ref())?)?;
    let seg = match segmenter {
        Some(s) => {
            let refs: Vec<_> = samples.iter().map(|(_, x)| x.target_labels.clone()).collect();
            Some(segmentation_consistency(&edited, &refs, s)?)
        }
        None => None,
    };
    Ok(MetricsReport {
        ssim_masked: ssim_total / samples.len() as f64,
        ssim_by_kind: by_kind.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect(),
        fid,
        embedder: embedder.name().to_string(),
        miou: seg.as_ref().map(|s| s.miou),
        pixel_accuracy: seg.as_ref().map(|s| s.pixel_accuracy),
        per_class_iou: seg.map(|s| s.per_class_iou),
        count: samples.len(),
    })
}

/// [`evaluate_suite`] for the generator stored in a checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    scenes: &[Scene],
    background: &[u8],
    cfg: &EvalConfig,
    segmenter: Option<&Segmenter>,
) -> Result<MetricsReport> {
    let g = load_generator(checkpoint)?;
    evaluate_suite(&g, scenes, background, cfg, segmenter)
}
