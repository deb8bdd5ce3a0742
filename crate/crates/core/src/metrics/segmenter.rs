use std::path::Path as FsPath;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fid::{images_to_tensor, Embedder};
use super::segmentation::{ConfusionMatrix, Segment};
use crate::checkpoint::Archive;
use crate::data::{one_hot_encode, LabelMap, RgbImage, Scene};
use crate::error::{Error, Result};
use crate::nn::{positive_part, upsample2x, Adam, Conv2d, ConvSpec, ParamStore, Path};
use crate::training::DataSource;

pub const ARCHIVE_KIND: &str = "segmenter";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_width() -> usize {
    16
}

impl SegmenterConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, width: default_width() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegmenterTraining {
    fn default() -> Self {
        Self { steps: 400, batch_size: 8, lr: 2e-3, seed: 0 }
    }
}

/// Small U-shaped labeller: two stride-2 encoder stages, a bottleneck, and a
/// decoder with skip connections back to full resolution.
pub struct Segmenter {
    config: SegmenterConfig,
    store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    mid: Conv2d,
    dec2: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 || config.width == 0 {
            return Err(Error::Config(format!("degenerate segmenter {config:?}")));
        }
        let (w, c) = (config.width, config.num_classes);
        let mut store = ParamStore::new(DType::F32, seed);
        let root = Path::new("seg");
        let down = |i, o| ConvSpec { stride: 2, ..ConvSpec::same(i, o, 3, 1) };
        let enc1 = Conv2d::new(&mut store, &root.join("enc1"), ConvSpec::same(3, w, 3, 1))?;
        let enc2 = Conv2d::new(&mut store, &root.join("enc2"), down(w, 2 * w))?;
        let enc3 = Conv2d::new(&mut store, &root.join("enc3"), down(2 * w, 2 * w))?;
        let mid = Conv2d::new(&mut store, &root.join("mid"), ConvSpec::same(2 * w, 2 * w, 3, 1))?;
        let dec2 = Conv2d::new(&mut store, &root.join("dec2"), ConvSpec::same(4 * w, 2 * w, 3, 1))?;
        let dec1 = Conv2d::new(&mut store, &root.join("dec1"), ConvSpec::same(3 * w, w, 3, 1))?;
        let head = Conv2d::new(&mut store, &root.join("head"), ConvSpec::same(w, c, 1, 1))?;
        Ok(Self { config, store, enc1, enc2, enc3, mid, dec2, dec1, head })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn check_input(images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "segmenter needs RGB input with sides divisible by 4, got {:?}",
                images.dims()
            )));
        }
        Ok(())
    }

    fn encode(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Self::check_input(images)?;
        let x = images.to_dtype(DType::F32)?;
        let e1 = positive_part(&self.enc1.forward(&x)?)?;
        let e2 = positive_part(&self.enc2.forward(&e1)?)?;
        let e3 = positive_part(&self.enc3.forward(&e2)?)?;
        let m = positive_part(&self.mid.forward(&e3)?)?;
        Ok((e1, e2, m))
    }

    /// Per-pixel class scores `(B, C, H, W)`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (e1, e2, m) = self.encode(images)?;
        let d2 = positive_part(&self.dec2.forward(&Tensor::cat(&[&upsample2x(&m)?, &e2], 1)?)?)?;
        let d1 = positive_part(&self.dec1.forward(&Tensor::cat(&[&upsample2x(&d2)?, &e1], 1)?)?)?;
        self.head.forward(&d1)
    }

    /// Mean per-pixel cross-entropy against one-hot targets.
    pub fn loss(&self, images: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let top = logits.max_keepdim(1)?.detach();
        let lse = (logits.broadcast_sub(&top)?.exp()?.sum_keepdim(1)?.log()? + top)?;
        let picked = (logits * one_hot)?.sum_keepdim(1)?;
        Ok((lse - picked)?.mean_all()?)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<LabelMap>> {
        let (b, _, h, w) = images.dims4()?;
        let classes = self.logits(images)?.argmax(1)?.to_dtype(DType::U32)?;
        let flat: Vec<u32> = classes.flatten_all()?.to_vec1()?;
        (0..b)
            .map(|i| {
                let px = flat[i * h * w..(i + 1) * h * w].iter().map(|&v| v as u8).collect();
                LabelMap::new(w, h, self.config.num_classes, px)
            })
            .collect()
    }

    /// Confusion matrix of predictions against the scenes' own labels.
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<ConfusionMatrix> {
        let mut m = ConfusionMatrix::new(self.config.num_classes);
        for chunk in scenes.chunks(16) {
            let images: Vec<RgbImage> = chunk.iter().map(|s| s.image.clone()).collect();
            for (pred, scene) in self.segment(&images)?.iter().zip(chunk) {
                m.add(pred, &scene.labels)?;
            }
        }
        Ok(m)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(ARCHIVE_KIND, serde_json::json!({ "config": self.config }));
        for (name, t) in self.store.snapshot() {
            a.insert(name, &t);
        }
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != ARCHIVE_KIND {
            return Err(Error::ConfigMismatch(format!("archive holds {:?}, not a segmenter", archive.kind)));
        }
        let config: SegmenterConfig = serde_json::from_value(archive.header["config"].clone())?;
        let s = Self::new(config, 0)?;
        s.store.load(&archive.arrays)?;
        Ok(s)
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

impl Segment for Segmenter {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn segment(&self, images: &[RgbImage]) -> Result<Vec<LabelMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(self.predict(&images_to_tensor(chunk, DType::F32)?)?);
        }
        Ok(out)
    }
}

/// Bottleneck activations, averaged over space.
impl Embedder for Segmenter {
    fn name(&self) -> &str {
        "segmenter"
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encode(images)?.2.mean((2, 3))?)
    }
}

fn label_tensor(scenes: &[Scene], num_classes: usize) -> Result<Tensor> {
    let (w, h) = (scenes[0].labels.width(), scenes[0].labels.height());
    let mut planes = Vec::with_capacity(scenes.len() * num_classes * w * h);
    for s in scenes {
        planes.extend_from_slice(one_hot_encode(&s.labels).planes());
    }
    Ok(Tensor::from_vec(planes, (scenes.len(), num_classes, h, w), &Device::Cpu)?)
}

/// Fits a fresh segmenter on scenes drawn from `source`. Returns the model
/// and the loss after every step.
pub fn train_segmenter(
    source: &DataSource,
    config: SegmenterConfig,
    training: &SegmenterTraining,
) -> Result<(Segmenter, Vec<f64>)> {
    if config.num_classes != source.num_classes() {
        return Err(Error::ConfigMismatch(format!(
            "segmenter over {} classes, data over {}",
            config.num_classes,
            source.num_classes()
        )));
    }
    if training.batch_size == 0 || !(training.lr > 0.0) {
        return Err(Error::Config("segmenter training needs a batch and a positive rate".into()));
    }
    let model = Segmenter::new(config, training.seed)?;
    let mut opt = Adam::new(model.store.params(), 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let scenes = (0..training.batch_size).map(|_| source.draw(&mut rng)).collect::<Result<Vec<_>>>()?;
        let images: Vec<RgbImage> = scenes.iter().map(|s| s.image.clone()).collect();
        let x = images_to_tensor(&images, DType::F32)?;
        let loss = model.loss(&x, &label_tensor(&scenes, config.num_classes)?)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "segmenter loss".into(), step: step as u64 });
        }
        losses.push(value);
        opt.step(&loss.backward()?, training.lr, None)?;
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneSpec;

    fn source() -> DataSource {
        DataSource::Synthetic(SceneSpec { object_size: (3, 6), ..SceneSpec::desk(16, 16) })
    }

    #[test]
    fn loss_is_cross_entropy() {
        let s = Segmenter::new(SegmenterConfig { num_classes: 3, width: 2 }, 1).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let labels: Vec<u8> = (0..64).map(|i| (i * 7 % 3) as u8).collect();
        let map = LabelMap::new(8, 8, 3, labels.clone()).unwrap();
        let y = Tensor::from_vec(one_hot_encode(&map).planes().to_vec(), (1, 3, 8, 8), &Device::Cpu).unwrap();
        let got = s.loss(&x, &y).unwrap().to_scalar::<f32>().unwrap() as f64;

        let logits: Vec<f32> = s.logits(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let z: Vec<f64> = (0..3).map(|c| logits[c * 64 + i] as f64).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - z[l as usize];
        }
        want /= 64.0;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn training_reduces_loss_and_round_trips() {
        let src = source();
        let cfg = SegmenterConfig { num_classes: src.num_classes(), width: 4 };
        let (model, losses) =
            train_segmenter(&src, cfg, &SegmenterTraining { steps: 30, batch_size: 4, ..Default::default() }).unwrap();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[losses.len() - 5..].iter().sum();
        assert!(tail < head, "{losses:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        model.save(&path).unwrap();
        let back = Segmenter::load(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images: Vec<RgbImage> = (0..3).map(|_| src.draw(&mut rng).unwrap().image).collect();
        assert_eq!(model.segment(&images).unwrap(), back.segment(&images).unwrap());
        let e = back.embed(&images_to_tensor(&images, DType::F32).unwrap()).unwrap();
        assert_eq!(e.dims(), &[3, 8]);
    }

    #[test]
    fn rejects_odd_sizes_and_wrong_archives() {
        let s = Segmenter::new(SegmenterConfig::new(3), 0).unwrap();
        assert!(s.logits(&Tensor::zeros((1, 3, 6, 8), DType::F32, &Device::Cpu).unwrap()).is_err());
        let other = Archive::new("train_state", serde_json::json!({}));
        assert!(matches!(Segmenter::from_archive(&other), Err(Error::ConfigMismatch(_))));
    }
}
