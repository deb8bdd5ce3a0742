//! Two-stream multiscale patch discriminator and a single-stream PatchGAN
//! baseline.
//!
//! Per scale, an RGB stream sees `[image | mask]` and a semantics stream sees
//! the one-hot layout. Their final features are merged (by default
//! `rgb · (1 + Σ_c sem)`) and a common head produces a patch score map. The
//! second scale runs on 2× average-pooled inputs.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, Activation, Conv2d, ConvSpec, LayerRow, Norm, ParamStore, Path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// `rgb · (1 + Σ_c sem)`.
    SumPoolScale,
    /// Channel concatenation of the RGB and semantics features.
    Concat,
    /// Elementwise `rgb ⊙ sem`.
    Product,
}

impl MergeMode {
    pub const ALL: [MergeMode; 3] = [MergeMode::SumPoolScale, MergeMode::Concat, MergeMode::Product];

    pub fn as_str(&self) -> &'static str {
        match self {
            MergeMode::SumPoolScale => "sum_pool_scale",
            MergeMode::Concat => "concat",
            MergeMode::Product => "product",
        }
    }
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown merge mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Separate RGB and semantics streams.
    Sesame,
    /// One stream over `[image | mask | semantics]`.
    PatchGan,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Sesame => "sesame",
            Architecture::PatchGan => "patchgan",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sesame" => Ok(Architecture::Sesame),
            "patchgan" => Ok(Architecture::PatchGan),
            _ => Err(Error::Config(format!("unknown discriminator {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub architecture: Architecture,
    pub base_width: usize,
    pub leaky_slope: f64,
    pub head_kernel: usize,
    pub scales: usize,
    pub merge: MergeMode,
    /// Feed the mask to the RGB stream.
    pub mask_to_rgb: bool,
    /// Also feed the mask to the semantics stream.
    pub mask_to_semantics: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            architecture: Architecture::Sesame,
            base_width: 64,
            leaky_slope: 0.02,
            head_kernel: 4,
            scales: 2,
            merge: MergeMode::SumPoolScale,
            mask_to_rgb: true,
            mask_to_semantics: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator widths and class count must be positive".into()));
        }
        if self.scales == 0 {
            return Err(Error::Config("at least one discriminator scale is required".into()));
        }
        if !matches!(self.head_kernel, 3 | 4) {
            return Err(Error::Config(format!("head kernel must be 3 or 4, got {}", self.head_kernel)));
        }
        Ok(())
    }

    /// Rows of one stream, identical for both streams.
    pub fn stream_rows(&self) -> Vec<LayerRow> {
        let w = self.base_width;
        let act = Activation::LeakyRelu(self.leaky_slope);
        vec![
            LayerRow::conv(w, 4, 2, Norm::None, act),
            LayerRow::conv(2 * w, 4, 2, Norm::SpectralInstance, act),
            LayerRow::conv(4 * w, 4, 2, Norm::SpectralInstance, act),
            LayerRow::conv(8 * w, 4, 1, Norm::SpectralInstance, act),
        ]
    }

    pub fn head_row(&self) -> LayerRow {
        LayerRow::conv(1, self.head_kernel, 1, Norm::None, Activation::None)
    }

    pub fn rgb_channels(&self) -> usize {
        3 + usize::from(self.mask_to_rgb)
    }

    pub fn semantics_channels(&self) -> usize {
        self.num_classes + usize::from(self.mask_to_semantics)
    }
}

fn padding_for(kernel: usize) -> usize {
    // k4 layers pad by 2; odd kernels keep the size.
    if kernel.is_multiple_of(2) {
        kernel / 2
    } else {
        (kernel - 1) / 2
    }
}

fn conv_for_row(store: &mut ParamStore, path: &Path, row: &LayerRow, in_ch: usize) -> Result<Conv2d> {
    let spec = ConvSpec {
        in_channels: in_ch,
        out_channels: row.filters,
        kernel: row.kernel,
        stride: row.stride,
        padding: padding_for(row.kernel),
        dilation: row.dilation,
        bias: true,
        spectral: row.norm == Norm::SpectralInstance,
    };
    Conv2d::new(store, path, spec)
}

/// A stack of strided convolution blocks; returns every block's activation.
pub struct Stream {
    blocks: Vec<(Conv2d, Norm, Activation)>,
}

impl Stream {
    fn new(store: &mut ParamStore, path: &Path, rows: &[LayerRow], in_ch: usize) -> Result<Self> {
        let mut ch = in_ch;
        let mut blocks = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            blocks.push((conv_for_row(store, &path.join(i), row, ch)?, row.norm, row.activation));
            ch = row.filters;
        }
        Ok(Self { blocks })
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].0.spec().in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().expect("nonempty stream").0.spec().out_channels
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().map(|(c, _, _)| c)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let c = x.dims4()?.1;
        if c != self.in_channels() {
            return Err(Error::Shape(format!("stream expects {} input channels, got {c}", self.in_channels())));
        }
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (conv, norm, act) in &self.blocks {
            h = conv.forward(&h)?;
            if *norm == Norm::SpectralInstance {
                h = instance_norm(&h)?;
            }
            h = act.apply(&h)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }
}

/// Channel sum, `(B, C, h, w) → (B, 1, h, w)`.
pub fn sum_global_pool(features: &Tensor) -> Result<Tensor> {
    Ok(features.sum_keepdim(1)?)
}

/// Merges final RGB and semantics features.
pub fn sesame_merge(rgb: &Tensor, sem: &Tensor, mode: MergeMode) -> Result<Tensor> {
    let (rb, _, rh, rw) = rgb.dims4()?;
    let (sb, _, sh, sw) = sem.dims4()?;
    if (rb, rh, rw) != (sb, sh, sw) {
        return Err(Error::Shape(format!("cannot merge {:?} with {:?}", rgb.dims(), sem.dims())));
    }
    Ok(match mode {
        MergeMode::SumPoolScale => rgb.broadcast_mul(&(sum_global_pool(sem)? + 1.0)?)?,
        MergeMode::Concat => Tensor::cat(&[rgb, sem], 1)?,
        MergeMode::Product => {
            if rgb.dims() != sem.dims() {
                return Err(Error::Shape("product merge needs equal channel counts".into()));
            }
            (rgb * sem)?
        }
    })
}

/// Semantics-stream outputs for one batch, keyed by a content checksum.
#[derive(Clone)]
pub struct SemCache {
    checksum: [u8; 32],
    /// Final semantics-stream features per scale.
    features: Vec<Tensor>,
}

impl SemCache {
    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    /// Same cache with gradient tracking cut.
    pub fn detached(&self) -> Self {
        Self { checksum: self.checksum, features: self.features.iter().map(|t| t.detach()).collect() }
    }
}

fn checksum(t: &Tensor) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(format!("{:?}{:?}", t.dims(), t.dtype()).as_bytes());
    for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
        h.update(v.to_le_bytes());
    }
    Ok(h.finalize().into())
}

/// Per-scale patch scores plus the RGB-stream activations used for feature
/// matching.
#[derive(Clone)]
pub struct PatchScoreSet {
    pub scores: Vec<Tensor>,
    pub rgb_features: Vec<Vec<Tensor>>,
}

impl PatchScoreSet {
    pub fn num_scales(&self) -> usize {
        self.scores.len()
    }
}

struct Scale {
    rgb: Stream,
    sem: Option<Stream>,
    head: Conv2d,
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    scales: Vec<Scale>,
    sem_evaluations: AtomicUsize,
    score_evaluations: AtomicUsize,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let rows = config.stream_rows();
        let mut scales = Vec::new();
        for k in 0..config.scales {
            let path = Path::new("disc").join(format!("s{k}"));
            let (rgb, sem) = match config.architecture {
                Architecture::Sesame => (
                    Stream::new(&mut store, &path.join("rgb"), &rows, config.rgb_channels())?,
                    Some(Stream::new(&mut store, &path.join("sem"), &rows, config.semantics_channels())?),
                ),
                Architecture::PatchGan => {
                    (Stream::new(&mut store, &path.join("joint"), &rows, 3 + 1 + config.num_classes)?, None)
                }
            };
            let head_in = match (config.architecture, config.merge) {
                (Architecture::Sesame, MergeMode::Concat) => rgb.out_channels() * 2,
                _ => rgb.out_channels(),
            };
            let head = conv_for_row(&mut store, &path.join("head"), &config.head_row(), head_in)?;
            scales.push(Scale { rgb, sem, head });
        }
        Ok(Self { config, store, scales, sem_evaluations: AtomicUsize::new(0), score_evaluations: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// RGB stream of scale `k` (the joint stream for PatchGAN).
    pub fn rgb_stream(&self, k: usize) -> &Stream {
        &self.scales[k].rgb
    }

    pub fn semantics_stream(&self, k: usize) -> Option<&Stream> {
        self.scales[k].sem.as_ref()
    }

    /// How many times the semantics streams have been run.
    pub fn sem_evaluations(&self) -> usize {
        self.sem_evaluations.load(Ordering::Relaxed)
    }

    /// How many images have been scored (one per `forward` call).
    pub fn score_evaluations(&self) -> usize {
        self.score_evaluations.load(Ordering::Relaxed)
    }

    /// One spectral-norm power-iteration step on every normalised layer.
    pub fn power_iterate(&self) -> Result<()> {
        for s in &self.scales {
            for conv in s.rgb.convs().chain(s.sem.iter().flat_map(|x| x.convs())) {
                conv.power_iterate()?;
            }
        }
        Ok(())
    }

    fn pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![x.to_dtype(self.store.dtype())?];
        for _ in 1..self.config.scales {
            let prev = out.last().expect("nonempty");
            out.push(prev.avg_pool2d(2)?);
        }
        Ok(out)
    }

    fn semantics_input(&self, mask: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        let sem = semantics.to_dtype(self.store.dtype())?;
        if sem.dims4()?.1 != self.config.num_classes {
            return Err(Error::Shape(format!(
                "semantics have {} classes, expected {}",
                sem.dims4()?.1,
                self.config.num_classes
            )));
        }
        if self.config.mask_to_semantics {
            Ok(Tensor::cat(&[sem, mask.to_dtype(self.store.dtype())?], 1)?)
        } else {
            Ok(sem)
        }
    }

    /// Runs the semantics streams once for `semantics`.
    pub fn semantics_cache(&self, mask: &Tensor, semantics: &Tensor) -> Result<SemCache> {
        if self.config.architecture != Architecture::Sesame {
            return Err(Error::Config("PatchGAN has no semantics stream".into()));
        }
        let input = self.semantics_input(mask, semantics)?;
        let key = checksum(&input)?;
        let mut features = Vec::with_capacity(self.scales.len());
        for (scale, x) in self.scales.iter().zip(self.pyramid(&input)?) {
            let mut f = scale.sem.as_ref().expect("sesame scale").forward(&x)?;
            features.push(f.pop().expect("nonempty stream"));
        }
        self.sem_evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(SemCache { checksum: key, features })
    }

    /// Scores `image` (generated or real) against `semantics`. A supplied
    /// cache must have been built for the same semantics.
    pub fn forward(
        &self,
        image: &Tensor,
        mask: &Tensor,
        semantics: &Tensor,
        cache: Option<&SemCache>,
    ) -> Result<PatchScoreSet> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if mask.dims4()? != (b, 1, h, w) {
            return Err(Error::Shape(format!("mask shape {:?} does not match image", mask.dims())));
        }
        if semantics.dims4()? != (b, self.config.num_classes, h, w) {
            return Err(Error::Shape(format!("semantics shape {:?} does not match image", semantics.dims())));
        }
        self.score_evaluations.fetch_add(1, Ordering::Relaxed);
        let dtype = self.store.dtype();
        let (image, mask) = (image.to_dtype(dtype)?, mask.to_dtype(dtype)?);
        if self.config.architecture == Architecture::PatchGan {
            return self.patchgan_forward(&image, &mask, semantics);
        }
        let owned;
        let cache = match cache {
            Some(c) => {
                if c.checksum != checksum(&self.semantics_input(&mask, semantics)?)? {
                    return Err(Error::CacheMismatch);
                }
                c
            }
            None => {
                owned = self.semantics_cache(&mask, semantics)?;
                &owned
            }
        };
        let rgb_in = if self.config.mask_to_rgb { Tensor::cat(&[&image, &mask], 1)? } else { image };
        let mut scores = Vec::with_capacity(self.scales.len());
        let mut rgb_features = Vec::with_capacity(self.scales.len());
        for ((scale, x), sem) in self.scales.iter().zip(self.pyramid(&rgb_in)?).zip(&cache.features) {
            let feats = scale.rgb.forward(&x)?;
            let merged = sesame_merge(feats.last().expect("nonempty stream"), sem, self.config.merge)?;
            scores.push(scale.head.forward(&merged)?);
            rgb_features.push(feats);
        }
        Ok(PatchScoreSet { scores, rgb_features })
    }

    fn patchgan_forward(&self, image: &Tensor, mask: &Tensor, semantics: &Tensor) -> Result<PatchScoreSet> {
        let x = Tensor::cat(&[image, mask, &semantics.to_dtype(self.store.dtype())?], 1)?;
        let mut scores = Vec::with_capacity(self.scales.len());
        let mut rgb_features = Vec::with_capacity(self.scales.len());
        for (scale, x) in self.scales.iter().zip(self.pyramid(&x)?) {
            let feats = scale.rgb.forward(&x)?;
            scores.push(scale.head.forward(feats.last().expect("nonempty stream"))?);
            rgb_features.push(feats);
        }
        Ok(PatchScoreSet { scores, rgb_features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small(c: usize) -> DiscriminatorConfig {
        DiscriminatorConfig { num_classes: c, base_width: 4, ..DiscriminatorConfig::default() }
    }

    fn inputs(b: usize, c: usize, n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let img: Vec<f64> = (0..b * 3 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask: Vec<f64> = (0..b * n * n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let mut sem = vec![0.0; b * c * n * n];
        for bi in 0..b {
            for p in 0..n * n {
                sem[(bi * c + rng.random_range(0..c)) * n * n + p] = 1.0;
            }
        }
        (
            Tensor::from_vec(img, (b, 3, n, n), &dev).unwrap(),
            Tensor::from_vec(mask, (b, 1, n, n), &dev).unwrap(),
            Tensor::from_vec(sem, (b, c, n, n), &dev).unwrap(),
        )
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn stream_feature_shapes_follow_conv_arithmetic() {
        let d = Discriminator::new(DiscriminatorConfig::new(8), DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 4, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let feats = d.rgb_stream(0).forward(&x).unwrap();
        let mut n = 64;
        for (f, (ch, s)) in feats.iter().zip([(64, 2), (128, 2), (256, 2), (512, 1)]) {
            n = (n + 2 * 2 - 4) / s + 1;
            assert_eq!(f.dims(), &[1, ch, n, n]);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let d = Discriminator::new(small(3), DType::F64, 0).unwrap();
        for conv in d.rgb_stream(0).convs() {
            let b = conv.bias().unwrap();
            b.set(&b.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::zeros((1, 4, 16, 16), DType::F64, &Device::Cpu).unwrap();
        for f in d.rgb_stream(0).forward(&x).unwrap() {
            assert_eq!(f.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn stream_rejects_channel_mismatch() {
        let d = Discriminator::new(small(3), DType::F64, 0).unwrap();
        let x = Tensor::zeros((1, 5, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(d.rgb_stream(0).forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_pool_examples() {
        let x = Tensor::from_vec(vec![1f64, 2., 3., 4., 5., 6., 7., 8.], (1, 2, 2, 2), &Device::Cpu).unwrap();
        let p = sum_global_pool(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(p, vec![6., 8., 10., 12.]);
    }

    #[test]
    fn merge_examples() {
        let dev = Device::Cpu;
        let rgb = Tensor::from_vec(vec![2f64, -1.], (1, 2, 1, 1), &dev).unwrap();
        let sem = Tensor::from_vec(vec![0.25f64, 0.25], (1, 2, 1, 1), &dev).unwrap();
        let m =
            sesame_merge(&rgb, &sem, MergeMode::SumPoolScale).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(m, vec![3., -1.5]);
        let zero = sem.zeros_like().unwrap();
        let m = sesame_merge(&rgb, &zero, MergeMode::SumPoolScale).unwrap();
        assert_eq!(max_diff(&m, &rgb), 0.0);
        let neg = Tensor::from_vec(vec![-0.5f64, -0.5], (1, 2, 1, 1), &dev).unwrap();
        let m = sesame_merge(&rgb, &neg, MergeMode::SumPoolScale).unwrap();
        assert_eq!(m.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let m = sesame_merge(&rgb, &sem, MergeMode::Concat).unwrap();
        assert_eq!(m.dims(), &[1, 4, 1, 1]);
        let m = sesame_merge(&rgb, &sem, MergeMode::Product).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(m, vec![0.5, -0.25]);
        let bad = Tensor::zeros((1, 2, 2, 1), DType::F64, &dev).unwrap();
        assert!(sesame_merge(&rgb, &bad, MergeMode::SumPoolScale).is_err());
    }

    #[test]
    fn two_scales_score_shapes() {
        let d = Discriminator::new(small(8), DType::F32, 1).unwrap();
        let (img, mask, sem) = inputs(2, 8, 64, 0);
        let s = d.forward(&img, &mask, &sem, None).unwrap();
        assert_eq!(s.num_scales(), 2);
        assert_eq!(s.scores[0].dims(), &[2, 1, 11, 11]);
        assert_eq!(s.scores[1].dims(), &[2, 1, 7, 7]);
        let k3 = Discriminator::new(DiscriminatorConfig { head_kernel: 3, ..small(8) }, DType::F32, 1).unwrap();
        let s = k3.forward(&img, &mask, &sem, None).unwrap();
        assert_eq!(s.scores[0].dims(), &[2, 1, 10, 10]);
    }

    #[test]
    fn cache_counts_semantics_evaluations() {
        let d = Discriminator::new(small(3), DType::F64, 1).unwrap();
        let (img, mask, sem) = inputs(1, 3, 16, 1);
        let cache = d.semantics_cache(&mask, &sem).unwrap();
        d.forward(&img, &mask, &sem, Some(&cache)).unwrap();
        d.forward(&img.neg().unwrap(), &mask, &sem, Some(&cache)).unwrap();
        assert_eq!(d.sem_evaluations(), 1);
        assert_eq!(d.score_evaluations(), 2);
        d.forward(&img, &mask, &sem, None).unwrap();
        assert_eq!(d.sem_evaluations(), 2);
    }

    #[test]
    fn cache_for_other_semantics_is_rejected() {
        let d = Discriminator::new(small(3), DType::F64, 1).unwrap();
        let (img, mask, sem) = inputs(1, 3, 16, 1);
        let (_, _, other) = inputs(1, 3, 16, 2);
        let cache = d.semantics_cache(&mask, &other).unwrap();
        assert!(matches!(d.forward(&img, &mask, &sem, Some(&cache)), Err(Error::CacheMismatch)));
    }

    #[test]
    fn rgb_features_ignore_semantics() {
        let d = Discriminator::new(small(3), DType::F64, 4).unwrap();
        let (img, mask, sem) = inputs(1, 3, 16, 3);
        let (_, _, other) = inputs(1, 3, 16, 4);
        let a = d.forward(&img, &mask, &sem, None).unwrap();
        let b = d.forward(&img, &mask, &other, None).unwrap();
        for (fa, fb) in a.rgb_features.iter().flatten().zip(b.rgb_features.iter().flatten()) {
            assert_eq!(max_diff(fa, fb), 0.0);
        }
        assert!(a.scores.iter().zip(&b.scores).any(|(x, y)| max_diff(x, y) > 0.0));
        for feats in &a.rgb_features {
            assert_eq!(feats.len(), 4);
        }
    }

    #[test]
    fn patchgan_matches_sesame_score_sizes() {
        let (img, mask, sem) = inputs(1, 8, 64, 5);
        let p =
            Discriminator::new(DiscriminatorConfig { architecture: Architecture::PatchGan, ..small(8) }, DType::F64, 0)
                .unwrap();
        let s = Discriminator::new(small(8), DType::F64, 0).unwrap();
        assert_eq!(p.rgb_stream(0).in_channels(), 3 + 1 + 8);
        let (ps, ss) = (p.forward(&img, &mask, &sem, None).unwrap(), s.forward(&img, &mask, &sem, None).unwrap());
        for (a, b) in ps.scores.iter().zip(&ss.scores) {
            assert_eq!(a.dims(), b.dims());
        }
        let again = p.forward(&img, &mask, &sem, None).unwrap();
        assert_eq!(max_diff(&ps.scores[0], &again.scores[0]), 0.0);
        assert_eq!(p.sem_evaluations(), 0);
    }

    #[test]
    fn merge_mode_parsing() {
        for m in MergeMode::ALL {
            assert_eq!(m.as_str().parse::<MergeMode>().unwrap(), m);
        }
        assert!("sum".parse::<MergeMode>().is_err());
    }
}
