//! Adversarial training: configuration, learning-rate schedule, the per-batch
//! update, checkpointing and the epoch loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::data::io::Dataset;
use crate::data::{
    make_edit_sample, sample_bbox_addition, sample_freeform_mask, sample_removal_region, synth_scene, EditBatch,
    EditMode, EditSample, FreeformParams, Manifest, RemovalParams, SampleRequest, Scene, SceneSpec, SemanticsScope,
};
use crate::discriminator::{Architecture, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{composite, Generator, GeneratorConfig};
use crate::losses::{
    feature_matching_loss, hinge_loss_d, hinge_loss_g, perceptual_loss, FeatureExtractor, LossWeights, ScaleReduction,
};
use crate::nn::{Adam, AdamState};

/// Relative frequency of each training mask family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskMix {
    pub freeform: f64,
    pub addition: f64,
    pub removal: f64,
}

impl Default for MaskMix {
    fn default() -> Self {
        Self { freeform: 0.5, addition: 0.25, removal: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub decay_start: usize,
    /// Freshly sampled batches per epoch.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub fm_reduction: ScaleReduction,
    pub semantics_scope: SemanticsScope,
    pub mask_mix: MaskMix,
    pub freeform: FreeformParams,
    pub removal: RemovalParams,
    pub bbox_margin: usize,
    pub grad_clip: Option<f64>,
    pub perceptual_seed: u64,
    pub perceptual_widths: Vec<usize>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_gen: 1e-4,
            lr_disc: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            epochs: 200,
            decay_start: 100,
            steps_per_epoch: 10,
            batch_size: 8,
            image_size: 64,
            seed: 0,
            weights: LossWeights::default(),
            fm_reduction: ScaleReduction::Mean,
            semantics_scope: SemanticsScope::Full,
            mask_mix: MaskMix::default(),
            freeform: FreeformParams::default(),
            removal: RemovalParams::default(),
            bbox_margin: 0,
            grad_clip: None,
            perceptual_seed: 7,
            perceptual_widths: FeatureExtractor::DEFAULT_WIDTHS.to_vec(),
            checkpoint_every: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced network widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig { base_width: 8, spade_hidden: 16, ..GeneratorConfig::default() },
            discriminator: DiscriminatorConfig { base_width: 8, ..DiscriminatorConfig::default() },
            perceptual_widths: vec![8, 16, 16, 16],
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.generator.num_classes
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        if self.generator.num_classes != self.discriminator.num_classes {
            return Err(Error::Config("generator and discriminator class counts differ".into()));
        }
        if self.decay_start > self.epochs || self.epochs == 0 {
            return Err(Error::Config("need 0 < epochs and decay_start <= epochs".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch size and steps per epoch must be positive".into()));
        }
        if !self.image_size.is_multiple_of(4) || self.image_size < 16 {
            return Err(Error::Config("image size must be a multiple of 4, at least 16".into()));
        }
        let m = self.mask_mix;
        if !(m.freeform >= 0.0 && m.addition >= 0.0 && m.removal >= 0.0 && m.freeform + m.addition + m.removal > 0.0) {
            return Err(Error::Config("mask mix weights must be nonnegative and not all zero".into()));
        }
        if !(self.lr_gen >= 0.0 && self.lr_disc >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }
}

/// Learning rate at `epoch`: constant before `decay_start`, then linear to 0
/// at `epochs`.
pub fn lr_at(epoch: usize, base_lr: f64, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::EpochOutOfRange { epoch, epochs: cfg.epochs });
    }
    if epoch < cfg.decay_start {
        return Ok(base_lr);
    }
    let span = (cfg.epochs - cfg.decay_start) as f64;
    if span == 0.0 {
        return Ok(0.0);
    }
    Ok(base_lr * (cfg.epochs - epoch) as f64 / span)
}

/// Where training scenes come from.
pub enum DataSource {
    /// A fresh procedural scene per sample.
    Synthetic(SceneSpec),
    /// Scenes loaded from disk, drawn uniformly with replacement.
    Scenes { scenes: Vec<Scene>, manifest: Manifest },
}

impl DataSource {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Config(format!("dataset {} is empty", ds.root.display())));
        }
        Ok(DataSource::Scenes { scenes: ds.scenes()?, manifest: ds.manifest.clone() })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Scenes { manifest, .. } => manifest.num_classes,
        }
    }

    pub fn background_ids(&self) -> Vec<u8> {
        match self {
            DataSource::Synthetic(s) => s.background_ids(),
            DataSource::Scenes { manifest, .. } => manifest.background_ids(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        match self {
            DataSource::Synthetic(s) => (s.width, s.height),
            DataSource::Scenes { scenes, .. } => (scenes[0].image.width(), scenes[0].image.height()),
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Result<Scene> {
        match self {
            DataSource::Synthetic(spec) => synth_scene(spec, rng),
            DataSource::Scenes { scenes, .. } => Ok(scenes[rng.random_range(0..scenes.len())].clone()),
        }
    }
}

/// Mask family for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Freeform,
    /// Bounding box of a foreground instance.
    Addition,
    /// Rectangle overlapping background.
    #[serde(rename = "removal")]
    RemovalRegion,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Freeform, MaskKind::Addition, MaskKind::RemovalRegion];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::Freeform => "freeform",
            MaskKind::Addition => "addition",
            MaskKind::RemovalRegion => "removal",
        }
    }
}

/// Mask sampling parameters shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct SamplingParams {
    pub freeform: FreeformParams,
    pub removal: RemovalParams,
    pub bbox_margin: usize,
    pub scope: SemanticsScope,
}

impl SamplingParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            freeform: cfg.freeform.clone(),
            removal: cfg.removal.clone(),
            bbox_margin: cfg.bbox_margin,
            scope: cfg.semantics_scope,
        }
    }
}

/// Builds a reconstruction sample: the target is the scene itself and the
/// semantics are its true labels. Scenes without a usable instance or
/// background fall back to a free-form mask.
pub fn draw_edit_sample(
    scene: &Scene,
    kind: MaskKind,
    params: &SamplingParams,
    background: &[u8],
    rng: &mut impl Rng,
) -> Result<EditSample> {
    let (mask, mode) = match kind {
        MaskKind::Addition => match sample_bbox_addition(&scene.instances, rng, params.bbox_margin) {
            Ok((m, _)) => (m, EditMode::Addition),
            Err(_) => (sample_freeform_mask(&scene.labels, rng, &params.freeform).0, EditMode::Freeform),
        },
        MaskKind::RemovalRegion => match sample_removal_region(&scene.labels, background, rng, &params.removal) {
            Ok(m) => (m, EditMode::Freeform),
            Err(_) => (sample_freeform_mask(&scene.labels, rng, &params.freeform).0, EditMode::Freeform),
        },
        MaskKind::Freeform => (sample_freeform_mask(&scene.labels, rng, &params.freeform).0, EditMode::Freeform),
    };
    make_edit_sample(SampleRequest {
        image: &scene.image,
        labels: &scene.labels,
        instances: Some(&scene.instances),
        mask,
        mode,
        scope: params.scope,
        edited_labels: None,
        background_classes: background,
    })
}

/// Scalars recorded after each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_FM")]
    pub l_fm: f64,
    #[serde(rename = "L_perc")]
    pub l_perc: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

/// Losses and gradients for one batch, all at the current parameters.
pub struct BatchGradients {
    pub l_d: f64,
    pub l_g: f64,
    pub l_fm: f64,
    pub l_perc: f64,
    pub l_adv: f64,
    pub disc: GradStore,
    pub gen: GradStore,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generator, discriminator, both optimizers, the perceptual extractor and
/// the data RNG.
pub struct Trainer {
    cfg: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    extractor: FeatureExtractor,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone(), dtype, cfg.seed)?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), dtype, cfg.seed.wrapping_add(1))?;
        let opt_g = Adam::new(generator.store().params(), cfg.adam_beta1, cfg.adam_beta2)?;
        let opt_d = Adam::new(discriminator.store().params(), cfg.adam_beta1, cfg.adam_beta2)?;
        let extractor = FeatureExtractor::random(cfg.perceptual_seed, &cfg.perceptual_widths, dtype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { cfg, generator, discriminator, opt_g, opt_d, extractor, rng, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        ((self.step / self.cfg.steps_per_epoch as u64) as usize).min(self.cfg.epochs)
    }

    /// Learning rates `(generator, discriminator)` for the current epoch.
    pub fn learning_rates(&self) -> Result<(f64, f64)> {
        let e = self.epoch();
        Ok((lr_at(e, self.cfg.lr_gen, &self.cfg)?, lr_at(e, self.cfg.lr_disc, &self.cfg)?))
    }

    /// Draws a batch from `source` with the trainer's RNG.
    pub fn sample_batch(&mut self, source: &DataSource) -> Result<EditBatch> {
        if source.num_classes() != self.cfg.num_classes() {
            return Err(Error::ConfigMismatch(format!(
                "data has {} classes, model {}",
                source.num_classes(),
                self.cfg.num_classes()
            )));
        }
        let params = SamplingParams::from_config(&self.cfg);
        let background = source.background_ids();
        let m = self.cfg.mask_mix;
        let total = m.freeform + m.addition + m.removal;
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let scene = source.draw(&mut self.rng)?;
            let u = self.rng.random::<f64>() * total;
            let kind = if u < m.freeform {
                MaskKind::Freeform
            } else if u < m.freeform + m.addition {
                MaskKind::Addition
            } else {
                MaskKind::RemovalRegion
            };
            samples.push(draw_edit_sample(&scene, kind, &params, &background, &mut self.rng)?);
        }
        EditBatch::from_samples(&samples, self.generator.store().dtype())
    }

    /// Computes both players' losses and gradients at the current parameters.
    ///
    /// The semantics streams run once; the discriminator scores the real and
    /// the composited image once each. Generator gradients reach the
    /// generator through the gradient of its discriminator loss with respect
    /// to the composited image.
    pub fn batch_gradients(&self, batch: &EditBatch) -> Result<BatchGradients> {
        let w = &self.cfg.weights;
        let i_gen = self.generator.forward_batch(batch)?;
        let i_out = composite(&i_gen, &batch.real, &batch.mask)?;
        let fake_in = Var::from_tensor(&i_out.detach())?;

        let cache = match self.discriminator.config().architecture {
            Architecture::Sesame => Some(self.discriminator.semantics_cache(&batch.mask, &batch.semantics)?),
            Architecture::PatchGan => None,
        };
        let real = self.discriminator.forward(&batch.real, &batch.mask, &batch.semantics, cache.as_ref())?;
        let fake = self.discriminator.forward(fake_in.as_tensor(), &batch.mask, &batch.semantics, cache.as_ref())?;

        let l_d = hinge_loss_d(&real, &fake)?;
        let disc = l_d.backward()?;

        let l_fm = feature_matching_loss(&real, &fake, self.cfg.fm_reduction)?;
        let l_adv = hinge_loss_g(&fake)?;
        let l_g_disc = ((&l_fm * w.lambda_feat)? + &l_adv)?;
        let grad_out = l_g_disc
            .backward()?
            .get(fake_in.as_tensor())
            .cloned()
            .ok_or_else(|| Error::Shape("no gradient reached the composited image".into()))?;

        let l_perc = perceptual_loss(&i_out, &batch.real, &self.extractor)?;
        let surrogate = ((&i_out * grad_out.detach())?.sum_all()? + (&l_perc * w.lambda_percept)?)?;
        let gen = surrogate.backward()?;

        let l_perc_v = scalar(&l_perc)?;
        let l_fm_v = scalar(&l_fm)?;
        let l_adv_v = scalar(&l_adv)?;
        Ok(BatchGradients {
            l_d: scalar(&l_d)?,
            l_g: w.lambda_percept * l_perc_v + w.lambda_feat * l_fm_v + l_adv_v,
            l_fm: l_fm_v,
            l_perc: l_perc_v,
            l_adv: l_adv_v,
            disc,
            gen,
        })
    }

    fn check_finite(&self, g: &BatchGradients) -> Result<()> {
        for (what, v) in [("L_D", g.l_d), ("L_G", g.l_g), ("L_FM", g.l_fm), ("L_perc", g.l_perc)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: what.into(), step: self.step });
            }
        }
        Ok(())
    }

    fn metrics(&self, g: &BatchGradients, lr_g: f64, lr_d: f64) -> StepMetrics {
        StepMetrics {
            step: self.step,
            epoch: self.epoch(),
            l_d: g.l_d,
            l_g: g.l_g,
            l_fm: g.l_fm,
            l_perc: g.l_perc,
            lr_g,
            lr_d,
        }
    }

    /// One discriminator update and one generator update, both from
    /// gradients taken at the parameters on entry.
    pub fn train_step(&mut self, batch: &EditBatch) -> Result<StepMetrics> {
        let (lr_g, lr_d) = self.learning_rates()?;
        self.discriminator.power_iterate()?;
        let g = self.batch_gradients(batch)?;
        self.check_finite(&g)?;
        let metrics = self.metrics(&g, lr_g, lr_d);
        self.opt_d.step(&g.disc, lr_d, self.cfg.grad_clip)?;
        self.opt_g.step(&g.gen, lr_g, self.cfg.grad_clip)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Updates only the discriminator.
    pub fn discriminator_step(&mut self, batch: &EditBatch) -> Result<StepMetrics> {
        let (lr_g, lr_d) = self.learning_rates()?;
        let g = self.batch_gradients(batch)?;
        self.check_finite(&g)?;
        self.opt_d.step(&g.disc, lr_d, self.cfg.grad_clip)?;
        Ok(self.metrics(&g, lr_g, lr_d))
    }

    /// Updates only the generator.
    pub fn generator_step(&mut self, batch: &EditBatch) -> Result<StepMetrics> {
        let (lr_g, lr_d) = self.learning_rates()?;
        let g = self.batch_gradients(batch)?;
        self.check_finite(&g)?;
        self.opt_g.step(&g.gen, lr_g, self.cfg.grad_clip)?;
        Ok(self.metrics(&g, lr_g, lr_d))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let seed: Vec<u8> = self.rng.get_seed().to_vec();
        let header = serde_json::json!({
            "config": self.cfg,
            "generator": self.cfg.generator,
            "step": self.step,
            "rng": {
                "seed": seed,
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "opt_g_step": self.opt_g.state().step,
            "opt_d_step": self.opt_d.state().step,
        });
        let mut a = Archive::new("train_state", header);
        for store in [self.generator.store(), self.discriminator.store()] {
            for (name, t) in store.snapshot() {
                a.insert(name, &t);
            }
        }
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (name, t) in &opt.state().first {
                a.insert(format!("{prefix}.m.{name}"), t);
            }
            for (name, t) in &opt.state().second {
                a.insert(format!("{prefix}.v.{name}"), t);
            }
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Restores a trainer for `cfg` from an archive written by [`Trainer::save`].
    pub fn restore(cfg: TrainConfig, archive: &Archive) -> Result<Self> {
        if archive.kind != "train_state" {
            return Err(Error::ConfigMismatch(format!("archive holds {:?}, not a training state", archive.kind)));
        }
        let stored: TrainConfig = serde_json::from_value(archive.header["config"].clone())?;
        if stored.generator != cfg.generator {
            return Err(Error::ConfigMismatch(format!(
                "generator config differs: stored {:?}, requested {:?}",
                stored.generator, cfg.generator
            )));
        }
        if stored.discriminator != cfg.discriminator {
            return Err(Error::ConfigMismatch(format!(
                "discriminator config differs: stored {:?}, requested {:?}",
                stored.discriminator, cfg.discriminator
            )));
        }
        let dtype = archive
            .arrays
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::CorruptArchive("no arrays".into()))?;
        let mut t = Self::with_dtype(cfg, dtype)?;
        t.generator.store().load(&archive.with_prefix("gen."))?;
        t.discriminator.store().load(&archive.with_prefix("disc."))?;
        let h = &archive.header;
        let bad = |what: &str| Error::CorruptArchive(format!("missing or invalid {what}"));
        for (prefix, opt, key) in [("opt_g", &mut t.opt_g, "opt_g_step"), ("opt_d", &mut t.opt_d, "opt_d_step")] {
            let strip = |kind: &str| {
                let p = format!("{prefix}.{kind}.");
                archive.with_prefix(&p).into_iter().map(|(k, v)| (k[p.len()..].to_string(), v)).collect()
            };
            let step = h[key].as_u64().ok_or_else(|| bad(key))?;
            opt.set_state(AdamState { step, first: strip("m"), second: strip("v") })?;
        }
        t.step = h["step"].as_u64().ok_or_else(|| bad("step"))?;
        let seed: Vec<u8> = serde_json::from_value(h["rng"]["seed"].clone())?;
        let seed: [u8; 32] = seed.try_into().map_err(|_| bad("rng seed"))?;
        let stream = h["rng"]["stream"].as_u64().ok_or_else(|| bad("rng stream"))?;
        let word_pos: u128 =
            h["rng"]["word_pos"].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| bad("rng position"))?;
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(stream);
        t.rng.set_word_pos(word_pos);
        Ok(t)
    }

    /// Loads a trainer with the configuration stored in the archive.
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        let cfg: TrainConfig = serde_json::from_value(archive.header["config"].clone())?;
        Self::restore(cfg, &archive)
    }

    /// Runs steps until `until` (capped by the schedule), appending one JSON
    /// line per step to `log`.
    pub fn run(
        &mut self,
        source: &DataSource,
        until: u64,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepMetrics>> {
        let until = until.min(self.cfg.total_steps());
        let mut out = Vec::new();
        while self.step < until {
            let batch = self.sample_batch(source)?;
            let m = match self.train_step(&batch) {
                Ok(m) => m,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = checkpoint_dir {
                        self.save(&dir.join(format!("nonfinite-step{}.ckpt", self.step)))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&m)?;
                writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            out.push(m);
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save(&dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(out)
    }
}

/// Output locations of [`train_loop`].
pub struct LoopOutput {
    pub trainer: Trainer,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains from scratch (or from `resume`) for the full schedule or until
/// `max_steps`. With `out_dir`, writes `metrics.jsonl`, periodic checkpoints
/// and `final.ckpt`.
pub fn train_loop(
    cfg: TrainConfig,
    source: &DataSource,
    out_dir: Option<&Path>,
    max_steps: Option<u64>,
    resume: Option<&Path>,
) -> Result<LoopOutput> {
    if let DataSource::Scenes { scenes, .. } = source {
        if scenes.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
    }
    let mut trainer = match resume {
        Some(p) => Trainer::restore(cfg, &Archive::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let until = max_steps.unwrap_or(u64::MAX);
    let (metrics, checkpoint) = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log_path = dir.join("metrics.jsonl");
            let mut log = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            let metrics = trainer.run(source, until, Some(&mut log), Some(dir))?;
            let ckpt = dir.join("final.ckpt");
            trainer.save(&ckpt)?;
            (metrics, Some(ckpt))
        }
        None => (trainer.run(source, until, None, None)?, None),
    };
    Ok(LoopOutput { trainer, metrics, checkpoint })
}

/// Builds a generator from any archive holding generator parameters.
pub fn load_generator(path: &Path) -> Result<Generator> {
    let archive = Archive::load(path)?;
    generator_from_archive(&archive)
}

pub fn generator_from_archive(archive: &Archive) -> Result<Generator> {
    let cfg: GeneratorConfig = serde_json::from_value(archive.header["generator"].clone())?;
    let params = archive.with_prefix("gen.");
    let dtype =
        params.values().next().map(|t| t.dtype()).ok_or_else(|| Error::CorruptArchive("no generator arrays".into()))?;
    let g = Generator::new(cfg, dtype, 0)?;
    g.store().load(&params)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(c: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            image_size: 16,
            epochs: 4,
            decay_start: 2,
            steps_per_epoch: 2,
            perceptual_widths: vec![4, 4],
            generator: GeneratorConfig { num_classes: c, base_width: 2, spade_hidden: 4, ..GeneratorConfig::default() },
            discriminator: DiscriminatorConfig { num_classes: c, base_width: 2, ..DiscriminatorConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn source() -> DataSource {
        DataSource::Synthetic(SceneSpec { object_size: (3, 6), ..SceneSpec::desk(16, 16) })
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1e-4, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(99, 1e-4, &cfg).unwrap(), 1e-4);
        assert!((lr_at(150, 1e-4, &cfg).unwrap() - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(200, 1e-4, &cfg).unwrap(), 0.0);
        assert!(matches!(lr_at(201, 1e-4, &cfg), Err(Error::EpochOutOfRange { .. })));
    }

    #[test]
    fn config_parses_from_toml_and_json() {
        let cfg = TrainConfig::from_toml("batch_size = 4\n[generator]\nbase_width = 8\n").unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.generator.base_width, 8);
        assert_eq!(cfg.lr_disc, 4e-4);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("decay_start = 300").is_err());
    }

    #[test]
    fn batch_gradients_touch_the_right_parameters() {
        let mut t = Trainer::new(tiny(8)).unwrap();
        let batch = t.sample_batch(&source()).unwrap();
        let g = t.batch_gradients(&batch).unwrap();
        for (_, v) in t.generator().store().params() {
            assert!(g.gen.get(v.as_tensor()).is_some());
        }
        for (_, v) in t.discriminator().store().params() {
            assert!(g.disc.get(v.as_tensor()).is_some());
        }
        assert!(g.l_d.is_finite() && g.l_g.is_finite());
    }

    #[test]
    fn step_evaluates_semantics_once_and_scores_twice() {
        let mut t = Trainer::new(tiny(8)).unwrap();
        let batch = t.sample_batch(&source()).unwrap();
        let (s0, c0) = (t.discriminator().sem_evaluations(), t.discriminator().score_evaluations());
        t.train_step(&batch).unwrap();
        assert_eq!(t.discriminator().sem_evaluations() - s0, 1);
        assert_eq!(t.discriminator().score_evaluations() - c0, 2);
    }

    #[test]
    fn patchgan_baseline_trains() {
        let mut cfg = tiny(8);
        cfg.discriminator.architecture = Architecture::PatchGan;
        let mut t = Trainer::new(cfg).unwrap();
        let batch = t.sample_batch(&source()).unwrap();
        let m = t.train_step(&batch).unwrap();
        assert!(m.l_d.is_finite() && m.l_g.is_finite());
        assert_eq!(t.discriminator().sem_evaluations(), 0);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let mut t = Trainer::new(tiny(5)).unwrap();
        assert!(matches!(t.sample_batch(&source()), Err(Error::ConfigMismatch(_))));
    }
}
