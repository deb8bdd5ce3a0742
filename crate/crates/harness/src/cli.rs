//! The `sesame` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sesame::data::io::{encode_rgb_png, read_manifest, write_manifest, write_scene, Dataset};
use sesame::data::{synth_scene, EditMode, Scene, SceneSpec, SemanticsScope};
use sesame::discriminator::{Architecture, MergeMode};
use sesame::metrics::{
    evaluate_checkpoint, train_segmenter, EvalConfig, MetricsReport, Segmenter, SegmenterConfig, SegmenterTraining,
};
use sesame::training::{train_loop, DataSource, TrainConfig};

use crate::edit::{decode_inputs, Editor};
use crate::service::{serve, AppState};

pub const PORT_ENV: &str = "SESAME_PORT";

#[derive(Parser)]
#[command(name = "sesame", version, about = "Semantic image editing: data, training, evaluation and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset.
    SynthData(SynthArgs),
    /// Train generator and discriminator.
    Train(TrainArgs),
    /// Fit the segmenter used for mIoU and accuracy.
    TrainSegmenter(SegmenterArgs),
    /// Score a checkpoint on held-out scenes.
    Eval(EvalArgs),
    /// Apply one painted edit to an image file.
    Edit(EditArgs),
    /// Run the HTTP edit service.
    Serve(ServeArgs),
    /// Train and score a sweep of variants along one axis.
    Ablate(AblateArgs),
}

/// Where scenes come from: a dataset directory or the synthetic generator.
#[derive(Args, Clone)]
struct SceneArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Side length of synthetic scenes when no dataset is given.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

impl SceneArgs {
    fn source(&self) -> Result<DataSource> {
        match &self.data {
            Some(dir) => Ok(DataSource::from_dataset(&Dataset::open(dir)?)?),
            None => Ok(DataSource::Synthetic(SceneSpec::desk(self.size, self.size))),
        }
    }

    /// Evaluation scenes: the whole dataset, or `count` synthetic scenes
    /// drawn from a seed disjoint from training streams.
    fn held_out(&self, count: usize, seed: u64) -> Result<(Vec<Scene>, Vec<u8>)> {
        match &self.data {
            Some(dir) => {
                let ds = Dataset::open(dir)?;
                Ok((ds.scenes()?, ds.manifest.background_ids()))
            }
            None => {
                let spec = SceneSpec::desk(self.size, self.size);
                Ok((held_out_scenes(&spec, count, seed)?, spec.background_ids()))
            }
        }
    }
}

pub fn held_out_scenes(spec: &SceneSpec, count: usize, seed: u64) -> sesame::Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synth_scene(spec, &mut rng)).collect()
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON training configuration; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scenes: SceneArgs,
    /// Stop after this many steps instead of the full schedule.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmenterArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out pixel accuracy the segmenter must reach.
    #[arg(long, default_value_t = 0.9)]
    min_accuracy: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    scenes: SceneArgs,
    /// Synthetic held-out scenes to score when no dataset is given.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 10_000)]
    scene_seed: u64,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    /// TOML or JSON evaluation configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    image: PathBuf,
    /// Single-channel PNG of class indices, 255 where untouched.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "freeform")]
    mode: EditMode,
    /// Defaults to full with a segmenter, bbox without.
    #[arg(long)]
    scope: Option<SemanticsScope>,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    /// Dataset directory whose manifest names the classes.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Overridden by the SESAME_PORT environment variable.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    /// Merge of the two discriminator streams.
    Merge,
    /// Semantics shown to the generator.
    Scope,
    /// Two-stream versus single-stream discriminator.
    Discriminator,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scenes: SceneArgs,
    #[arg(long, default_value_t = 50)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the verb and returns the exit
/// code: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::TrainSegmenter(a) => fit_segmenter(a),
        Command::Eval(a) => eval(a),
        Command::Edit(a) => edit(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec::desk(a.size, a.size);
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    write_manifest(&a.out, &spec.manifest())?;
    for i in 0..a.count {
        write_scene(&a.out, &format!("{i:05}"), &synth_scene(&spec, &mut rng)?)?;
    }
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(TrainConfig::desk()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref())?;
    let scenes = SceneArgs { size: cfg.image_size, ..a.scenes };
    let out = train_loop(cfg, &scenes.source()?, Some(&a.out), a.steps, a.resume.as_deref())?;
    let last = out.metrics.last();
    println!(
        "trained to step {}; checkpoint {}; log {}",
        out.trainer.step(),
        out.checkpoint.as_deref().map_or("-".into(), |p| p.display().to_string()),
        a.out.join("metrics.jsonl").display()
    );
    if let Some(m) = last {
        println!("L_D {:.4}  L_G {:.4}  L_FM {:.4}  L_perc {:.4}", m.l_d, m.l_g, m.l_fm, m.l_perc);
    }
    Ok(())
}

fn fit_segmenter(a: SegmenterArgs) -> Result<()> {
    let source = a.scenes.source()?;
    let cfg = SegmenterConfig { num_classes: source.num_classes(), width: a.width };
    let training = SegmenterTraining { steps: a.steps, seed: a.seed, ..SegmenterTraining::default() };
    let (model, losses) = train_segmenter(&source, cfg, &training)?;
    let (held, _) = a.scenes.held_out(64, a.seed.wrapping_add(77_777))?;
    let accuracy = model.evaluate(&held)?.accuracy().unwrap_or(0.0);
    model.save(&a.out)?;
    println!(
        "final loss {:.4}; held-out pixel accuracy {accuracy:.4}; saved {}",
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    if accuracy < a.min_accuracy {
        bail!("held-out accuracy {accuracy:.4} is below the required {}", a.min_accuracy);
    }
    Ok(())
}

fn load_eval_config(path: Option<&Path>) -> Result<EvalConfig> {
    match path {
        Some(p) => EvalConfig::from_file(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(EvalConfig::default()),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_eval_config(a.config.as_deref())?;
    let segmenter = a.segmenter.as_deref().map(Segmenter::load).transpose()?;
    let (scenes, background) = a.scenes.held_out(a.count, a.scene_seed)?;
    let report = evaluate_checkpoint(&a.ckpt, &scenes, &background, &cfg, segmenter.as_ref())?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        report.save(out)?;
    }
    Ok(())
}

fn edit(a: EditArgs) -> Result<()> {
    let manifest = a.data.as_deref().map(read_manifest).transpose()?;
    let editor = Editor::load(&a.ckpt, a.segmenter.as_deref(), manifest)?;
    let image = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let labels = fs::read(&a.labels).with_context(|| format!("reading {}", a.labels.display()))?;
    let (image, painted) = decode_inputs(&image, &labels)?;
    let out = editor.edit(&image, &painted, a.mode, a.scope)?;
    fs::write(&a.out, encode_rgb_png(&out.image)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("edited {} pixels; wrote {}", out.mask.count(), a.out.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let port = match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().with_context(|| format!("{PORT_ENV}={v:?} is not a port"))?,
        Err(_) => a.port,
    };
    let manifest = a.data.as_deref().map(read_manifest).transpose()?;
    let editor = Editor::load(&a.ckpt, a.segmenter.as_deref(), manifest)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(AppState::new(editor), port))?;
    Ok(())
}

/// Variants along `axis`, tagged with the names used in reports.
fn variants(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        Axis::Merge => [MergeMode::SumPoolScale, MergeMode::Concat, MergeMode::Product]
            .into_iter()
            .map(|m| {
                let mut c = base.clone();
                c.discriminator.merge = m;
                (m.as_str().to_string(), c)
            })
            .collect(),
        Axis::Scope => [SemanticsScope::Full, SemanticsScope::Bbox]
            .into_iter()
            .map(|s| (s.as_str().to_string(), TrainConfig { semantics_scope: s, ..base.clone() }))
            .collect(),
        Axis::Discriminator => [Architecture::Sesame, Architecture::PatchGan]
            .into_iter()
            .map(|arch| {
                let mut c = base.clone();
                c.discriminator.architecture = arch;
                (arch.as_str().to_string(), c)
            })
            .collect(),
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = load_train_config(a.config.as_deref())?;
    let scenes = SceneArgs { size: base.image_size, ..a.scenes };
    let source = scenes.source()?;
    let (held, background) = scenes.held_out(a.count, 10_000)?;
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for (tag, cfg) in variants(a.axis, &base) {
        let dir = a.out.join(&tag);
        let eval_cfg = EvalConfig { semantics_scope: cfg.semantics_scope, ..EvalConfig::default() };
        let out = train_loop(cfg, &source, Some(&dir), Some(a.steps), None)?;
        let ckpt = out.checkpoint.context("training wrote no checkpoint")?;
        let report = evaluate_checkpoint(&ckpt, &held, &background, &eval_cfg, None)?;
        report.save(&dir.join("report.json"))?;
        rows.push((tag, report));
    }
    println!("{:<16} {:>8} {:>10}", "variant", "SSIM", "FID");
    for (tag, r) in &rows {
        println!("{tag:<16} {:>8.4} {:>10.4}", r.ssim_masked, r.fid);
    }
    Ok(())
}
