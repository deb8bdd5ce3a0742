#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sesame::data::io::{encode_gray_png, encode_rgb_png};
use sesame::data::{synth_scene, Scene, SceneSpec};
use sesame::training::{train_loop, DataSource, TrainConfig};

pub const STEPS: u64 = 50;

/// A desk checkpoint after a short run, trained once per test binary.
pub fn checkpoint() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("fixture-{}", std::process::id()));
        let source = DataSource::Synthetic(SceneSpec::desk(64, 64));
        let out = train_loop(TrainConfig::desk(), &source, Some(&dir), Some(STEPS), None).unwrap();
        out.checkpoint.expect("checkpoint written")
    })
}

pub fn scene(seed: u64) -> Scene {
    synth_scene(&SceneSpec::desk(64, 64), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn image_png(scene: &Scene) -> Vec<u8> {
    encode_rgb_png(&scene.image).unwrap()
}

/// 64×64 paint layer with `class` over `[x0,x1)×[y0,y1)`.
pub fn paint(class: u8, x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<u8> {
    let mut v = vec![255u8; 64 * 64];
    for y in y0..y1 {
        for x in x0..x1 {
            v[y * 64 + x] = class;
        }
    }
    v
}

pub fn paint_png(values: &[u8]) -> Vec<u8> {
    encode_gray_png(64, 64, values).unwrap()
}
