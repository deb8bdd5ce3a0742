//! Procedural street-like scenes: textured background strata with flat-shaded
//! foreground objects, rendered together with their label and instance maps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_size, from_byte, InstanceMap, LabelMap, RgbImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Rect,
    Ellipse,
    Triangle,
    Diamond,
}

impl ObjectShape {
    /// Whether the unit-square point `(u, v)` lies inside the shape.
    fn contains(&self, u: f32, v: f32) -> bool {
        match self {
            ObjectShape::Rect => true,
            ObjectShape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ObjectShape::Triangle => (u - 0.5).abs() <= 0.5 * v,
            ObjectShape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Background,
    Foreground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ObjectShape>,
}

/// Scene generator configuration.
///
/// Background classes are stacked top to bottom in the listed order; a
/// random contiguous run of at least two of them appears in each scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub background: Vec<ClassStyle>,
    pub objects: Vec<ClassStyle>,
    pub object_count: (usize, usize),
    pub object_size: (usize, usize),
}

impl SceneSpec {
    /// Eight-class 64×64 configuration: four background strata and four object shapes.
    pub fn desk(width: usize, height: usize) -> Self {
        let bg = |id, name: &str, color| ClassStyle { id, name: name.into(), color, shape: None };
        let fg = |id, name: &str, color, shape| ClassStyle { id, name: name.into(), color, shape: Some(shape) };
        Self {
            width,
            height,
            num_classes: 8,
            background: vec![
                bg(0, "sky", [110, 160, 225]),
                bg(1, "vegetation", [60, 135, 55]),
                bg(2, "ground", [150, 115, 80]),
                bg(3, "road", [95, 95, 100]),
            ],
            objects: vec![
                fg(4, "car", [205, 40, 40], ObjectShape::Rect),
                fg(5, "person", [240, 200, 60], ObjectShape::Ellipse),
                fg(6, "tree", [20, 80, 30], ObjectShape::Triangle),
                fg(7, "sign", [250, 250, 250], ObjectShape::Diamond),
            ],
            object_count: (1, 3),
            object_size: (width / 8, width * 5 / 16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_size(self.width, self.height)?;
        if self.background.is_empty() || self.objects.is_empty() {
            return Err(Error::Config("scene needs background and object classes".into()));
        }
        let ids: Vec<u8> = self.background.iter().chain(&self.objects).map(|c| c.id).collect();
        let unique: BTreeSet<u8> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::Config("class palettes must be disjoint".into()));
        }
        if ids.iter().any(|&id| id as usize >= self.num_classes) {
            return Err(Error::Config("class id exceeds the class count".into()));
        }
        if self.objects.iter().any(|o| o.shape.is_none()) {
            return Err(Error::Config("object classes need a shape".into()));
        }
        let (lo, hi) = self.object_size;
        if lo < 2 || lo > hi || self.object_count.0 > self.object_count.1 {
            return Err(Error::Config("invalid object size or count range".into()));
        }
        Ok(())
    }

    pub fn background_ids(&self) -> Vec<u8> {
        self.background.iter().map(|c| c.id).collect()
    }

    pub fn object_ids(&self) -> BTreeSet<u8> {
        self.objects.iter().map(|c| c.id).collect()
    }

    pub fn manifest(&self) -> Manifest {
        let mut classes: Vec<ManifestClass> = self
            .background
            .iter()
            .map(|c| (c, ClassKind::Background))
            .chain(self.objects.iter().map(|c| (c, ClassKind::Foreground)))
            .map(|(c, kind)| ManifestClass { id: c.id, name: c.name.clone(), color: c.color, kind })
            .collect();
        classes.sort_by_key(|c| c.id);
        Manifest { num_classes: self.num_classes, classes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
    pub kind: ClassKind,
}

/// Dataset-level class table: names, palette and background/foreground split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub classes: Vec<ManifestClass>,
}

impl Manifest {
    pub fn background_ids(&self) -> Vec<u8> {
        self.ids_of(ClassKind::Background)
    }

    pub fn foreground_ids(&self) -> BTreeSet<u8> {
        self.ids_of(ClassKind::Foreground).into_iter().collect()
    }

    fn ids_of(&self, kind: ClassKind) -> Vec<u8> {
        self.classes.iter().filter(|c| c.kind == kind).map(|c| c.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u8> = self.classes.iter().map(|c| c.id).collect();
        if ids.len() != self.classes.len() || ids.iter().any(|&i| i as usize >= self.num_classes) {
            return Err(Error::Config("manifest class ids must be unique and below num_classes".into()));
        }
        Ok(())
    }
}

/// A rendered scene with aligned label and instance maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub instances: InstanceMap,
}

/// Smooth value noise in roughly `[-1, 1]` on an 8-pixel lattice.
struct ValueNoise {
    cell: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let cell = 8;
        let cols = width / cell + 2;
        let rows = height / cell + 2;
        let values = (0..cols * rows).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self { cell, cols, values }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let fx = (x % self.cell) as f32 / self.cell as f32;
        let fy = (y % self.cell) as f32 / self.cell as f32;
        let v = |cx: usize, cy: usize| self.values[cy * self.cols + cx];
        let top = v(gx, gy) * (1.0 - fx) + v(gx + 1, gy) * fx;
        let bottom = v(gx, gy + 1) * (1.0 - fx) + v(gx + 1, gy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn shade(color: [u8; 3], delta: f32) -> [u8; 3] {
    color.map(|c| (c as f32 + delta).round().clamp(0.0, 255.0) as u8)
}

/// Renders one scene. Output is a pure function of `spec` and the RNG state.
pub fn synth_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rgb = vec![[0u8; 3]; w * h];
    let mut labels = vec![0u8; w * h];
    let mut ids = vec![0u16; w * h];

    // Background: a contiguous run of strata separated by wavy boundaries.
    let n_bg = spec.background.len();
    let run = if n_bg >= 2 { rng.random_range(2..=n_bg) } else { 1 };
    let first = rng.random_range(0..=n_bg - run);
    let strata = &spec.background[first..first + run];
    let mut cuts: Vec<f32> = (0..run - 1).map(|_| rng.random_range(0.15f32..0.85)).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let waves: Vec<(f32, f32, f32)> = cuts
        .iter()
        .map(|_| {
            (
                rng.random_range(0.0f32..0.08) * h as f32,
                rng.random_range(0.05f32..0.25),
                rng.random_range(0.0f32..std::f32::consts::TAU),
            )
        })
        .collect();
    let noise = ValueNoise::new(w, h, rng);
    let tints: Vec<f32> = strata.iter().map(|_| rng.random_range(-12.0f32..12.0)).collect();
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for (cut, (amp, freq, phase)) in cuts.iter().zip(&waves) {
                let boundary = cut * h as f32 + amp * (freq * x as f32 + phase).sin();
                if y as f32 >= boundary {
                    k += 1;
                }
            }
            let style = &strata[k];
            let gradient = 24.0 * (y as f32 / h as f32 - 0.5);
            let delta = tints[k] + gradient + 18.0 * noise.at(x, y);
            rgb[y * w + x] = shade(style.color, delta);
            labels[y * w + x] = style.id;
        }
    }

    // Foreground: non-overlapping objects with a one-pixel gap.
    let count = rng.random_range(spec.object_count.0..=spec.object_count.1);
    let mut occupied = vec![false; w * h];
    let mut instance_classes = BTreeMap::new();
    for index in 0..count {
        let style = &spec.objects[rng.random_range(0..spec.objects.len())];
        let shape = style.shape.expect("validated");
        let mut placed = false;
        for _ in 0..200 {
            let ow = rng.random_range(spec.object_size.0..=spec.object_size.1).min(w);
            let oh = rng.random_range(spec.object_size.0..=spec.object_size.1).min(h);
            let x0 = rng.random_range(0..=w - ow);
            let y0 = rng.random_range(0..=h - oh);
            let footprint: Vec<usize> = (y0..y0 + oh)
                .flat_map(|y| (x0..x0 + ow).map(move |x| (x, y)))
                .filter(|&(x, y)| {
                    let u = (x - x0) as f32 / (ow - 1).max(1) as f32;
                    let v = (y - y0) as f32 / (oh - 1).max(1) as f32;
                    shape.contains(u, v)
                })
                .map(|(x, y)| y * w + x)
                .collect();
            let clear = footprint.iter().all(|&i| {
                let (x, y) = (i % w, i / w);
                (y.saturating_sub(1)..(y + 2).min(h))
                    .all(|yy| (x.saturating_sub(1)..(x + 2).min(w)).all(|xx| !occupied[yy * w + xx]))
            });
            if footprint.is_empty() || !clear {
                continue;
            }
            let id = index as u16 + 1;
            for &i in &footprint {
                let y = i / w;
                let delta = 30.0 * (0.5 - (y - y0) as f32 / oh as f32);
                rgb[i] = shade(style.color, delta);
                labels[i] = style.id;
                ids[i] = id;
                occupied[i] = true;
            }
            instance_classes.insert(id, style.id);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement { requested: count, width: w, height: h });
        }
    }

    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = from_byte(px[c]);
        }
    }
    Ok(Scene {
        image: RgbImage::new(w, h, data)?,
        labels: LabelMap::new(w, h, spec.num_classes, labels)?,
        instances: InstanceMap::new(w, h, ids, instance_classes, spec.object_ids())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn render(spec: &SceneSpec, seed: u64) -> Scene {
        synth_scene(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn deterministic_for_a_seed() {
        let spec = SceneSpec::desk(64, 64);
        assert_eq!(render(&spec, 9), render(&spec, 9));
        assert_ne!(render(&spec, 9).image, render(&spec, 10).image);
    }

    #[test]
    fn zero_objects_means_no_instances() {
        let spec = SceneSpec { object_count: (0, 0), ..SceneSpec::desk(64, 64) };
        let s = render(&spec, 1);
        assert!(s.instances.pixels().iter().all(|&id| id == 0));
        let bg: BTreeSet<u8> = spec.background_ids().into_iter().collect();
        assert!(s.labels.pixels().iter().all(|l| bg.contains(l)));
    }

    #[test]
    fn three_objects_have_three_constant_class_ids() {
        let spec = SceneSpec { object_count: (3, 3), ..SceneSpec::desk(64, 64) };
        for seed in 0..20 {
            let s = render(&spec, seed);
            let mut class_of: BTreeMap<u16, BTreeSet<u8>> = BTreeMap::new();
            for (&id, &c) in s.instances.pixels().iter().zip(s.labels.pixels()) {
                if id != 0 {
                    class_of.entry(id).or_default().insert(c);
                } else {
                    assert!(spec.background_ids().contains(&c));
                }
            }
            assert_eq!(class_of.len(), 3);
            for (id, classes) in class_of {
                assert_eq!(classes.len(), 1, "instance {id}");
                assert_eq!(s.instances.class_of(id), classes.into_iter().next());
            }
        }
    }

    #[test]
    fn overcrowded_canvas_is_a_placement_error() {
        let spec = SceneSpec { object_count: (40, 40), object_size: (12, 14), ..SceneSpec::desk(32, 32) };
        let err = synth_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Placement { requested: 40, .. }));
    }

    #[test]
    fn overlapping_palettes_rejected() {
        let mut spec = SceneSpec::desk(64, 64);
        spec.objects[0].id = 0;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_lists_every_class_once() {
        let m = SceneSpec::desk(64, 64).manifest();
        assert_eq!(m.classes.len(), 8);
        assert_eq!(m.background_ids(), vec![0, 1, 2, 3]);
        m.validate().unwrap();
    }
}
