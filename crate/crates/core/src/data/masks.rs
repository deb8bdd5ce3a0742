//! Mask samplers for the training and evaluation edit modes.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EditMask, InstanceMap, LabelMap};
use crate::error::{Error, Result};

/// Free-form mask parameters. Pixel ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeformParams {
    /// Probability of the box-plus-strokes branch; otherwise one class is dropped.
    pub box_probability: f64,
    pub box_size: (usize, usize),
    pub stroke_count: (usize, usize),
    pub stroke_vertices: (usize, usize),
    pub stroke_width: (usize, usize),
    pub stroke_step: (usize, usize),
}

impl Default for FreeformParams {
    fn default() -> Self {
        Self {
            box_probability: 0.7,
            box_size: (12, 32),
            stroke_count: (1, 3),
            stroke_vertices: (4, 12),
            stroke_width: (2, 8),
            stroke_step: (4, 14),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskBranch {
    BoxAndStrokes,
    ClassDrop(u8),
}

fn stamp_disc(mask: &mut EditMask, cx: f32, cy: f32, radius: f32) {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let r = radius.ceil() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx.round() as isize + dx, cy.round() as isize + dy);
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            if ((dx * dx + dy * dy) as f32) <= radius * radius {
                mask.set(x as usize, y as usize);
            }
        }
    }
}

fn draw_stroke(mask: &mut EditMask, rng: &mut impl Rng, params: &FreeformParams) {
    let (w, h) = (mask.width() as f32, mask.height() as f32);
    let vertices = rng.random_range(params.stroke_vertices.0..=params.stroke_vertices.1);
    let radius = rng.random_range(params.stroke_width.0..=params.stroke_width.1) as f32 / 2.0;
    let mut x = rng.random_range(0.0..w);
    let mut y = rng.random_range(0.0..h);
    stamp_disc(mask, x, y, radius);
    for _ in 1..vertices {
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let len = rng.random_range(params.stroke_step.0..=params.stroke_step.1) as f32;
        let nx = (x + len * angle.cos()).clamp(0.0, w - 1.0);
        let ny = (y + len * angle.sin()).clamp(0.0, h - 1.0);
        let steps = (len.ceil() as usize).max(1);
        for s in 1..=steps {
            let t = s as f32 / steps as f32;
            stamp_disc(mask, x + (nx - x) * t, y + (ny - y) * t, radius);
        }
        x = nx;
        y = ny;
    }
}

/// Free-form training mask.
///
/// With probability `box_probability` the mask is one random box united with
/// random-walk strokes; otherwise it is the full support of a class chosen
/// uniformly among those present in `labels`.
pub fn sample_freeform_mask(labels: &LabelMap, rng: &mut impl Rng, params: &FreeformParams) -> (EditMask, MaskBranch) {
    let (w, h) = (labels.width(), labels.height());
    if rng.random_bool(params.box_probability.clamp(0.0, 1.0)) {
        let bw = rng.random_range(params.box_size.0..=params.box_size.1).clamp(1, w);
        let bh = rng.random_range(params.box_size.0..=params.box_size.1).clamp(1, h);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let mut mask = EditMask::rect(w, h, x0, y0, x0 + bw, y0 + bh);
        let strokes = rng.random_range(params.stroke_count.0..=params.stroke_count.1);
        for _ in 0..strokes {
            draw_stroke(&mut mask, rng, params);
        }
        (mask, MaskBranch::BoxAndStrokes)
    } else {
        let present: Vec<u8> = labels.classes_present().into_iter().collect();
        let class = present[rng.random_range(0..present.len())];
        (labels.support(class), MaskBranch::ClassDrop(class))
    }
}

/// Bounding box (grown by `margin`, clipped to the canvas) of a uniformly
/// chosen foreground instance, with that instance's class.
pub fn sample_bbox_addition(instances: &InstanceMap, rng: &mut impl Rng, margin: usize) -> Result<(EditMask, u8)> {
    let candidates = instances.foreground_instances();
    if candidates.is_empty() {
        return Err(Error::Sampling("no foreground instance to add".into()));
    }
    let id = candidates[rng.random_range(0..candidates.len())];
    let (x0, y0, x1, y1) = instances.support(id).bbox().expect("present instance has pixels");
    let (w, h) = (instances.width(), instances.height());
    let mask = EditMask::rect(
        w,
        h,
        x0.saturating_sub(margin),
        y0.saturating_sub(margin),
        (x1 + margin).min(w),
        (y1 + margin).min(h),
    );
    Ok((mask, instances.class_of(id).expect("validated instance")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalParams {
    /// Inclusive edge-length range of the rectangle, in pixels.
    pub size: (usize, usize),
    pub max_attempts: usize,
}

impl Default for RemovalParams {
    fn default() -> Self {
        Self { size: (12, 32), max_attempts: 100 }
    }
}

/// Random rectangle that overlaps at least one pixel of a background class.
pub fn sample_removal_region(
    labels: &LabelMap,
    background_classes: &[u8],
    rng: &mut impl Rng,
    params: &RemovalParams,
) -> Result<EditMask> {
    let (w, h) = (labels.width(), labels.height());
    let bg: BTreeSet<u8> = background_classes.iter().copied().collect();
    let support = EditMask::new(w, h, labels.pixels().iter().map(|l| u8::from(bg.contains(l))).collect())?;
    if support.is_empty() {
        return Err(Error::Sampling("scene has no background pixels".into()));
    }
    for _ in 0..params.max_attempts {
        let bw = rng.random_range(params.size.0..=params.size.1).clamp(1, w);
        let bh = rng.random_range(params.size.0..=params.size.1).clamp(1, h);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let rect = EditMask::rect(w, h, x0, y0, x0 + bw, y0 + bh);
        if rect.intersects(&support) {
            return Ok(rect);
        }
    }
    Err(Error::Sampling(format!("no background-overlapping rectangle after {} attempts", params.max_attempts)))
}

/// Replacement edit: the outline of a uniformly chosen foreground instance,
/// relabelled to a different foreground class.
pub fn sample_replacement(
    instances: &InstanceMap,
    labels: &LabelMap,
    rng: &mut impl Rng,
) -> Result<(EditMask, LabelMap)> {
    let candidates = instances.foreground_instances();
    if candidates.is_empty() {
        return Err(Error::Sampling("no foreground instance to replace".into()));
    }
    let id = candidates[rng.random_range(0..candidates.len())];
    let current = instances.class_of(id).expect("validated instance");
    let choices: Vec<u8> = instances.foreground_classes().iter().copied().filter(|&c| c != current).collect();
    if choices.is_empty() {
        return Err(Error::Sampling("no alternative foreground class".into()));
    }
    let target = choices[rng.random_range(0..choices.len())];
    let mask = instances.support(id);
    let edited = labels.with_masked(&mask, |_| target)?;
    Ok((mask, edited))
}

/// Relabels masked non-background pixels with the class of the nearest
/// unmasked background pixel (4-connected distance). If no such pixel exists,
/// the first background class is used.
pub fn relabel_to_background(labels: &LabelMap, mask: &EditMask, background_classes: &[u8]) -> Result<LabelMap> {
    let Some(&fallback) = background_classes.first() else {
        return Err(Error::Config("no background classes configured".into()));
    };
    mask.check_dims(labels.width(), labels.height())?;
    let bg: BTreeSet<u8> = background_classes.iter().copied().collect();
    let (w, h) = (labels.width(), labels.height());
    let mut nearest: Vec<Option<u8>> = vec![None; w * h];
    let mut queue = VecDeque::new();
    for (i, &l) in labels.pixels().iter().enumerate() {
        if mask.pixels()[i] == 0 && bg.contains(&l) {
            nearest[i] = Some(l);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let class = nearest[i];
        let mut visit = |j: usize| {
            if nearest[j].is_none() {
                nearest[j] = class;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    labels.with_masked(mask, |i| {
        let l = labels.pixels()[i];
        if bg.contains(&l) {
            l
        } else {
            nearest[i].unwrap_or(fallback)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn full_canvas_box_without_strokes_is_all_ones() {
        let labels = LabelMap::filled(16, 16, 3, 1).unwrap();
        let params =
            FreeformParams { box_probability: 1.0, box_size: (16, 16), stroke_count: (0, 0), ..Default::default() };
        let (mask, branch) = sample_freeform_mask(&labels, &mut rng(0), &params);
        assert_eq!(branch, MaskBranch::BoxAndStrokes);
        assert_eq!(mask, EditMask::full(16, 16));
    }

    #[test]
    fn class_drop_takes_one_class_support() {
        let pixels: Vec<u8> = (0..64).map(|i| if i % 3 == 0 { 5 } else { 1 }).collect();
        let labels = LabelMap::new(8, 8, 6, pixels).unwrap();
        let params = FreeformParams { box_probability: 0.0, ..Default::default() };
        let mut seen = BTreeSet::new();
        for seed in 0..50 {
            let (mask, branch) = sample_freeform_mask(&labels, &mut rng(seed), &params);
            let MaskBranch::ClassDrop(c) = branch else { panic!("box branch at p=0") };
            assert!(c == 1 || c == 5);
            assert_eq!(mask, labels.support(c));
            seen.insert(c);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn single_class_drop_covers_everything() {
        let labels = LabelMap::filled(8, 8, 2, 0).unwrap();
        let params = FreeformParams { box_probability: 0.0, ..Default::default() };
        let (mask, _) = sample_freeform_mask(&labels, &mut rng(3), &params);
        assert_eq!(mask, EditMask::full(8, 8));
    }

    #[test]
    fn freeform_masks_are_nonempty() {
        let spec = SceneSpec::desk(64, 64);
        let mut r = rng(5);
        for _ in 0..200 {
            let scene = synth_scene(&spec, &mut r).unwrap();
            let (mask, _) = sample_freeform_mask(&scene.labels, &mut r, &FreeformParams::default());
            assert!(!mask.is_empty());
        }
    }

    fn square_instance(w: usize, x0: usize, y0: usize, side: usize) -> InstanceMap {
        let mut ids = vec![0u16; w * w];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                ids[y * w + x] = 1;
            }
        }
        InstanceMap::new(w, w, ids, BTreeMap::from([(1, 4)]), BTreeSet::from([4])).unwrap()
    }

    #[test]
    fn addition_box_is_tight() {
        let inst = square_instance(12, 2, 2, 4);
        let (mask, class) = sample_bbox_addition(&inst, &mut rng(0), 0).unwrap();
        assert_eq!(class, 4);
        assert_eq!(mask, EditMask::rect(12, 12, 2, 2, 6, 6));
    }

    #[test]
    fn addition_margin_clips_at_border() {
        let inst = square_instance(12, 0, 8, 4);
        let (mask, _) = sample_bbox_addition(&inst, &mut rng(0), 2).unwrap();
        assert_eq!(mask, EditMask::rect(12, 12, 0, 6, 6, 12));
    }

    #[test]
    fn addition_without_instances_fails() {
        let inst = InstanceMap::new(8, 8, vec![0; 64], BTreeMap::new(), BTreeSet::from([4])).unwrap();
        assert!(matches!(sample_bbox_addition(&inst, &mut rng(0), 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn removal_on_pure_background_accepts_first_draw() {
        let labels = LabelMap::filled(16, 16, 4, 2).unwrap();
        let params = RemovalParams { size: (4, 8), max_attempts: 1 };
        assert!(sample_removal_region(&labels, &[2], &mut rng(0), &params).is_ok());
    }

    #[test]
    fn removal_without_background_fails() {
        let labels = LabelMap::filled(16, 16, 4, 3).unwrap();
        let err = sample_removal_region(&labels, &[0, 1], &mut rng(0), &RemovalParams::default());
        assert!(matches!(err, Err(Error::Sampling(_))));
    }

    #[test]
    fn relabel_uses_nearest_background() {
        // Left half class 0, right half class 1 (both background), a foreground
        // blob of class 3 straddling the middle.
        let mut pixels: Vec<u8> = (0..100).map(|i| if i % 10 < 5 { 0 } else { 1 }).collect();
        for y in 3..6 {
            for x in 3..7 {
                pixels[y * 10 + x] = 3;
            }
        }
        let labels = LabelMap::new(10, 10, 4, pixels).unwrap();
        let mask = labels.support(3);
        let out = relabel_to_background(&labels, &mask, &[0, 1]).unwrap();
        assert_eq!(out.get(3, 4), 0);
        assert_eq!(out.get(6, 4), 1);
        assert!(out.pixels().iter().all(|&l| l < 2));
    }

    #[test]
    fn replacement_changes_class_inside_outline_only() {
        let spec = SceneSpec { object_count: (2, 2), ..SceneSpec::desk(64, 64) };
        let scene = synth_scene(&spec, &mut rng(4)).unwrap();
        let (mask, edited) = sample_replacement(&scene.instances, &scene.labels, &mut rng(1)).unwrap();
        for (i, &m) in mask.pixels().iter().enumerate() {
            if m == 0 {
                assert_eq!(edited.pixels()[i], scene.labels.pixels()[i]);
            } else {
                assert_ne!(edited.pixels()[i], scene.labels.pixels()[i]);
                assert!(spec.object_ids().contains(&edited.pixels()[i]));
            }
        }
    }
}
