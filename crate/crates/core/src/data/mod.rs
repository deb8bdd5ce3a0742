//! Label maps, masks, procedural scenes and edit-sample construction.

mod batch;
pub mod io;
pub mod masks;
mod sample;
pub mod scene;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::EditBatch;
pub use masks::{
    relabel_to_background, sample_bbox_addition, sample_freeform_mask, sample_removal_region, sample_replacement,
    FreeformParams, MaskBranch, RemovalParams,
};
pub use sample::{make_edit_sample, SampleRequest};
pub use scene::{synth_scene, ClassKind, ClassStyle, Manifest, ObjectShape, Scene, SceneSpec};

/// Smallest supported edge length for label maps and images.
pub const MIN_EDGE: usize = 8;

fn check_size(width: usize, height: usize) -> Result<()> {
    if width < MIN_EDGE || height < MIN_EDGE {
        return Err(Error::Shape(format!("{width}x{height} is below the minimum {MIN_EDGE}x{MIN_EDGE}")));
    }
    Ok(())
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    num_classes: usize,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, num_classes: usize, pixels: Vec<u8>) -> Result<Self> {
        check_size(width, height)?;
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::Config(format!("unsupported class count {num_classes}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{} labels for a {width}x{height} map", pixels.len())));
        }
        if let Some(&v) = pixels.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { value: v as usize, num_classes });
        }
        Ok(Self { width, height, num_classes, pixels })
    }

    pub fn filled(width: usize, height: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(width, height, num_classes, vec![class; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.pixels.iter().copied().collect()
    }

    /// Mask of the pixels labelled `class`.
    pub fn support(&self, class: u8) -> EditMask {
        EditMask {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| u8::from(v == class)).collect(),
        }
    }

    /// Copy with the pixels selected by `mask` replaced by `replacement[i]`.
    pub fn with_masked(&self, mask: &EditMask, replacement: impl Fn(usize) -> u8) -> Result<Self> {
        mask.check_dims(self.width, self.height)?;
        let pixels = self
            .pixels
            .iter()
            .zip(mask.pixels())
            .enumerate()
            .map(|(i, (&v, &m))| if m == 1 { replacement(i) } else { v })
            .collect();
        Self::new(self.width, self.height, self.num_classes, pixels)
    }
}

/// One-hot class planes, `C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLayout {
    width: usize,
    height: usize,
    num_classes: usize,
    planes: Vec<f32>,
}

impl SemanticLayout {
    /// One-hot encodes raw indices; rejects any value `>= num_classes`.
    pub fn from_indices(width: usize, height: usize, num_classes: usize, indices: &[u8]) -> Result<Self> {
        if indices.len() != width * height {
            return Err(Error::Shape(format!("{} indices for a {width}x{height} layout", indices.len())));
        }
        let plane = width * height;
        let mut planes = vec![0.0f32; num_classes * plane];
        for (i, &v) in indices.iter().enumerate() {
            if v as usize >= num_classes {
                return Err(Error::LabelOutOfRange { value: v as usize, num_classes });
            }
            planes[v as usize * plane + i] = 1.0;
        }
        Ok(Self { width, height, num_classes, planes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn value(&self, class: usize, x: usize, y: usize) -> f32 {
        self.planes[(class * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax; the first maximal class wins ties (all-zero columns map to 0).
    pub fn argmax(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.planes[c * plane + i] > self.planes[best * plane + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Copy with every class column zeroed where `mask` is 0.
    pub fn restricted_to(&self, mask: &EditMask) -> Result<Self> {
        mask.check_dims(self.width, self.height)?;
        let plane = self.width * self.height;
        let mut planes = self.planes.clone();
        for (i, &m) in mask.pixels().iter().enumerate() {
            if m == 0 {
                for c in 0..self.num_classes {
                    planes[c * plane + i] = 0.0;
                }
            }
        }
        Ok(Self { planes, ..self.clone() })
    }
}

/// One-hot encoding of a validated label map.
pub fn one_hot_encode(labels: &LabelMap) -> SemanticLayout {
    SemanticLayout::from_indices(labels.width, labels.height, labels.num_classes, &labels.pixels)
        .expect("label map invariants guarantee in-range indices")
}

/// Binary mask; 1 marks a pixel to synthesise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl EditMask {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{} mask values for {width}x{height}", pixels.len())));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![1; width * height] }
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`, clipped to the canvas.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut m = Self::zeros(width, height);
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                m.pixels[y * width + x] = 1;
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.pixels[y * self.width + x] = 1;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &EditMask) -> Result<EditMask> {
        other.check_dims(self.width, self.height)?;
        Ok(Self { pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| a | b).collect(), ..self.clone() })
    }

    pub fn intersects(&self, other: &EditMask) -> bool {
        self.pixels.iter().zip(&other.pixels).any(|(a, b)| a & b == 1)
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bounds = Some(match bounds {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bounds
    }

    pub(crate) fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::Shape(format!("mask is {}x{}, expected {width}x{height}", self.width, self.height)));
        }
        Ok(())
    }
}

/// Per-pixel instance ids (0 = no instance) with the class of every instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
    classes: BTreeMap<u16, u8>,
    foreground_classes: BTreeSet<u8>,
}

impl InstanceMap {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u16>,
        classes: BTreeMap<u16, u8>,
        foreground_classes: BTreeSet<u8>,
    ) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{} instance ids for {width}x{height}", pixels.len())));
        }
        if let Some(id) = pixels.iter().find(|&&id| id != 0 && !classes.contains_key(&id)) {
            return Err(Error::Config(format!("instance {id} has no class")));
        }
        Ok(Self { width, height, pixels, classes, foreground_classes })
    }

    /// Derives instances from a label map and instance-id image, checking that
    /// each id covers a single class.
    pub fn from_ids(labels: &LabelMap, ids: Vec<u16>, foreground_classes: BTreeSet<u8>) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for (&id, &class) in ids.iter().zip(labels.pixels()) {
            if id == 0 {
                continue;
            }
            if let Some(prev) = classes.insert(id, class) {
                if prev != class {
                    return Err(Error::Config(format!("instance {id} spans classes {prev} and {class}")));
                }
            }
        }
        Self::new(labels.width(), labels.height(), ids, classes, foreground_classes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn class_of(&self, id: u16) -> Option<u8> {
        self.classes.get(&id).copied()
    }

    pub fn foreground_classes(&self) -> &BTreeSet<u8> {
        &self.foreground_classes
    }

    /// Ids present in the map whose class is a foreground class, ascending.
    pub fn foreground_instances(&self) -> Vec<u16> {
        let present: BTreeSet<u16> = self.pixels.iter().copied().filter(|&id| id != 0).collect();
        present
            .into_iter()
            .filter(|id| self.classes.get(id).is_some_and(|c| self.foreground_classes.contains(c)))
            .collect()
    }

    pub fn support(&self, id: u16) -> EditMask {
        EditMask {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| u8::from(v == id)).collect(),
        }
    }
}

/// RGB image stored channel-major (`3 × H × W`) with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Interleaved 8-bit RGB with the canonical `[-1,1] → [0,255]` mapping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(to_byte(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let plane = width * height;
        if bytes.len() != 3 * plane {
            return Err(Error::Shape(format!("{} bytes for {width}x{height} RGB", bytes.len())));
        }
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = from_byte(bytes[3 * i + c]);
            }
        }
        Ok(Self { width, height, data })
    }
}

pub fn from_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_byte(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Addition,
    Removal,
    Replace,
    Freeform,
}

impl EditMode {
    pub const ALL: [EditMode; 4] = [EditMode::Addition, EditMode::Removal, EditMode::Replace, EditMode::Freeform];

    pub fn as_str(&self) -> &'static str {
        match self {
            EditMode::Addition => "addition",
            EditMode::Removal => "removal",
            EditMode::Replace => "replace",
            EditMode::Freeform => "freeform",
        }
    }
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EditMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown edit mode {s:?}")))
    }
}

/// Whether the generator sees the whole scene layout or only the edited region's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticsScope {
    #[default]
    Full,
    Bbox,
}

impl SemanticsScope {
    pub fn as_str(&self) -> &'static str {
        match self {
            SemanticsScope::Full => "full",
            SemanticsScope::Bbox => "bbox",
        }
    }
}

impl std::str::FromStr for SemanticsScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SemanticsScope::Full),
            "bbox" => Ok(SemanticsScope::Bbox),
            _ => Err(Error::Config(format!("unknown semantics scope {s:?}"))),
        }
    }
}

/// Generator inputs for one edit, plus the ground truth they were derived from.
#[derive(Debug, Clone)]
pub struct EditSample {
    pub image_real: RgbImage,
    pub image_masked: RgbImage,
    pub mask: EditMask,
    pub semantics: SemanticLayout,
    /// Label map the semantics were built from (before any scope restriction).
    pub target_labels: LabelMap,
    pub mode: EditMode,
    pub scope: SemanticsScope,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_single_pixel_vector() {
        let s = SemanticLayout::from_indices(1, 1, 4, &[2]).unwrap();
        assert_eq!(s.planes(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_all_zero_map() {
        let s = SemanticLayout::from_indices(2, 2, 3, &[0; 4]).unwrap();
        assert_eq!(&s.planes()[..4], &[1.0; 4]);
        assert!(s.planes()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(matches!(
            SemanticLayout::from_indices(2, 1, 3, &[0, 3]),
            Err(Error::LabelOutOfRange { value: 3, num_classes: 3 })
        ));
        assert!(matches!(LabelMap::new(8, 8, 4, vec![4; 64]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn label_map_rejects_tiny_maps() {
        assert!(matches!(LabelMap::new(4, 8, 2, vec![0; 32]), Err(Error::Shape(_))));
    }

    #[test]
    fn byte_mapping_round_trips_every_value() {
        for v in 0..=255u8 {
            assert_eq!(to_byte(from_byte(v)), v);
        }
    }

    #[test]
    fn bbox_is_tight() {
        let m = EditMask::rect(10, 10, 2, 3, 6, 5);
        assert_eq!(m.bbox(), Some((2, 3, 6, 5)));
        assert_eq!(m.count(), 8);
        assert_eq!(EditMask::zeros(10, 10).bbox(), None);
    }

    proptest! {
        #[test]
        fn one_hot_argmax_round_trip(
            (w, h, c, pixels) in (8usize..20, 8usize..20, 1usize..12)
                .prop_flat_map(|(w, h, c)| (Just(w), Just(h), Just(c), proptest::collection::vec(0..c as u8, w * h)))
        ) {
            let labels = LabelMap::new(w, h, c, pixels.clone()).unwrap();
            let s = one_hot_encode(&labels);
            prop_assert_eq!(s.argmax(), pixels);
            for i in 0..w * h {
                let col: f32 = (0..c).map(|k| s.planes()[k * w * h + i]).sum();
                prop_assert_eq!(col, 1.0);
            }
        }
    }
}
