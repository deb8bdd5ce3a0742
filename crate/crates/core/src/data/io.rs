//! PNG encoding of images, label maps, instance maps and masks, and the
//! on-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<stem>.png      8-bit RGB
//! <root>/labels/<stem>.png      8-bit gray, class indices
//! <root>/instances/<stem>.png   16-bit gray, instance ids
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage as Rgb8};

use super::{EditMask, InstanceMap, LabelMap, Manifest, RgbImage, Scene};
use crate::error::{Error, Result};

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = Rgb8::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8()).expect("buffer sized from image");
    encode(DynamicImage::ImageRgb8(buf))
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    RgbImage::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

pub fn encode_gray_png(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    let buf = GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::Shape("gray buffer size mismatch".into()))?;
    encode(DynamicImage::ImageLuma8(buf))
}

/// Decodes an 8-bit single-channel PNG, returning `(width, height, values)`.
/// Color inputs are rejected rather than converted, so class indices survive.
pub fn decode_gray_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    match image::load_from_memory_with_format(bytes, ImageFormat::Png)? {
        DynamicImage::ImageLuma8(g) => Ok((g.width() as usize, g.height() as usize, g.into_raw())),
        other => Err(Error::Shape(format!("expected 8-bit gray PNG, got {:?}", other.color()))),
    }
}

pub fn encode_labels_png(labels: &LabelMap) -> Result<Vec<u8>> {
    encode_gray_png(labels.width(), labels.height(), labels.pixels())
}

pub fn decode_labels_png(bytes: &[u8], num_classes: usize) -> Result<LabelMap> {
    let (w, h, v) = decode_gray_png(bytes)?;
    LabelMap::new(w, h, num_classes, v)
}

/// Mask as 8-bit gray, 255 for masked pixels.
pub fn encode_mask_png(mask: &EditMask) -> Result<Vec<u8>> {
    let v: Vec<u8> = mask.pixels().iter().map(|&m| m * 255).collect();
    encode_gray_png(mask.width(), mask.height(), &v)
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<EditMask> {
    let (w, h, v) = decode_gray_png(bytes)?;
    EditMask::new(w, h, v.into_iter().map(|x| u8::from(x >= 128)).collect())
}

pub fn encode_instances_png(instances: &InstanceMap) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(instances.width() as u32, instances.height() as u32, instances.pixels().to_vec())
            .expect("buffer sized from map");
    encode(DynamicImage::ImageLuma16(buf))
}

pub fn decode_instances_png(bytes: &[u8], labels: &LabelMap, foreground: BTreeSet<u8>) -> Result<InstanceMap> {
    let ids = match image::load_from_memory_with_format(bytes, ImageFormat::Png)? {
        DynamicImage::ImageLuma16(g) => g.into_raw(),
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u16::from).collect(),
        other => return Err(Error::Shape(format!("expected gray instance PNG, got {:?}", other.color()))),
    };
    InstanceMap::from_ids(labels, ids, foreground)
}

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    write(&root.join("manifest.json"), serde_json::to_string_pretty(manifest)?.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&read(&root.join("manifest.json"))?)?;
    m.validate()?;
    Ok(m)
}

pub fn write_scene(root: &Path, stem: &str, scene: &Scene) -> Result<()> {
    let file = format!("{stem}.png");
    write(&root.join("images").join(&file), &encode_rgb_png(&scene.image)?)?;
    write(&root.join("labels").join(&file), &encode_labels_png(&scene.labels)?)?;
    write(&root.join("instances").join(&file), &encode_instances_png(&scene.instances)?)
}

/// A dataset directory: manifest plus matching image/label/instance files.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub stems: Vec<String>,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = read_manifest(&root)?;
        let dir = root.join("images");
        let mut stems = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        Ok(Self { root, manifest, stems })
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Scene> {
        let file = format!("{}.png", self.stems[index]);
        let image = decode_rgb_png(&read(&self.root.join("images").join(&file))?)?;
        let labels = decode_labels_png(&read(&self.root.join("labels").join(&file))?, self.manifest.num_classes)?;
        if (labels.width(), labels.height()) != (image.width(), image.height()) {
            return Err(Error::Shape(format!("{file}: label map size differs from image")));
        }
        let instances = decode_instances_png(
            &read(&self.root.join("instances").join(&file))?,
            &labels,
            self.manifest.foreground_ids(),
        )?;
        Ok(Scene { image, labels, instances })
    }

    pub fn scenes(&self) -> Result<Vec<Scene>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
