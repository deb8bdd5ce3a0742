//! One edit from a painted label layer: shared by the `edit` verb and `/edit`.

use std::path::Path;

use sesame::checkpoint::file_digest;
use sesame::data::{
    io::{decode_gray_png, decode_rgb_png},
    make_edit_sample, EditBatch, EditMask, EditMode, LabelMap, Manifest, RgbImage, SampleRequest, SceneSpec,
    SemanticsScope,
};
use sesame::generator::{composite_image, Generator};
use sesame::metrics::{tensor_to_images, Segment, Segmenter};
use sesame::training::load_generator;

/// Painted-layer value for pixels the user did not touch.
pub const UNTOUCHED: u8 = 255;
pub const MAX_SIDE: usize = 1024;

#[derive(Debug)]
pub enum EditError {
    /// The request itself is unusable; `field` names the offending input.
    Invalid {
        field: &'static str,
        message: String,
    },
    Internal(sesame::Error),
}

impl std::fmt::Display for EditError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EditError::Invalid { field, message } => write!(f, "{field}: {message}"),
            EditError::Internal(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EditError {}

impl From<sesame::Error> for EditError {
    fn from(e: sesame::Error) -> Self {
        EditError::Internal(e)
    }
}

fn invalid(field: &'static str, message: impl Into<String>) -> EditError {
    EditError::Invalid { field, message: message.into() }
}

pub struct EditOutput {
    pub image: RgbImage,
    pub mask: EditMask,
}

/// A loaded generator with what it needs to turn paint into semantics.
pub struct Editor {
    generator: Generator,
    segmenter: Option<Segmenter>,
    manifest: Manifest,
    version: String,
}

impl Editor {
    pub fn new(
        generator: Generator,
        segmenter: Option<Segmenter>,
        manifest: Manifest,
        version: String,
    ) -> sesame::Result<Self> {
        let c = generator.config().num_classes;
        if manifest.num_classes != c {
            return Err(sesame::Error::ConfigMismatch(format!(
                "manifest lists {} classes, generator expects {c}",
                manifest.num_classes
            )));
        }
        if let Some(s) = &segmenter {
            if s.num_classes() != c {
                return Err(sesame::Error::ConfigMismatch(format!(
                    "segmenter predicts {} classes, generator expects {c}",
                    s.num_classes()
                )));
            }
        }
        Ok(Self { generator, segmenter, manifest, version })
    }

    /// Loads a checkpoint. Without a manifest, the default synthetic one is
    /// used when its class count fits.
    pub fn load(checkpoint: &Path, segmenter: Option<&Path>, manifest: Option<Manifest>) -> sesame::Result<Self> {
        let generator = load_generator(checkpoint)?;
        let segmenter = segmenter.map(Segmenter::load).transpose()?;
        let manifest = manifest.unwrap_or_else(|| SceneSpec::desk(64, 64).manifest());
        Self::new(generator, segmenter, manifest, file_digest(checkpoint)?)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Full scope when a segmenter is loaded, bbox otherwise.
    pub fn default_scope(&self) -> SemanticsScope {
        if self.segmenter.is_some() {
            SemanticsScope::Full
        } else {
            SemanticsScope::Bbox
        }
    }

    /// Regenerates the painted pixels (value ≠ 255) and keeps every other
    /// pixel of `image` unchanged.
    ///
    /// With full scope the labels outside the paint come from the segmenter;
    /// with bbox scope only the painted labels are shown to the generator.
    pub fn edit(
        &self,
        image: &RgbImage,
        painted: &[u8],
        mode: EditMode,
        scope: Option<SemanticsScope>,
    ) -> Result<EditOutput, EditError> {
        let scope = scope.unwrap_or_else(|| self.default_scope());
        let (w, h) = (image.width(), image.height());
        if w % 4 != 0 || h % 4 != 0 || w < 8 || h < 8 || w > MAX_SIDE || h > MAX_SIDE {
            return Err(invalid("image", format!("{w}x{h}: sides must be multiples of 4 between 8 and {MAX_SIDE}")));
        }
        if painted.len() != w * h {
            return Err(invalid("painted_labels", format!("{} values for a {w}x{h} image", painted.len())));
        }
        let c = self.num_classes();
        if let Some(&v) = painted.iter().find(|&&v| v != UNTOUCHED && v as usize >= c) {
            return Err(invalid("painted_labels", format!("class {v} out of range for {c} classes")));
        }
        let mask_px: Vec<u8> = painted.iter().map(|&v| (v != UNTOUCHED) as u8).collect();
        let mask = EditMask::new(w, h, mask_px)?;
        if mask.is_empty() {
            return Err(invalid("painted_labels", "no painted pixels"));
        }

        let base = match (scope, &self.segmenter) {
            (SemanticsScope::Bbox, _) => LabelMap::filled(w, h, c, 0)?,
            (SemanticsScope::Full, Some(s)) => s.segment(std::slice::from_ref(image))?.remove(0),
            (SemanticsScope::Full, None) => {
                return Err(invalid("semantics_scope", "full scope needs a segmenter on the server; use bbox"))
            }
        };
        let edited: Vec<u8> =
            base.pixels().iter().zip(painted).map(|(&b, &p)| if p == UNTOUCHED { b } else { p }).collect();
        let edited = LabelMap::new(w, h, c, edited)?;
        let background = self.manifest.background_ids();
        let sample = make_edit_sample(SampleRequest {
            image,
            labels: &base,
            instances: None,
            mask: mask.clone(),
            mode,
            scope,
            edited_labels: Some(edited),
            background_classes: &background,
        })
        .map_err(|e| match e {
            sesame::Error::Config(m) => invalid("painted_labels", m),
            other => EditError::Internal(other),
        })?;

        let batch = EditBatch::from_samples(&[sample], self.generator.store().dtype())?;
        let generated = tensor_to_images(&self.generator.forward_batch(&batch)?)?.remove(0);
        Ok(EditOutput { image: composite_image(&generated, image, &mask)?, mask })
    }
}

/// Decodes the two PNG inputs of an edit.
pub fn decode_inputs(image_png: &[u8], painted_png: &[u8]) -> Result<(RgbImage, Vec<u8>), EditError> {
    let image = decode_rgb_png(image_png).map_err(|e| invalid("image", e.to_string()))?;
    let (w, h, painted) = decode_gray_png(painted_png).map_err(|e| invalid("painted_labels", e.to_string()))?;
    if (w, h) != (image.width(), image.height()) {
        return Err(invalid(
            "painted_labels",
            format!("{w}x{h} layer for a {}x{} image", image.width(), image.height()),
        ));
    }
    Ok((image, painted))
}
