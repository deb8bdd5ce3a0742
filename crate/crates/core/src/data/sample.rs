use std::collections::BTreeSet;

use super::{
    masks::relabel_to_background, one_hot_encode, EditMask, EditMode, EditSample, InstanceMap, LabelMap, RgbImage,
    SemanticsScope,
};
use crate::error::{Error, Result};

/// Inputs to [`make_edit_sample`].
pub struct SampleRequest<'a> {
    pub image: &'a RgbImage,
    pub labels: &'a LabelMap,
    /// Needed only to validate replace-mode outlines.
    pub instances: Option<&'a InstanceMap>,
    pub mask: EditMask,
    pub mode: EditMode,
    pub scope: SemanticsScope,
    /// Labels after the edit. Falls back to `labels`; in removal mode the
    /// fallback relabels masked pixels with the nearest background class.
    pub edited_labels: Option<LabelMap>,
    pub background_classes: &'a [u8],
}

/// Builds generator inputs: masked image (masked pixels set to 0), mask and
/// one-hot semantics, restricted to the mask in bbox scope.
pub fn make_edit_sample(req: SampleRequest<'_>) -> Result<EditSample> {
    let (w, h) = (req.image.width(), req.image.height());
    if (req.labels.width(), req.labels.height()) != (w, h) {
        return Err(Error::Shape(format!(
            "labels are {}x{}, image is {w}x{h}",
            req.labels.width(),
            req.labels.height()
        )));
    }
    req.mask.check_dims(w, h)?;
    if req.scope == SemanticsScope::Bbox && req.mask.is_empty() {
        return Err(Error::Shape("bbox semantics need a nonempty mask".into()));
    }

    let edited = match (req.edited_labels, req.mode) {
        (Some(l), _) => {
            if (l.width(), l.height(), l.num_classes()) != (w, h, req.labels.num_classes()) {
                return Err(Error::Shape("edited labels do not match the scene".into()));
            }
            l
        }
        (None, EditMode::Removal) => relabel_to_background(req.labels, &req.mask, req.background_classes)?,
        (None, _) => req.labels.clone(),
    };

    if req.mode == EditMode::Removal {
        let bg: BTreeSet<u8> = req.background_classes.iter().copied().collect();
        let foreign = edited.pixels().iter().zip(req.mask.pixels()).any(|(l, &m)| m == 1 && !bg.contains(l));
        if foreign {
            return Err(Error::Config("removal labels must be background inside the mask".into()));
        }
    }
    if let (EditMode::Replace, Some(instances)) = (req.mode, req.instances) {
        let ids: BTreeSet<u16> =
            instances.pixels().iter().zip(req.mask.pixels()).filter(|(_, &m)| m == 1).map(|(&id, _)| id).collect();
        let outline = match ids.iter().next() {
            Some(&id) if ids.len() == 1 && id != 0 => instances.support(id),
            _ => EditMask::zeros(w, h),
        };
        if outline != req.mask {
            return Err(Error::Config("replace mask must be exactly one instance outline".into()));
        }
    }

    let plane = w * h;
    let mut masked = req.image.clone();
    for c in 0..3 {
        for (i, &m) in req.mask.pixels().iter().enumerate() {
            if m == 1 {
                masked.data_mut()[c * plane + i] = 0.0;
            }
        }
    }
    let semantics = one_hot_encode(&edited);
    let semantics = match req.scope {
        SemanticsScope::Full => semantics,
        SemanticsScope::Bbox => semantics.restricted_to(&req.mask)?,
    };
    Ok(EditSample {
        image_real: req.image.clone(),
        image_masked: masked,
        mask: req.mask,
        semantics,
        target_labels: edited,
        mode: req.mode,
        scope: req.scope,
    })
}
