use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, RgbImage};
use crate::error::{Error, Result};

/// Anything that labels images over a fixed class set.
pub trait Segment {
    fn num_classes(&self) -> usize;
    fn segment(&self, images: &[RgbImage]) -> Result<Vec<LabelMap>>;
}

/// Pixel counts indexed by `(reference, prediction)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, reference: usize, prediction: usize) -> u64 {
        self.counts[reference * self.num_classes + prediction]
    }

    pub fn add(&mut self, prediction: &LabelMap, reference: &LabelMap) -> Result<()> {
        for m in [prediction, reference] {
            if m.num_classes() != self.num_classes {
                return Err(Error::ConfigMismatch(format!(
                    "label map over {} classes, matrix over {}",
                    m.num_classes(),
                    self.num_classes
                )));
            }
        }
        if (prediction.width(), prediction.height()) != (reference.width(), reference.height()) {
            return Err(Error::Shape("prediction and reference differ in size".into()));
        }
        self.add_pixels(prediction.pixels(), reference.pixels())
    }

    /// Counts raw label slices of any length.
    pub fn add_pixels(&mut self, prediction: &[u8], reference: &[u8]) -> Result<()> {
        if prediction.len() != reference.len() {
            return Err(Error::Shape(format!(
                "{} predicted vs {} reference labels",
                prediction.len(),
                reference.len()
            )));
        }
        let c = self.num_classes;
        if let Some(&v) = prediction.iter().chain(reference).find(|&&v| v as usize >= c) {
            return Err(Error::LabelOutOfRange { value: v as usize, num_classes: c });
        }
        for (&p, &r) in prediction.iter().zip(reference) {
            self.counts[r as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ConfigMismatch("merging matrices over different class counts".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn reference_count(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    fn predicted_count(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, class)).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let hits: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| hits as f64 / total as f64)
    }

    /// `tp / (tp + fp + fn)`, or `None` when the class appears in neither map.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let union = self.reference_count(class) + self.predicted_count(class) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over the classes that occur in the references.
    ///
    /// The mean is summed as an exact fraction and rounded once, falling
    /// back to floating point only if the denominators overflow.
    pub fn miou(&self) -> Option<f64> {
        let terms: Vec<(u128, u128)> = (0..self.num_classes)
            .filter(|&c| self.reference_count(c) > 0)
            .map(|c| {
                let tp = self.get(c, c);
                (tp as u128, (self.reference_count(c) + self.predicted_count(c) - tp) as u128)
            })
            .collect();
        if terms.is_empty() {
            return None;
        }
        let n = terms.len() as u128;
        let exact = exact_sum(&terms).and_then(|(p, q)| Some((p, q.checked_mul(n)?)));
        Some(match exact {
            // Correctly rounded while both sides stay below 2^53.
            Some((p, q)) => p as f64 / q as f64,
            None => terms.iter().map(|&(p, q)| p as f64 / q as f64).sum::<f64>() / n as f64,
        })
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn exact_sum(terms: &[(u128, u128)]) -> Option<(u128, u128)> {
    terms.iter().try_fold((0u128, 1u128), |(p, q), &(a, b)| {
        let num = p.checked_mul(b)?.checked_add(a.checked_mul(q)?)?;
        let den = q.checked_mul(b)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl SegmentationScores {
    pub fn from_matrix(m: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            miou: m.miou().ok_or(Error::UndefinedMetric("mIoU without reference pixels"))?,
            pixel_accuracy: m.accuracy().ok_or(Error::UndefinedMetric("pixel accuracy of no pixels"))?,
            per_class_iou: (0..m.num_classes()).map(|c| m.iou(c)).collect(),
        })
    }
}

pub fn confusion_matrix(
    images: &[RgbImage],
    references: &[LabelMap],
    segmenter: &dyn Segment,
) -> Result<ConfusionMatrix> {
    if images.len() != references.len() {
        return Err(Error::Shape(format!("{} images, {} reference maps", images.len(), references.len())));
    }
    let c = segmenter.num_classes();
    if let Some(r) = references.iter().find(|r| r.num_classes() != c) {
        return Err(Error::ConfigMismatch(format!(
            "segmenter predicts {c} classes, references use {}",
            r.num_classes()
        )));
    }
    let mut m = ConfusionMatrix::new(c);
    for (pred, reference) in segmenter.segment(images)?.iter().zip(references) {
        m.add(pred, reference)?;
    }
    Ok(m)
}

pub fn segmentation_consistency(
    images: &[RgbImage],
    references: &[LabelMap],
    segmenter: &dyn Segment,
) -> Result<SegmentationScores> {
    SegmentationScores::from_matrix(&confusion_matrix(images, references, segmenter)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns fixed maps regardless of the images.
    struct Canned(Vec<LabelMap>);

    impl Segment for Canned {
        fn num_classes(&self) -> usize {
            self.0[0].num_classes()
        }

        fn segment(&self, images: &[RgbImage]) -> Result<Vec<LabelMap>> {
            Ok(self.0[..images.len()].to_vec())
        }
    }

    /// 8×8 map whose four quadrants carry the given labels.
    fn quadrants(c: usize, q: [u8; 4]) -> LabelMap {
        let px = (0..64).map(|i| q[(i / 32) * 2 + (i % 8) / 4]).collect();
        LabelMap::new(8, 8, c, px).unwrap()
    }

    #[test]
    fn hand_worked_two_by_two() {
        let mut m = ConfusionMatrix::new(2);
        m.add_pixels(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let s = SegmentationScores::from_matrix(&m).unwrap();
        assert_eq!(s.pixel_accuracy, 0.75);
        assert_eq!(s.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(s.miou, 7.0 / 12.0);
    }

    #[test]
    fn quadrant_version_through_a_segmenter() {
        let pred = quadrants(2, [0, 0, 1, 1]);
        let reference = quadrants(2, [0, 1, 1, 1]);
        let s = segmentation_consistency(&[RgbImage::zeros(8, 8)], &[reference], &Canned(vec![pred])).unwrap();
        assert_eq!((s.pixel_accuracy, s.miou), (0.75, 7.0 / 12.0));
    }

    #[test]
    fn perfect_segmenter_scores_one() {
        let refs = vec![quadrants(4, [0, 1, 3, 3]), quadrants(4, [2, 2, 0, 1])];
        let images = vec![RgbImage::zeros(8, 8); 2];
        let s = segmentation_consistency(&images, &refs, &Canned(refs.clone())).unwrap();
        assert_eq!((s.pixel_accuracy, s.miou), (1.0, 1.0));
        assert_eq!(confusion_matrix(&images, &refs, &Canned(refs.clone())).unwrap().total(), 128);
    }

    #[test]
    fn absent_classes_are_left_out_of_the_mean() {
        // Class 2 is predicted once but never referenced; class 3 appears nowhere.
        let mut m = ConfusionMatrix::new(4);
        m.add_pixels(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.iou(2), Some(0.0));
        assert_eq!(m.iou(3), None);
        assert_eq!(m.miou(), Some((1.0 + 0.5) / 2.0));
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let err = segmentation_consistency(
            &[RgbImage::zeros(8, 8)],
            &[quadrants(3, [0; 4])],
            &Canned(vec![quadrants(2, [0; 4])]),
        );
        assert!(matches!(err, Err(Error::ConfigMismatch(_))));
        assert!(ConfusionMatrix::new(2).add_pixels(&[2], &[0]).is_err());
    }

    #[test]
    fn merge_is_order_independent() {
        let (a, b) = ([0, 1, 2, 2], [0, 2, 2, 1]);
        let mut x = ConfusionMatrix::new(3);
        x.add_pixels(&a, &b).unwrap();
        let mut y = ConfusionMatrix::new(3);
        y.add_pixels(&b, &a).unwrap();
        let (mut xy, mut yx) = (x.clone(), y.clone());
        xy.merge(&y).unwrap();
        yx.merge(&x).unwrap();
        assert_eq!(xy, yx);
        assert_eq!(xy.total(), 8);
    }
}
