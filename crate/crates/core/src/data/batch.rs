use candle_core::{DType, Device, Tensor};

use super::EditSample;
use crate::error::{Error, Result};

/// A stack of edit samples as `(B, ·, H, W)` tensors.
#[derive(Debug, Clone)]
pub struct EditBatch {
    pub real: Tensor,
    pub masked: Tensor,
    /// `(B, 1, H, W)` with values in {0, 1}.
    pub mask: Tensor,
    pub semantics: Tensor,
}

impl EditBatch {
    pub fn from_samples(samples: &[EditSample], dtype: DType) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (w, h, c) = (first.image_real.width(), first.image_real.height(), first.semantics.num_classes());
        let b = samples.len();
        let mut real = Vec::with_capacity(b * 3 * w * h);
        let mut masked = Vec::with_capacity(b * 3 * w * h);
        let mut mask = Vec::with_capacity(b * w * h);
        let mut sem = Vec::with_capacity(b * c * w * h);
        for s in samples {
            if (s.image_real.width(), s.image_real.height(), s.semantics.num_classes()) != (w, h, c) {
                return Err(Error::Shape("samples in a batch must share size and class count".into()));
            }
            real.extend_from_slice(s.image_real.data());
            masked.extend_from_slice(s.image_masked.data());
            mask.extend(s.mask.pixels().iter().map(|&m| m as f32));
            sem.extend_from_slice(s.semantics.planes());
        }
        let dev = Device::Cpu;
        let t = |v: Vec<f32>, ch: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, ch, h, w), &dev)?.to_dtype(dtype)?)
        };
        Ok(Self { real: t(real, 3)?, masked: t(masked, 3)?, mask: t(mask, 1)?, semantics: t(sem, c)? })
    }

    pub fn len(&self) -> usize {
        self.real.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.semantics.dims()[1]
    }
}
