//! Encoder, dilated residual core and SPADE decoder, plus output compositing.
//!
//! The network is built by walking [`GeneratorConfig::layer_rows`]; the input
//! is the channel concatenation `[masked image | mask | semantics]`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{EditBatch, EditMask, RgbImage};
use crate::error::{Error, Result};
use crate::nn::{
    instance_norm, modulate, positive_part, resize_nearest, upsample2x, Activation, Conv2d, ConvSpec, LayerRow, Norm,
    ParamStore, Path, RowKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    /// Width of the first layer; the encoder doubles it twice.
    pub base_width: usize,
    pub spade_hidden: usize,
    pub spade_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { num_classes: 8, base_width: 64, spade_hidden: 128, spade_kernel: 3, leaky_slope: 0.02 }
    }
}

impl GeneratorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, ..Self::default() }
    }

    pub fn input_channels(&self) -> usize {
        3 + 1 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.base_width == 0 || self.spade_hidden == 0 {
            return Err(Error::Config("generator widths and class count must be positive".into()));
        }
        if self.spade_kernel.is_multiple_of(2) {
            return Err(Error::Config("SPADE kernel must be odd".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky slope must be a nonnegative number".into()));
        }
        Ok(())
    }

    /// The layer schedule, top to bottom.
    pub fn layer_rows(&self) -> Vec<LayerRow> {
        let w = self.base_width;
        let leaky = Activation::LeakyRelu(self.leaky_slope);
        let mut rows = vec![
            LayerRow::conv(w, 7, 1, Norm::Instance, Activation::Relu),
            LayerRow::conv(2 * w, 3, 2, Norm::Instance, Activation::Relu),
            LayerRow::conv(4 * w, 3, 2, Norm::Instance, Activation::Relu),
        ];
        for d in [1, 2, 2, 2] {
            rows.push(LayerRow::res(4 * w, d, Norm::Instance, Activation::Relu));
        }
        for d in [2, 2, 2, 2, 1] {
            rows.push(LayerRow::res(4 * w, d, Norm::Spade, leaky));
        }
        rows.push(LayerRow::upsample());
        rows.push(LayerRow::res(2 * w, 1, Norm::Spade, leaky));
        rows.push(LayerRow::upsample());
        rows.push(LayerRow::res(w, 1, Norm::Spade, leaky));
        rows.push(LayerRow::conv(3, 3, 1, Norm::None, Activation::Tanh));
        rows
    }
}

/// Spatially adaptive de-normalisation: `norm(x) ⊙ (1 + γ(s)) + β(s)`.
pub struct Spade {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new(
        store: &mut ParamStore,
        path: &Path,
        channels: usize,
        num_classes: usize,
        hidden: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            shared: Conv2d::new(store, &path.join("shared"), ConvSpec::same(num_classes, hidden, kernel, 1))?,
            gamma: Conv2d::new(store, &path.join("gamma"), ConvSpec::same(hidden, channels, kernel, 1))?,
            beta: Conv2d::new(store, &path.join("beta"), ConvSpec::same(hidden, channels, kernel, 1))?,
        })
    }

    pub fn gamma_conv(&self) -> &Conv2d {
        &self.gamma
    }

    pub fn beta_conv(&self) -> &Conv2d {
        &self.beta
    }

    /// `semantics` must already match the spatial size of `x`.
    pub fn forward(&self, x: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (_, _, sh, sw) = semantics.dims4()?;
        if (h, w) != (sh, sw) {
            return Err(Error::Shape(format!("SPADE features are {h}x{w}, semantics {sh}x{sw}")));
        }
        let actv = positive_part(&self.shared.forward(semantics)?)?;
        let gamma = self.gamma.forward(&actv)?;
        let beta = self.beta.forward(&actv)?;
        modulate(x, &gamma, &beta)
    }
}

/// Resizes `semantics` to the feature map's size, then applies `spade`.
pub fn spade_normalize(features: &Tensor, semantics: &Tensor, spade: &Spade) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4()?;
    spade.forward(features, &resize_nearest(semantics, h, w)?)
}

struct ResBlock {
    activation: Activation,
    spade: Option<(Spade, Spade)>,
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, path: &Path, cfg: &GeneratorConfig, row: &LayerRow, in_ch: usize) -> Result<Self> {
        let out = row.filters;
        let spade = match row.norm {
            Norm::Spade => {
                let (c, h, k) = (cfg.num_classes, cfg.spade_hidden, cfg.spade_kernel);
                Some((
                    Spade::new(store, &path.join("norm1"), in_ch, c, h, k)?,
                    Spade::new(store, &path.join("norm2"), out, c, h, k)?,
                ))
            }
            Norm::Instance => None,
            other => return Err(Error::Config(format!("residual block cannot use {} norm", other.label()))),
        };
        let conv1 = Conv2d::new(store, &path.join("conv1"), ConvSpec::same(in_ch, out, row.kernel, row.dilation))?;
        let conv2 = Conv2d::new(store, &path.join("conv2"), ConvSpec::same(out, out, row.kernel, row.dilation))?;
        let skip = if in_ch != out {
            let spec = ConvSpec { bias: false, ..ConvSpec::same(in_ch, out, 1, 1) };
            Some(Conv2d::new(store, &path.join("skip"), spec)?)
        } else {
            None
        };
        Ok(Self { activation: row.activation, spade, conv1, conv2, skip })
    }

    fn forward(&self, x: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        let normed = |t: &Tensor, which: usize| -> Result<Tensor> {
            match &self.spade {
                Some((a, b)) => (if which == 0 { a } else { b }).forward(t, semantics),
                None => instance_norm(t),
            }
        };
        let h = self.conv1.forward(&self.activation.apply(&normed(x, 0)?)?)?;
        let h = self.conv2.forward(&self.activation.apply(&normed(&h, 1)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

enum Layer {
    Conv { conv: Conv2d, norm: Norm, activation: Activation },
    Res(Box<ResBlock>),
    Upsample,
}

pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    layers: Vec<Layer>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let root = Path::new("gen");
        let mut ch = config.input_channels();
        let mut layers = Vec::new();
        for (i, row) in config.layer_rows().iter().enumerate() {
            let path = root.join(i);
            let layer = match row.kind {
                RowKind::ConvBlock => {
                    let spec = ConvSpec {
                        stride: row.stride,
                        padding: row.dilation * (row.kernel - 1) / 2,
                        ..ConvSpec::same(ch, row.filters, row.kernel, row.dilation)
                    };
                    if !matches!(row.norm, Norm::None | Norm::Instance) {
                        return Err(Error::Config(format!("row {i}: unsupported conv norm")));
                    }
                    Layer::Conv {
                        conv: Conv2d::new(&mut store, &path, spec)?,
                        norm: row.norm,
                        activation: row.activation,
                    }
                }
                RowKind::ResBlock => Layer::Res(Box::new(ResBlock::new(&mut store, &path, &config, row, ch)?)),
                RowKind::Upsample => Layer::Upsample,
            };
            if row.kind != RowKind::Upsample {
                ch = row.filters;
            }
            layers.push(layer);
        }
        if ch != 3 {
            return Err(Error::Config(format!("schedule ends with {ch} channels, expected 3")));
        }
        Ok(Self { config, store, layers })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// The first convolution, used by gradient checks.
    pub fn first_conv(&self) -> &Conv2d {
        match &self.layers[0] {
            Layer::Conv { conv, .. } => conv,
            _ => unreachable!("schedule starts with a convolution"),
        }
    }

    /// `I_gen = G(I_m, M, M_sem)` for `(B,3,H,W)`, `(B,1,H,W)`, `(B,C,H,W)`.
    pub fn forward(&self, masked: &Tensor, mask: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = masked.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("height and width must be divisible by 4, got {h}x{w}")));
        }
        if mask.dims4()? != (b, 1, h, w) {
            return Err(Error::Shape(format!("mask shape {:?} does not match image", mask.dims())));
        }
        if semantics.dims4()? != (b, self.config.num_classes, h, w) {
            return Err(Error::Shape(format!(
                "semantics shape {:?}, expected {} classes at {h}x{w}",
                semantics.dims(),
                self.config.num_classes
            )));
        }
        let dtype = self.store.dtype();
        let mut x = Tensor::cat(&[masked.to_dtype(dtype)?, mask.to_dtype(dtype)?, semantics.to_dtype(dtype)?], 1)?;
        let semantics = semantics.to_dtype(dtype)?;
        let mut pyramid: Vec<(usize, Tensor)> = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { conv, norm, activation } => {
                    let y = conv.forward(&x)?;
                    let y = if *norm == Norm::Instance { instance_norm(&y)? } else { y };
                    activation.apply(&y)?
                }
                Layer::Res(block) => {
                    let (_, _, fh, fw) = x.dims4()?;
                    let sem = match pyramid.iter().find(|(k, _)| *k == fh) {
                        Some((_, s)) => s.clone(),
                        None => {
                            let s = resize_nearest(&semantics, fh, fw)?;
                            pyramid.push((fh, s.clone()));
                            s
                        }
                    };
                    block.forward(&x, &sem)?
                }
                Layer::Upsample => upsample2x(&x)?,
            };
        }
        Ok(x)
    }

    pub fn forward_batch(&self, batch: &EditBatch) -> Result<Tensor> {
        self.forward(&batch.masked, &batch.mask, &batch.semantics)
    }
}

/// `I_gen ⊙ M + I_real ⊙ (1 − M)`, selecting rather than blending so pixels
/// outside the mask are copied bit for bit. `mask` broadcasts over channels.
pub fn composite(generated: &Tensor, real: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if generated.dims() != real.dims() {
        return Err(Error::Shape(format!("generated {:?} vs real {:?}", generated.dims(), real.dims())));
    }
    let (b, _, h, w) = real.dims4()?;
    if mask.dims4()? != (b, 1, h, w) {
        return Err(Error::Shape(format!("mask shape {:?} does not match image", mask.dims())));
    }
    let select = mask.ne(0.0)?.broadcast_as(real.shape())?;
    Ok(select.where_cond(&generated.to_dtype(real.dtype())?, real)?)
}

/// Image-level compositing on host buffers.
pub fn composite_image(generated: &RgbImage, real: &RgbImage, mask: &EditMask) -> Result<RgbImage> {
    let (w, h) = (real.width(), real.height());
    if (generated.width(), generated.height()) != (w, h) {
        return Err(Error::Shape("generated and real images differ in size".into()));
    }
    mask.check_dims(w, h)?;
    let mut out = real.clone();
    let plane = w * h;
    for c in 0..3 {
        for (i, &m) in mask.pixels().iter().enumerate() {
            if m == 1 {
                out.data_mut()[c * plane + i] = generated.data()[c * plane + i];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn small(c: usize) -> GeneratorConfig {
        GeneratorConfig { num_classes: c, base_width: 4, spade_hidden: 4, ..GeneratorConfig::default() }
    }

    fn inputs(b: usize, c: usize, h: usize, w: usize, dtype: DType) -> (Tensor, Tensor, Tensor) {
        let dev = Device::Cpu;
        let img = Tensor::rand(-1f64, 1.0, (b, 3, h, w), &dev).unwrap().to_dtype(dtype).unwrap();
        let mask = Tensor::rand(0f64, 1.0, (b, 1, h, w), &dev).unwrap().ge(0.5).unwrap().to_dtype(dtype).unwrap();
        let labels =
            Tensor::rand(0f64, c as f64, (b, h, w), &dev).unwrap().floor().unwrap().to_dtype(DType::U32).unwrap();
        let classes = Tensor::arange(0u32, c as u32, &dev).unwrap().reshape((1, c, 1, 1)).unwrap();
        let sem = labels.unsqueeze(1).unwrap().broadcast_eq(&classes).unwrap().to_dtype(dtype).unwrap();
        (img, mask, sem)
    }

    #[test]
    fn output_shape_and_range() {
        let g = Generator::new(small(8), DType::F32, 0).unwrap();
        let (img, mask, sem) = inputs(2, 8, 64, 64, DType::F32);
        let y = g.forward(&img, &mask, &sem).unwrap();
        assert_eq!(y.dims(), &[2, 3, 64, 64]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_four() {
        let g = Generator::new(small(3), DType::F32, 0).unwrap();
        let (img, mask, sem) = inputs(1, 3, 18, 16, DType::F32);
        assert!(matches!(g.forward(&img, &mask, &sem), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let g = Generator::new(small(3), DType::F32, 5).unwrap();
        let (img, mask, sem) = inputs(1, 3, 16, 16, DType::F32);
        let a = g.forward(&img, &mask, &sem).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g.forward(&img, &mask, &sem).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let g2 = Generator::new(small(3), DType::F32, 5).unwrap();
        let c = g2.forward(&img, &mask, &sem).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn output_depends_on_semantics() {
        let g = Generator::new(small(4), DType::F64, 1).unwrap();
        let (img, _, sem) = inputs(1, 4, 16, 16, DType::F64);
        let mask = Tensor::ones((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let mut v = sem.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let plane = 256;
        let p = 5 * 16 + 7;
        let cls = (0..4).find(|&c| v[c * plane + p] == 1.0).unwrap();
        v[cls * plane + p] = 0.0;
        v[((cls + 1) % 4) * plane + p] = 1.0;
        let sem2 = Tensor::from_vec(v, (1, 4, 16, 16), &Device::Cpu).unwrap();
        let a = g.forward(&img, &mask, &sem).unwrap();
        let b = g.forward(&img, &mask, &sem2).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn spade_with_zero_modulation_is_instance_norm() {
        let mut store = ParamStore::new(DType::F64, 2);
        let spade = Spade::new(&mut store, &Path::new("s"), 2, 3, 4, 3).unwrap();
        for conv in [spade.gamma_conv(), spade.beta_conv()] {
            conv.weight().set(&conv.weight().zeros_like().unwrap()).unwrap();
            let b = conv.bias().unwrap();
            b.set(&b.zeros_like().unwrap()).unwrap();
        }
        let (_, _, sem) = inputs(1, 3, 8, 8, DType::F64);
        let x = Tensor::randn(0.5f64, 2.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let y = spade_normalize(&x, &sem, &spade).unwrap();
        let expected = instance_norm(&x).unwrap();
        let diff = (y - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn spade_on_constant_features_returns_beta() {
        let mut store = ParamStore::new(DType::F64, 3);
        let spade = Spade::new(&mut store, &Path::new("s"), 2, 3, 4, 3).unwrap();
        let (_, _, sem) = inputs(1, 3, 8, 8, DType::F64);
        let x = Tensor::ones((1, 2, 8, 8), DType::F64, &Device::Cpu).unwrap().affine(3.0, 0.0).unwrap();
        let y = spade_normalize(&x, &sem, &spade).unwrap();
        let beta = spade.beta_conv().forward(&spade.shared.forward(&sem).unwrap().relu().unwrap()).unwrap();
        let diff = (y - beta).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff <= 1e-5);
    }

    #[test]
    fn spade_rejects_spatial_mismatch() {
        let mut store = ParamStore::new(DType::F64, 3);
        let spade = Spade::new(&mut store, &Path::new("s"), 2, 3, 4, 3).unwrap();
        let (_, _, sem) = inputs(1, 3, 8, 8, DType::F64);
        let x = Tensor::ones((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(spade.forward(&x, &sem).is_err());
    }

    #[test]
    fn composite_selects_exactly() {
        let (real, mask, _) = inputs(2, 3, 8, 8, DType::F32);
        let gen = Tensor::rand(-1f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let out = composite(&gen, &real, &mask).unwrap();
        let (o, r, g, m) = (
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            real.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            gen.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            mask.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        );
        for i in 0..o.len() {
            let (b, rest) = (i / 192, i % 64);
            let expect = if m[b * 64 + rest] == 1.0 { g[i] } else { r[i] };
            assert_eq!(o[i].to_bits(), expect.to_bits());
        }
        let zeros = mask.zeros_like().unwrap();
        let all_real = composite(&gen, &real, &zeros).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(all_real, r);
    }

    #[test]
    fn composite_gradient_reaches_generated_inside_mask_only() {
        let gen = Var::from_tensor(&Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let real = Tensor::ones((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let mask =
            Tensor::from_vec((0..16).map(|i| (i % 2) as f64).collect::<Vec<_>>(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let out = composite(gen.as_tensor(), &real, &mask).unwrap();
        let grads = out.sum_all().unwrap().backward().unwrap();
        let g = grads.get(gen.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, v) in g.iter().enumerate() {
            assert_eq!(*v, ((i % 16) % 2) as f64);
        }
    }

    #[test]
    fn composite_image_matches_tensor_form() {
        let mut real = RgbImage::zeros(8, 8);
        real.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 / 192.0) - 0.5);
        let mut gen = RgbImage::zeros(8, 8);
        gen.data_mut().iter_mut().for_each(|v| *v = 0.25);
        let mask = EditMask::rect(8, 8, 2, 2, 5, 6);
        let out = composite_image(&gen, &real, &mask).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if mask.get(x, y) { gen.pixel(x, y) } else { real.pixel(x, y) };
                assert_eq!(out.pixel(x, y), expect);
            }
        }
    }
}
