//! Layer primitives shared by the generator, discriminator and auxiliary networks.

mod adam;
mod kernels;
mod params;

use candle_core::{Tensor, Var};

pub use adam::{Adam, AdamState};
pub use kernels::Geometry;
pub use params::{Init, ParamStore, Path};

use crate::error::{Error, Result};
use kernels::{BiasAdd, Conv, InstanceNorm, LeakyRelu, Modulate, Upsample2x};

/// Epsilon used by every normalisation layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            Activation::None => x.clone(),
            Activation::Relu => positive_part(x)?,
            Activation::LeakyRelu(slope) => leaky_relu(x, slope)?,
            Activation::Tanh => x.tanh()?,
        })
    }

    pub fn label(&self) -> String {
        match *self {
            Activation::None => "-".into(),
            Activation::Relu => "ReLU".into(),
            Activation::LeakyRelu(s) => format!("LeakyReLU({s})"),
            Activation::Tanh => "TanH".into(),
        }
    }
}

/// `max(x, 0)` with subgradient 0 at 0.
pub fn positive_part(x: &Tensor) -> candle_core::Result<Tensor> {
    leaky_relu(x, 0.0)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.apply_op1(LeakyRelu { slope })
}

/// Parameter-free per-sample, per-channel normalisation over the spatial axes.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.apply_op1(InstanceNorm)?)
}

/// `instance_norm(x) · (1 + γ) + β`, fused.
pub fn modulate(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.apply_op3(gamma, beta, Modulate)?)
}

/// Nearest-neighbour ×2 upsampling; the gradient is an exact 2×2 block sum.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.apply_op1(Upsample2x)?)
}

/// Nearest-neighbour resize by an integer factor in either direction.
/// Downsampling keeps the top-left pixel of each block.
pub fn resize_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, sh, sw) = x.dims4()?;
    if (sh, sw) == (h, w) {
        return Ok(x.clone());
    }
    if h > sh && h.is_multiple_of(sh) && w.is_multiple_of(sw) && h / sh == w / sw {
        let mut y = x.clone();
        let mut f = h / sh;
        while f > 1 {
            if !f.is_multiple_of(2) {
                return Ok(x.upsample_nearest2d(h, w)?);
            }
            y = upsample2x(&y)?;
            f /= 2;
        }
        return Ok(y);
    }
    if h < sh && sh % h == 0 && sw % w == 0 && sh / h == sw / w {
        let f = sh / h;
        return Ok(x.reshape((b, c, h, f, w, f))?.narrow(3, 0, 1)?.narrow(5, 0, 1)?.reshape((b, c, h, w))?);
    }
    Err(Error::Shape(format!("cannot resize {sh}x{sw} to {h}x{w} by an integer factor")))
}

/// Normalisation column of a layer schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    Instance,
    Spade,
    SpectralInstance,
}

impl Norm {
    pub fn label(&self) -> &'static str {
        match self {
            Norm::None => "-",
            Norm::Instance => "Instance",
            Norm::Spade => "SPADE",
            Norm::SpectralInstance => "SpectralInstance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    ConvBlock,
    ResBlock,
    Upsample,
}

/// One row of a layer schedule; networks are built by walking these rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRow {
    pub kind: RowKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub norm: Norm,
    pub activation: Activation,
}

impl LayerRow {
    pub fn conv(filters: usize, kernel: usize, stride: usize, norm: Norm, activation: Activation) -> Self {
        Self { kind: RowKind::ConvBlock, filters, kernel, stride, dilation: 1, norm, activation }
    }

    pub fn res(filters: usize, dilation: usize, norm: Norm, activation: Activation) -> Self {
        Self { kind: RowKind::ResBlock, filters, kernel: 3, stride: 1, dilation, norm, activation }
    }

    pub fn upsample() -> Self {
        Self {
            kind: RowKind::Upsample,
            filters: 0,
            kernel: 0,
            stride: 0,
            dilation: 0,
            norm: Norm::None,
            activation: Activation::None,
        }
    }
}

impl std::fmt::Display for LayerRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self.kind {
            RowKind::Upsample => return write!(f, "Nearest Neighbour Upsampling x2 | - | -"),
            RowKind::ConvBlock => "ConvBlock",
            RowKind::ResBlock => "ResBlock",
        };
        write!(
            f,
            "{name} F = {}, K = {}, S = {}, D = {} | {} | {}",
            self.filters,
            self.kernel,
            self.stride,
            self.dilation,
            self.norm.label(),
            self.activation.label()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            bias: true,
            spectral: false,
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { kernel: self.kernel, stride: self.stride, padding: self.padding, dilation: self.dilation }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn num_parameters(&self) -> usize {
        self.fan_in() * self.out_channels + if self.bias { self.out_channels } else { 0 }
    }
}

struct Spectral {
    u: Var,
    v: Var,
}

/// 2-D convolution with optional spectral normalisation of the kernel.
///
/// With spectral normalisation the kernel is divided by `σ = uᵀ W v`, where
/// `u`, `v` are buffers refreshed only by [`Conv2d::power_iterate`]; the
/// forward pass is therefore a pure function of the weights.
pub struct Conv2d {
    spec: ConvSpec,
    weight: Var,
    bias: Option<Var>,
    spectral: Option<Spectral>,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, path: &Path, spec: ConvSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 {
            return Err(Error::Config(format!("degenerate convolution {spec:?}")));
        }
        let fan_in = spec.fan_in();
        let weight = store.param(
            path.name("weight"),
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            Init::FanInUniform { fan_in },
        )?;
        let bias = if spec.bias {
            Some(store.param(path.name("bias"), &[spec.out_channels], Init::FanInUniform { fan_in })?)
        } else {
            None
        };
        let spectral = if spec.spectral {
            let u = store.buffer(path.name("sn_u"), &[spec.out_channels], Init::UnitNormal)?;
            let v = store.buffer(path.name("sn_v"), &[fan_in], Init::Zeros)?;
            let s = Spectral { u, v };
            let conv = Self { spec, weight: weight.clone(), bias: None, spectral: None };
            conv.refresh_spectral(&s)?;
            Some(s)
        } else {
            None
        };
        Ok(Self { spec, weight, bias, spectral })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    fn weight_matrix(&self) -> Result<Tensor> {
        Ok(self.weight.as_tensor().reshape((self.spec.out_channels, self.spec.fan_in()))?)
    }

    fn refresh_spectral(&self, s: &Spectral) -> Result<()> {
        let w = self.weight_matrix()?.detach();
        let u = s.u.as_tensor().unsqueeze(0)?;
        let v = u.matmul(&w)?;
        let v = v.broadcast_div(&v.sqr()?.sum_all()?.sqrt()?.affine(1.0, 1e-12)?)?;
        let u = v.matmul(&w.t()?)?;
        let u = u.broadcast_div(&u.sqr()?.sum_all()?.sqrt()?.affine(1.0, 1e-12)?)?;
        s.v.set(&v.squeeze(0)?)?;
        s.u.set(&u.squeeze(0)?)?;
        Ok(())
    }

    /// One power-iteration step on the spectral-norm estimate. No-op without
    /// spectral normalisation.
    pub fn power_iterate(&self) -> Result<()> {
        match &self.spectral {
            Some(s) => self.refresh_spectral(s),
            None => Ok(()),
        }
    }

    /// Current largest-singular-value estimate `uᵀ W v`.
    pub fn sigma(&self) -> Result<Option<Tensor>> {
        let Some(s) = &self.spectral else { return Ok(None) };
        let w = self.weight_matrix()?;
        let u = s.u.as_tensor().unsqueeze(0)?;
        let v = s.v.as_tensor().unsqueeze(1)?;
        Ok(Some(u.matmul(&w)?.matmul(&v)?.reshape(())?))
    }

    /// The kernel actually applied, as a `(out, in·k·k)` matrix.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let w = self.weight_matrix()?;
        Ok(match self.sigma()? {
            // An all-zero kernel has σ = 0; keep it zero rather than NaN.
            Some(sigma) => w.broadcast_div(&sigma.maximum(1e-12)?)?,
            None => w,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!("convolution expects {} input channels, got {c}", self.spec.in_channels)));
        }
        let g = self.spec.geometry();
        let (ho, wo) = match (g.out_size(h), g.out_size(w)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::Shape(format!("input {h}x{w} smaller than kernel span"))),
        };
        let y = x.contiguous()?.apply_op2(&self.effective_weight()?.contiguous()?, Conv { geom: g })?;
        debug_assert_eq!(y.dims(), &[b, self.spec.out_channels, ho, wo]);
        Ok(match &self.bias {
            Some(bias) => y.apply_op2(bias.as_tensor(), BiasAdd)?,
            None => y,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn conv_matches_candle_reference() {
        let mut store = ParamStore::new(DType::F64, 3);
        let spec = ConvSpec { stride: 2, padding: 2, ..ConvSpec::same(3, 5, 4, 1) };
        let conv = Conv2d::new(&mut store, &Path::new("c"), spec).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 11, 9), &Device::Cpu).unwrap();
        let ours = conv.forward(&x).unwrap();
        let reference = x
            .conv2d(conv.weight().as_tensor(), 2, 2, 1, 1)
            .unwrap()
            .broadcast_add(&conv.bias().unwrap().as_tensor().reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);
    }

    #[test]
    fn power_iteration_converges_to_top_singular_value() {
        let mut store = ParamStore::new(DType::F64, 11);
        let spec = ConvSpec { spectral: true, bias: false, ..ConvSpec::same(2, 3, 1, 1) };
        let conv = Conv2d::new(&mut store, &Path::new("c"), spec).unwrap();
        conv.weight()
            .set(&Tensor::from_vec(vec![3.0f64, 0.0, 0.0, 1.0, 0.0, 0.0], (3, 2, 1, 1), &Device::Cpu).unwrap())
            .unwrap();
        for _ in 0..50 {
            conv.power_iterate().unwrap();
        }
        let sigma = conv.sigma().unwrap().unwrap().to_scalar::<f64>().unwrap();
        assert!((sigma - 3.0).abs() < 1e-9, "sigma {sigma}");
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = Tensor::randn(2f64, 3.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let y = instance_norm(&x).unwrap();
        let mean = y.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        let var = y.sqr().unwrap().mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        for m in mean.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!(m.abs() < 1e-10);
        }
        for v in var.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn resize_nearest_integer_factors() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let down = resize_nearest(&x, 2, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(down, vec![0., 2., 8., 10.]);
        let up = resize_nearest(&x, 16, 16).unwrap();
        assert_eq!(up.dims(), &[1, 1, 16, 16]);
        assert_eq!(
            up.get(0).unwrap().get(0).unwrap().get(15).unwrap().get(15).unwrap().to_scalar::<f32>().unwrap(),
            15.
        );
        assert!(resize_nearest(&x, 3, 3).is_err());
    }

    #[test]
    fn layer_row_labels() {
        let r = LayerRow::res(256, 2, Norm::Spade, Activation::LeakyRelu(0.02));
        assert_eq!(r.to_string(), "ResBlock F = 256, K = 3, S = 1, D = 2 | SPADE | LeakyReLU(0.02)");
        assert_eq!(LayerRow::upsample().to_string(), "Nearest Neighbour Upsampling x2 | - | -");
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::from_vec(vec![-2f64, 0.0, 3.0], 3, &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.02).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.04, 0.0, 3.0]);
    }
}
