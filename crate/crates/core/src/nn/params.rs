use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Initialisation rule for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform {
        fan_in: usize,
    },
    /// Standard normal, rescaled to unit L2 norm.
    UnitNormal,
}

/// Ordered, named collection of trainable parameters and non-trainable buffers.
///
/// Insertion order is the canonical order: it fixes the random
/// initialisation stream, the optimizer state layout and checkpoint layout.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn fill(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::UnitNormal => {
                let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        if self.params.iter().chain(&self.buffers).any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        let name = name.into();
        self.check_unique(&name)?;
        let var = Var::from_tensor(&self.fill(shape, init)?)?;
        self.params.push((name, var.clone()));
        Ok(var)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        let name = name.into();
        self.check_unique(&name)?;
        let var = Var::from_tensor(&self.fill(shape, init)?)?;
        self.buffers.push((name, var.clone()));
        Ok(var)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Named snapshot of every parameter and buffer, in canonical order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| (n.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every parameter and buffer from `values`.
    ///
    /// All names must be present with identical shapes; extra names are rejected.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if values.len() != expected {
            return Err(Error::ConfigMismatch(format!("expected {expected} arrays, archive holds {}", values.len())));
        }
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let t = values.get(name).ok_or_else(|| Error::ConfigMismatch(format!("missing array {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies all values from another store with the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let values: BTreeMap<_, _> = other.snapshot().into_iter().collect();
        self.load(&values)
    }
}

/// Dotted parameter path helper: `Path::new("gen").join("res0")` → `gen.res0`.
#[derive(Debug, Clone)]
pub struct Path(String);

impl Path {
    pub fn new(root: &str) -> Self {
        Path(root.to_string())
    }

    pub fn join(&self, part: impl std::fmt::Display) -> Self {
        if self.0.is_empty() {
            Path(part.to_string())
        } else {
            Path(format!("{}.{part}", self.0))
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        self.join(leaf).0
    }
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_same_values() {
        let build = || {
            let mut s = ParamStore::new(DType::F32, 7);
            s.param("a", &[3, 4], Init::FanInUniform { fan_in: 4 }).unwrap();
            s.buffer("u", &[5], Init::UnitNormal).unwrap();
            s.snapshot()
        };
        let (a, b) = (build(), build());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(
                ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn rejects_duplicates_and_shape_mismatch() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.param("w", &[2], Init::Zeros).unwrap();
        assert!(s.param("w", &[2], Init::Zeros).is_err());
        let mut bad = BTreeMap::new();
        bad.insert("w".to_string(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(s.load(&bad), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn unit_normal_has_unit_norm() {
        let mut s = ParamStore::new(DType::F64, 1);
        let v = s.buffer("u", &[16], Init::UnitNormal).unwrap();
        let n = v.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
