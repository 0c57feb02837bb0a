use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one array inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Named learnable arrays with paired gradients and adaptive-moment state.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    moments: Vec<Moments>,
    index: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.moments.push(Moments { first: vec![0.0; value.len()], second: vec![0.0; value.len()], steps: 0 });
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Uniform fan-in initialised weight `[fan_in, fan_out]`.
    pub fn insert_linear_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.moments[id.0].steps
    }

    /// Copy of the named subset, fresh gradients and optimizer state.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut out = Self::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            if keep(name) {
                out.insert(name.clone(), value.clone()).expect("names are unique");
            }
        }
        out
    }

    /// Overwrite values of every parameter in `self` from the same-named
    /// parameter in `source`.
    pub fn copy_values_from(&mut self, source: &ParameterSet) -> Result<()> {
        for i in 0..self.values.len() {
            let src = source.value(source.id(&self.names[i])?);
            src.same_shape(&self.values[i], "copy_values_from")?;
            self.values[i] = src.clone();
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    /// Serialize values as a versioned, length-prefixed frame with a CRC32
    /// trailer. Gradients and optimizer state are not stored.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, value) in self.names.iter().zip(&self.values) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&(value.len() as u64).to_le_bytes());
            for x in value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = CrcReader { inner: r, hasher: crc32fast::Hasher::new() };
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("bad parameter-set magic".into()));
        }
        let version = reader.u32()?;
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported parameter-set version {version}")));
        }
        let count = reader.u32()? as usize;
        let mut out = Self::new();
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            let mut name = vec![0u8; name_len];
            reader.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let ndim = reader.u32()? as usize;
            let shape = (0..ndim).map(|_| reader.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = reader.u64()? as usize;
            if n != shape.iter().product::<usize>() {
                return Err(Error::Format(format!("payload length mismatch for `{name}`")));
            }
            let data = (0..n).map(|_| reader.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            out.insert(name, Tensor::new(&shape, data)?)?;
        }
        let computed = reader.hasher.clone().finalize();
        let mut trailer = [0u8; 4];
        reader.inner.read_exact(&mut trailer)?;
        if u32::from_le_bytes(trailer) != computed {
            return Err(Error::Format("parameter-set checksum mismatch".into()));
        }
        Ok(out)
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"BMPP";
const PARAMS_VERSION: u32 = 1;

struct CrcReader<'a, R: Read> {
    inner: &'a mut R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> CrcReader<'_, R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated parameter set".into()),
            _ => Error::Io(e),
        })?;
        self.hasher.update(buf);
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(20.0) }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One update over every parameter of `params`. Returns the pre-clip
    /// global gradient norm. Gradients are left in place.
    pub fn step(&self, params: &mut ParameterSet) -> Result<f64> {
        self.step_where(params, |_| true)
    }

    /// Like [`Adam::step`] but only parameters whose name satisfies `keep`
    /// are touched; the others keep their values and moments.
    pub fn step_where(&self, params: &mut ParameterSet, keep: impl Fn(&str) -> bool) -> Result<f64> {
        let active: Vec<bool> = params.names.iter().map(|n| keep(n)).collect();
        let mut sq = 0.0;
        for ((name, g), &on) in params.names.iter().zip(&params.grads).zip(&active) {
            if !on {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-12),
            _ => 1.0,
        };
        for i in (0..params.values.len()).filter(|&i| active[i]) {
            let grad = params.grads[i].data();
            let st = &mut params.moments[i];
            st.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(st.steps as i32);
            let value = params.values[i].data_mut();
            for j in 0..value.len() {
                let g = grad[j] * scale;
                st.first[j] = self.beta1 * st.first[j] + (1.0 - self.beta1) * g;
                st.second[j] = self.beta2 * st.second[j] + (1.0 - self.beta2) * g * g;
                let m_hat = st.first[j] / bc1;
                let v_hat = st.second[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

/// `target <- (1 - rate) * target + rate * online`, matched by name.
pub fn ema_update(target: &mut ParameterSet, online: &ParameterSet, rate: f64) -> Result<()> {
    for i in 0..target.values.len() {
        let src = online.value(online.id(&target.names[i])?);
        src.same_shape(&target.values[i], "ema_update")?;
        for (t, o) in target.values[i].data_mut().iter_mut().zip(src.data()) {
            *t = (1.0 - rate) * *t + rate * o;
        }
    }
    Ok(())
}
