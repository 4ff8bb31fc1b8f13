//! Minimal layer toolkit over `candle_core`: a named parameter store with
//! seeded initialisation, convolution/normalisation layers and Adam.
//!
//! A store is either trainable (layers hold `Var`-backed tensors that
//! backprop tracks) or frozen (layers hold detached views that backprop
//! never sees). Both kinds keep a `Var` per entry so weights can be loaded
//! in place after the layers are built.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// He-normal for a ReLU layer with the given fan-in.
    Kaiming { fan_in: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    trainable: bool,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    handed: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: &Device, dtype: DType, seed: u64, trainable: bool) -> Self {
        Self {
            device: device.clone(),
            dtype,
            trainable,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            handed: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn make(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => sample_normal(&mut self.rng, std, n, name)?,
            Init::Kaiming { fan_in } => {
                sample_normal(&mut self.rng, (2.0 / fan_in.max(1) as f64).sqrt(), n, name)?
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Registers a parameter and returns the tensor layers should hold.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&self.make(name, shape, init)?)?;
        let handle = if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        self.params.insert(name.to_string(), var);
        self.handed.insert(name.to_string(), handle.clone());
        Ok(handle)
    }

    /// Drops every gradient recorded for this store's parameters. The autodiff
    /// engine records gradients for constant leaves too, so frozen stores call
    /// this after `backward` to keep their parameters out of the gradient set.
    pub fn strip_grads(&self, grads: &mut candle_core::backprop::GradStore) {
        for t in self.handed.values() {
            grads.remove(t);
        }
        for b in self.buffers.values() {
            grads.remove(b.as_tensor());
        }
    }

    /// Registers a non-trainable buffer such as a running statistic.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.buffers.contains_key(name) {
            return Err(Error::Config(format!("buffer `{name}` registered twice")));
        }
        let var = Var::from_tensor(&self.make(name, shape, init)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Trainable variables by name; empty for a frozen store.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        if !self.trainable {
            return Vec::new();
        }
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// The parameter tensors exactly as handed to layers.
    pub fn parameter_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.handed.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers, keyed by name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites entries from `tensors`. With `strict`, every entry of the
    /// store must be present and no unknown names are allowed. Names may be
    /// filtered and renamed through `map_name`, which returns the store
    /// name for a file name or `None` to skip it.
    pub fn load_tensors(
        &mut self,
        tensors: &HashMap<String, Tensor>,
        strict: bool,
        map_name: impl Fn(&str) -> Option<String>,
    ) -> Result<usize> {
        let mut loaded = 0;
        let mut seen = std::collections::BTreeSet::new();
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        for file_name in names {
            let Some(name) = map_name(file_name) else {
                continue;
            };
            let src = &tensors[file_name];
            let var = match self.params.get(&name).or_else(|| self.buffers.get(&name)) {
                Some(v) => v,
                None if strict => return Err(Error::Checkpoint(format!("unexpected tensor `{file_name}`"))),
                None => continue,
            };
            if var.dims() != src.dims() {
                return Err(Error::Shape(format!(
                    "`{name}` expects {:?}, file has {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_device(&self.device)?.to_dtype(self.dtype)?)?;
            seen.insert(name);
            loaded += 1;
        }
        if strict {
            if let Some(missing) = self.params.keys().chain(self.buffers.keys()).find(|k| !seen.contains(*k)) {
                return Err(Error::MissingWeight(missing.clone()));
            }
        }
        Ok(loaded)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map: HashMap<String, Tensor> = self.named_tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>, strict: bool) -> Result<usize> {
        let tensors = read_safetensors(path, &self.device)?;
        self.load_tensors(&tensors, strict, |n| Some(n.to_string()))
    }

    /// SHA-256 over every parameter and buffer: name, shape and value bits.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64, n: usize, name: &str) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init of `{name}`: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

pub fn read_safetensors(path: impl AsRef<Path>, device: &Device) -> Result<HashMap<String, Tensor>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "weight file not found"),
        ));
    }
    Ok(candle_core::safetensors::load(path, device)?)
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalises with batch statistics and updates the running
    /// averages; evaluation mode uses the running averages.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let (n, _, h, w) = x.dims4()?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 {
                    (var.detach() * (count / (count - 1.0)))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            ),
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        Ok(y
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[out_dim, in_dim], init)?,
            bias: store.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?,
        })
    }

    /// `x` is N×in.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Log-softmax along the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_sub(&x.log_sum_exp(D::Minus1)?.unsqueeze(D::Minus1)?)?)
}

/// Non-overlapping `k`×`k` max pooling (trailing rows/columns dropped).
/// Built from a reshape and a max reduction: candle's own pooling backward
/// scales the gradient by the fraction of tied maxima in each window.
pub fn max_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / k, w / k);
    let x = if oh * k != h || ow * k != w {
        x.narrow(2, 0, oh * k)?.narrow(3, 0, ow * k)?
    } else {
        x.clone()
    };
    Ok(x.reshape((n, c, oh, k, ow, k))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((n, c, oh, ow, k * k))?
        .max(D::Minus1)?)
}

/// Global spatial mean of an N×C×H×W tensor, returning N×C.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// Adaptive average pooling to `out`×`out` with PyTorch's window rule.
pub fn adaptive_avg_pool(x: &Tensor, out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out && w == out {
        return Ok(x.clone());
    }
    let bounds = |i: usize, len: usize| (i * len / out, ((i + 1) * len).div_ceil(out));
    let mut rows = Vec::with_capacity(out);
    for i in 0..out {
        let (r0, r1) = bounds(i, h);
        let band = x.narrow(2, r0, r1 - r0)?;
        let mut cells = Vec::with_capacity(out);
        for j in 0..out {
            let (c0, c1) = bounds(j, w);
            cells.push(band.narrow(3, c0, c1 - c0)?.mean_keepdim((2, 3))?);
        }
        rows.push(Tensor::cat(&cells, 3)?);
    }
    Ok(Tensor::cat(&rows, 2)?)
}

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of named variables. Variables without a gradient
/// in a step are left untouched, moments included.
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor, u64)>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            vars,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        for (name, var) in &self.vars {
            // Gradients carry op history back into the forward graph; storing
            // them attached would keep every step's graph alive.
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else {
                continue;
            };
            let (m, v, t) = match self.moments.get(name) {
                Some((m, v, t)) => (m.clone(), v.clone(), *t),
                None => (g.zeros_like()?, g.zeros_like()?, 0),
            };
            let t = t + 1;
            let m = ((m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / (1.0 - beta1.powi(t as i32)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach(), t));
        }
        Ok(())
    }

    /// Moment tensors (`m.<name>`, `v.<name>`) and per-variable step counts.
    pub fn state(&self) -> (HashMap<String, Tensor>, BTreeMap<String, u64>) {
        let mut tensors = HashMap::new();
        let mut steps = BTreeMap::new();
        for (name, (m, v, t)) in &self.moments {
            tensors.insert(format!("m.{name}"), m.clone());
            tensors.insert(format!("v.{name}"), v.clone());
            steps.insert(name.clone(), *t);
        }
        (tensors, steps)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, steps: &BTreeMap<String, u64>) -> Result<()> {
        self.moments.clear();
        for (name, &t) in steps {
            let var = self
                .vars
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown `{name}`")))?;
            let get = |key: String| {
                tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer tensor `{key}` missing")))
                    .and_then(|x| Ok(x.to_dtype(var.dtype())?))
            };
            let m = get(format!("m.{name}"))?;
            let v = get(format!("v.{name}"))?;
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
            }
            self.moments.insert(name.clone(), (m.detach(), v.detach(), t));
        }
        Ok(())
    }
}
