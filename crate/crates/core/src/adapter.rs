//! Trainable embedding adapter: a small rectifier MLP mapping `R^e -> R^e`,
//! optionally blended with the identity.
//!
//! The output for a batch `x` is `blend * mlp(x) + (1 - blend) * x`. Training
//! runs in `f32`; the same code instantiated at `f64` is used for gradient
//! verification.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element types the adapter can be instantiated at.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shape and blend of an adapter, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub blend: f64,
}

impl AdapterSpec {
    /// Two-layer adapter with hidden width equal to `dim` and no identity blend.
    pub fn two_layer(dim: usize) -> Self {
        Self {
            dim,
            depth: 2,
            hidden: dim,
            blend: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("adapter dim and hidden width must be positive".into()));
        }
        if !(2..=3).contains(&self.depth) {
            return Err(Error::Config(format!("adapter depth must be 2 or 3, got {}", self.depth)));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!("blend {} outside [0, 1]", self.blend)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let widths = self.widths();
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim];
        w.extend(std::iter::repeat_n(self.hidden, self.depth - 1));
        w.push(self.dim);
        w
    }
}

/// Fully connected layer; `weight` is `in x out` so a batch maps as `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn cast<U: Scalar>(&self) -> Dense<U> {
        let conv = |v: &T| U::from_f64_lossy(v.to_f64().unwrap());
        Dense {
            weight: self.weight.map(conv),
            bias: self.bias.map(conv),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    blend: T,
    // Bumped on every parameter update so stale forward caches are detectable.
    version: u64,
}

/// The adapter as trained and stored.
pub type AdapterMLP = Mlp<f32>;

/// Activations recorded by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    version: u64,
    input: Array2<T>,
    // Input to every layer (the batch, then each rectified hidden output).
    layer_inputs: Vec<Array2<T>>,
    // Pre-activations of the hidden layers.
    hidden_pre: Vec<Array2<T>>,
}

/// Parameter gradients, layer by layer, plus the gradient w.r.t. the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
    pub input: Array2<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<T> {
        flatten(&self.layers)
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn flatten<T: Scalar>(layers: &[Dense<T>]) -> Vec<T> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

impl<T: Scalar> Mlp<T> {
    /// Fan-in scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero
    /// biases. Identical arguments give bitwise-identical parameters.
    pub fn init(spec: AdapterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((w[0], w[1]), || {
                    T::from_f64_lossy(rng.random_range(-bound..bound))
                });
                Dense {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            blend: T::from_f64_lossy(spec.blend),
            version: 0,
        })
    }

    /// Builds an adapter from explicit layers; widths must chain and the
    /// first input must equal the last output.
    pub fn from_layers(layers: Vec<Dense<T>>, blend: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("adapter needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape("bias length must equal layer output width".into()));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation("adapter parameters must be finite".into()));
            }
        }
        if layers[0].in_dim() != layers[layers.len() - 1].out_dim() {
            return Err(Error::Shape("adapter input and output widths must match".into()));
        }
        if !(0.0..=1.0).contains(&blend) {
            return Err(Error::Config(format!("blend {blend} outside [0, 1]")));
        }
        Ok(Self {
            layers,
            blend: T::from_f64_lossy(blend),
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn blend(&self) -> T {
        self.blend
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<T> {
        flatten(&self.layers)
    }

    fn param_mut(&mut self, mut index: usize) -> &mut T {
        for l in &mut self.layers {
            let (nw, nb) = (l.weight.len(), l.bias.len());
            if index < nw {
                return l.weight.iter_mut().nth(index).unwrap();
            }
            index -= nw;
            if index < nb {
                return &mut l.bias[index];
            }
            index -= nb;
        }
        panic!("parameter index out of range")
    }

    /// Overwrites one parameter addressed in [`Mlp::params_flat`] order.
    pub fn set_param(&mut self, index: usize, value: T) {
        *self.param_mut(index) = value;
        self.version += 1;
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(Dense::cast).collect(),
            blend: U::from_f64_lossy(self.blend.to_f64().unwrap()),
            version: self.version,
        }
    }

    fn check_width(&self, batch: &ArrayView2<T>) -> Result<()> {
        if batch.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "batch width {} does not match adapter width {}",
                batch.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn apply(&self, batch: ArrayView2<T>) -> Result<Array2<T>> {
        self.forward(batch).map(|(out, _)| out)
    }

    pub fn forward(&self, batch: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_width(&batch)?;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut current = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weight) + &layer.bias;
            layer_inputs.push(current);
            if i < last {
                current = z.mapv(relu);
                hidden_pre.push(z);
            } else {
                current = z;
            }
        }
        let one = T::one();
        let out = if self.blend == one {
            current
        } else {
            let keep = one - self.blend;
            let mut out = current * self.blend;
            out.scaled_add(keep, &batch);
            out
        };
        let cache = ForwardCache {
            version: self.version,
            input: batch.to_owned(),
            layer_inputs,
            hidden_pre,
        };
        Ok((out, cache))
    }

    /// Exact reverse-mode gradients of the cached forward pass. The rectifier
    /// derivative at exactly zero is taken as zero.
    pub fn backward(&self, cache: &ForwardCache<T>, out_grad: ArrayView2<T>) -> Result<Gradients<T>> {
        if cache.version != self.version
            || cache.layer_inputs.len() != self.layers.len()
            || cache.layer_inputs[0].ncols() != self.dim()
        {
            return Err(Error::Contract(
                "forward cache does not belong to the current adapter parameters".into(),
            ));
        }
        if out_grad.dim() != cache.input.dim() {
            return Err(Error::Shape(format!(
                "output gradient shape {:?} does not match batch shape {:?}",
                out_grad.dim(),
                cache.input.dim()
            )));
        }

        let mut delta = out_grad.to_owned() * self.blend;
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let weight = cache.layer_inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            let mut upstream = delta.dot(&layer.weight.t());
            if i > 0 {
                Zip::from(&mut upstream)
                    .and(&cache.hidden_pre[i - 1])
                    .for_each(|g, &z| {
                        if z <= T::zero() {
                            *g = T::zero();
                        }
                    });
            }
            delta = upstream;
        }
        grads.reverse();
        let mut input = delta;
        input.scaled_add(T::one() - self.blend, &out_grad);
        Ok(Gradients {
            layers: grads,
            input,
        })
    }

    fn zero_like(&self) -> Vec<Dense<T>> {
        self.layers
            .iter()
            .map(|l| Dense {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect()
    }
}

impl AdapterMLP {
    pub fn to_f64(&self) -> Mlp<f64> {
        self.cast()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd-momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Optimizer state for one adapter.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Dense<T>>,
    second: Vec<Dense<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, model: &Mlp<T>) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: model.zero_like(),
            second: model.zero_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one in-place update. Non-finite gradients abort before any
    /// parameter changes.
    pub fn step(&mut self, model: &mut Mlp<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.layers.len() != model.layers.len()
            || grads
                .layers
                .iter()
                .zip(&model.layers)
                .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len())
        {
            return Err(Error::Shape("gradient shapes do not match the adapter".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.steps += 1;
        let lr = T::from_f64_lossy(self.lr);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = T::from_f64_lossy(momentum);
                for ((p, g), v) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.first) {
                    let sgd = |p: &mut T, g: &T, v: &mut T| {
                        *v = mu * *v + *g;
                        *p = *p - lr * *v;
                    };
                    Zip::from(&mut p.weight).and(&g.weight).and(&mut v.weight).for_each(sgd);
                    Zip::from(&mut p.bias).and(&g.bias).and(&mut v.bias).for_each(sgd);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                let c1 = T::one() - T::from_f64_lossy(beta1.powi(t));
                let c2 = T::one() - T::from_f64_lossy(beta2.powi(t));
                let eps = T::from_f64_lossy(eps);
                let one = T::one();
                let adam = |p: &mut T, g: &T, m: &mut T, v: &mut T| {
                    *m = b1 * *m + (one - b1) * *g;
                    *v = b2 * *v + (one - b2) * *g * *g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                };
                for (((p, g), m), v) in model
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    Zip::from(&mut p.weight)
                        .and(&g.weight)
                        .and(&mut m.weight)
                        .and(&mut v.weight)
                        .for_each(adam);
                    Zip::from(&mut p.bias)
                        .and(&g.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .for_each(adam);
                }
            }
        }
        model.version += 1;
        Ok(())
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Gradients below this magnitude are compared absolutely rather than
/// relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Scalar loss of the adapter output, returning the value and its gradient
/// with respect to the output.
pub type OutputLoss<'a> = dyn Fn(ArrayView2<f64>) -> Result<(f64, Array2<f64>)> + 'a;

/// Checks every parameter's analytic gradient of `loss(adapter(batch))`
/// against a central difference with the given step.
pub fn grad_check(
    model: &Mlp<f64>,
    loss: &OutputLoss<'_>,
    batch: ArrayView2<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (out, cache) = model.forward(batch)?;
    let (_, out_grad) = loss(out.view())?;
    let analytic = model.backward(&cache, out_grad.view())?;
    compare_gradients(model, loss, batch, &analytic, step, tol)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients.
pub fn compare_gradients(
    model: &Mlp<f64>,
    loss: &OutputLoss<'_>,
    batch: ArrayView2<f64>,
    analytic: &Gradients<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic.flat();
    if analytic.len() != model.param_count() {
        return Err(Error::Shape("analytic gradient length mismatch".into()));
    }
    let base = model.params_flat();
    let mut probe = model.clone();
    let mut eval_at = |i: usize, v: f64| -> Result<f64> {
        probe.set_param(i, v);
        let out = probe.apply(batch)?;
        Ok(loss(out.view())?.0)
    };

    let mut report = GradCheckReport {
        checked: base.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: 0,
        tol,
        passed: true,
    };
    for (i, &p) in base.iter().enumerate() {
        let plus = eval_at(i, p + step)?;
        let minus = eval_at(i, p - step)?;
        eval_at(i, p)?;
        let numeric = (plus - minus) / (2.0 * step);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if !rel.is_finite() || rel > report.max_rel_error {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_param = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes an adapter chain.
///
/// Layout (little-endian): magic `LDCK`, u32 version, u32 dtype (1 = f32),
/// u32 adapter count; then per adapter an f32 blend and u32 layer count; then
/// per layer u32 in, u32 out, u64 weight offset, u64 bias offset (offsets in
/// f32 elements from the payload start); then the f32 payload.
pub fn encode_checkpoint(chain: &[AdapterMLP]) -> Vec<u8> {
    let mut header = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    header.extend_from_slice(CHECKPOINT_MAGIC);
    header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    header.extend_from_slice(&1u32.to_le_bytes());
    header.extend_from_slice(&(chain.len() as u32).to_le_bytes());
    for adapter in chain {
        header.extend_from_slice(&adapter.blend.to_le_bytes());
        header.extend_from_slice(&(adapter.layers.len() as u32).to_le_bytes());
        for layer in &adapter.layers {
            header.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            header.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            payload.extend(layer.weight.iter().copied());
            header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            payload.extend(layer.bias.iter().copied());
        }
    }
    for v in payload {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<AdapterMLP>> {
    struct Cursor<'a>(&'a [u8], usize);
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            let end = self.1 + n;
            let s = self
                .0
                .get(self.1..end)
                .ok_or_else(|| Error::Length("checkpoint truncated".into()))?;
            self.1 = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    let mut c = Cursor(bytes, 0);
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if c.u32()? != CHECKPOINT_VERSION || c.u32()? != 1 {
        return Err(Error::Format("unsupported checkpoint version or dtype".into()));
    }
    let adapters = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(adapters);
    for _ in 0..adapters {
        let blend = f32::from_bits(c.u32()?);
        let n_layers = c.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (i, o) = (c.u32()? as usize, c.u32()? as usize);
            let (w_off, b_off) = (c.u64()? as usize, c.u64()? as usize);
            layers.push((i, o, w_off, b_off));
        }
        manifest.push((blend, layers));
    }
    let payload: Vec<f32> = bytes[c.1..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if (bytes.len() - c.1) % 4 != 0 {
        return Err(Error::Length("checkpoint payload is not whole f32 values".into()));
    }
    let slice = |off: usize, len: usize| -> Result<Vec<f32>> {
        payload
            .get(off..off + len)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| Error::Length("checkpoint payload truncated".into()))
    };
    manifest
        .into_iter()
        .map(|(blend, layers)| {
            let layers = layers
                .into_iter()
                .map(|(i, o, w_off, b_off)| {
                    Ok(Dense {
                        weight: Array2::from_shape_vec((i, o), slice(w_off, i * o)?)
                            .map_err(|e| Error::Shape(e.to_string()))?,
                        bias: Array1::from(slice(b_off, o)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Mlp::from_layers(layers, blend as f64).map(|mut m| {
                m.blend = blend;
                m
            })
        })
        .collect()
}

pub fn write_checkpoint(chain: &[AdapterMLP], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(chain)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<AdapterMLP>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
