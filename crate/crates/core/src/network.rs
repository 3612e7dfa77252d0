//! Encoder, stack of residual LRU blocks, decoder.
//!
//! Each block computes
//!
//! ```text
//! u   = LayerNorm(z)
//! y   = LRU(u)                       (stateful)
//! g   = (W1 y + b1) ⊙ sigmoid(W2 y + b2)
//! z'  = z + dropout(g)
//! ```
//!
//! [`forward_step`] advances every layer by one timestep and returns a
//! [`StepCache`] holding exactly that timestep's activations.
//! [`spatial_backward_step`] backpropagates an output error through depth
//! at that same timestep, treating `h_{t-1}` as a constant, and produces the
//! Wirtinger error `delta_t^l = dL_t/dh_t^l` of every layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lru::{self, init_lru, LruCoeffs, LruParams, LruState};
use crate::numerics::{matvec_into, matvec_t_acc, outer_acc, sigmoid, Complex, ComplexVector, Matrix, ZERO};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub state_size: usize,
    pub model_size: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub dropout: f64,
    /// Ring used to initialize `|lambda|`.
    pub r_min: f64,
    pub r_max: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.state_size == 0 || self.model_size == 0 {
            return bad("state_size and model_size must be >= 1".into());
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input_dim and output_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.r_min) || self.r_max <= self.r_min || self.r_max > 1.0 {
            return Err(Error::InvalidRadius {
                r_min: self.r_min,
                r_max: self.r_max,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        matvec_into(&self.weight, x, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Glu {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm: LayerNorm,
    pub lru: LruParams,
    pub glu: Glu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Affine,
    pub blocks: Vec<Block>,
    pub decoder: Affine,
}

/// Borrowed view of one named parameter tensor.
pub enum TensorRef<'a> {
    Real(&'a [f64]),
    /// Stored as interleaved `(re, im)` real pairs when flattened.
    Complex(&'a [Complex]),
}

pub enum TensorMut<'a> {
    Real(&'a mut [f64]),
    Complex(&'a mut [Complex]),
}

impl TensorRef<'_> {
    pub fn real_len(&self) -> usize {
        match self {
            TensorRef::Real(v) => v.len(),
            TensorRef::Complex(v) => 2 * v.len(),
        }
    }

    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        match self {
            TensorRef::Real(v) => out.extend_from_slice(v),
            TensorRef::Complex(v) => out.extend(v.iter().flat_map(|z| [z.re, z.im])),
        }
    }
}

impl TensorMut<'_> {
    pub fn real_len(&self) -> usize {
        match self {
            TensorMut::Real(v) => v.len(),
            TensorMut::Complex(v) => 2 * v.len(),
        }
    }

    /// Overwrites the tensor from a flat real slice of length [`Self::real_len`].
    pub fn load_flat(&mut self, src: &[f64]) {
        match self {
            TensorMut::Real(v) => v.copy_from_slice(src),
            TensorMut::Complex(v) => {
                for (z, pair) in v.iter_mut().zip(src.chunks_exact(2)) {
                    *z = Complex::new(pair[0], pair[1]);
                }
            }
        }
    }

    pub fn get(&self, k: usize) -> f64 {
        match self {
            TensorMut::Real(v) => v[k],
            TensorMut::Complex(v) => {
                if k.is_multiple_of(2) {
                    v[k / 2].re
                } else {
                    v[k / 2].im
                }
            }
        }
    }

    pub fn set(&mut self, k: usize, value: f64) {
        match self {
            TensorMut::Real(v) => v[k] = value,
            TensorMut::Complex(v) => {
                if k.is_multiple_of(2) {
                    v[k / 2].re = value
                } else {
                    v[k / 2].im = value
                }
            }
        }
    }
}

/// Name and shape of a parameter tensor; complex tensors carry a trailing `2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names of the parameters that shape the recurrence of block `layer`.
pub fn recurrent_param_names(layer: usize) -> [String; 4] {
    ["nu_log", "theta_log", "gamma_log", "b"].map(|p| format!("blocks.{layer}.lru.{p}"))
}

pub fn is_recurrent_param(name: &str) -> bool {
    name.ends_with(".lru.nu_log") || name.ends_with(".lru.theta_log") || name.ends_with(".lru.gamma_log")
}

/// Block index encoded in a parameter name, `None` for encoder/decoder.
pub fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

impl Network {
    /// All parameters zero, layer-norm scales one, `|lambda| = e^-1`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.model_size;
        let blocks = (0..config.num_layers)
            .map(|_| {
                Ok(Block {
                    norm: LayerNorm {
                        scale: vec![1.0; h],
                        bias: vec![0.0; h],
                    },
                    lru: LruParams::zeros(config.state_size, h)?,
                    glu: Glu {
                        w1: Matrix::zeros(h, h),
                        b1: vec![0.0; h],
                        w2: Matrix::zeros(h, h),
                        b2: vec![0.0; h],
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            encoder: Affine::zeros(h, config.input_dim),
            blocks,
            decoder: Affine::zeros(config.output_dim, h),
        })
    }

    /// Random initialization: LeCun-normal affine maps, zero biases, ring-sampled LRUs.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let h = config.model_size;
        fill_normal(rng, net.encoder.weight.as_mut_slice(), 1.0 / config.input_dim as f64);
        for block in &mut net.blocks {
            block.lru = init_lru(rng, config.state_size, h, config.r_min, config.r_max)?;
            fill_normal(rng, block.glu.w1.as_mut_slice(), 1.0 / h as f64);
            fill_normal(rng, block.glu.w2.as_mut_slice(), 1.0 / h as f64);
        }
        fill_normal(rng, net.decoder.weight.as_mut_slice(), 1.0 / h as f64);
        Ok(net)
    }

    /// Same shapes, every entry zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.visit_mut(|_, t| match t {
            TensorMut::Real(v) => v.fill(0.0),
            TensorMut::Complex(v) => v.fill(ZERO),
        });
        g
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Visits every parameter tensor in canonical order.
    pub fn visit(&self, mut f: impl FnMut(&TensorSpec, TensorRef<'_>)) {
        let (h, n) = (self.config.model_size, self.config.state_size);
        let (i, o) = (self.config.input_dim, self.config.output_dim);
        let spec = |name: String, shape: Vec<usize>| TensorSpec { name, shape };
        f(&spec("encoder.weight".into(), vec![h, i]), TensorRef::Real(self.encoder.weight.as_slice()));
        f(&spec("encoder.bias".into(), vec![h]), TensorRef::Real(&self.encoder.bias));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            f(&spec(p("norm.scale"), vec![h]), TensorRef::Real(&b.norm.scale));
            f(&spec(p("norm.bias"), vec![h]), TensorRef::Real(&b.norm.bias));
            f(&spec(p("lru.nu_log"), vec![n]), TensorRef::Real(&b.lru.nu_log));
            f(&spec(p("lru.theta_log"), vec![n]), TensorRef::Real(&b.lru.theta_log));
            f(&spec(p("lru.gamma_log"), vec![n]), TensorRef::Real(&b.lru.gamma_log));
            f(&spec(p("lru.b"), vec![n, h, 2]), TensorRef::Complex(b.lru.b.as_slice()));
            f(&spec(p("lru.c"), vec![h, n, 2]), TensorRef::Complex(b.lru.c.as_slice()));
            f(&spec(p("lru.d"), vec![h, h]), TensorRef::Real(b.lru.d.as_slice()));
            f(&spec(p("glu.w1"), vec![h, h]), TensorRef::Real(b.glu.w1.as_slice()));
            f(&spec(p("glu.b1"), vec![h]), TensorRef::Real(&b.glu.b1));
            f(&spec(p("glu.w2"), vec![h, h]), TensorRef::Real(b.glu.w2.as_slice()));
            f(&spec(p("glu.b2"), vec![h]), TensorRef::Real(&b.glu.b2));
        }
        f(&spec("decoder.weight".into(), vec![o, h]), TensorRef::Real(self.decoder.weight.as_slice()));
        f(&spec("decoder.bias".into(), vec![o]), TensorRef::Real(&self.decoder.bias));
    }

    /// Mutable counterpart of [`Network::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&TensorSpec, TensorMut<'_>)) {
        let (h, n) = (self.config.model_size, self.config.state_size);
        let (i, o) = (self.config.input_dim, self.config.output_dim);
        let spec = |name: String, shape: Vec<usize>| TensorSpec { name, shape };
        f(&spec("encoder.weight".into(), vec![h, i]), TensorMut::Real(self.encoder.weight.as_mut_slice()));
        f(&spec("encoder.bias".into(), vec![h]), TensorMut::Real(&mut self.encoder.bias));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            f(&spec(p("norm.scale"), vec![h]), TensorMut::Real(&mut b.norm.scale));
            f(&spec(p("norm.bias"), vec![h]), TensorMut::Real(&mut b.norm.bias));
            f(&spec(p("lru.nu_log"), vec![n]), TensorMut::Real(&mut b.lru.nu_log));
            f(&spec(p("lru.theta_log"), vec![n]), TensorMut::Real(&mut b.lru.theta_log));
            f(&spec(p("lru.gamma_log"), vec![n]), TensorMut::Real(&mut b.lru.gamma_log));
            f(&spec(p("lru.b"), vec![n, h, 2]), TensorMut::Complex(b.lru.b.as_mut_slice()));
            f(&spec(p("lru.c"), vec![h, n, 2]), TensorMut::Complex(b.lru.c.as_mut_slice()));
            f(&spec(p("lru.d"), vec![h, h]), TensorMut::Real(b.lru.d.as_mut_slice()));
            f(&spec(p("glu.w1"), vec![h, h]), TensorMut::Real(b.glu.w1.as_mut_slice()));
            f(&spec(p("glu.b1"), vec![h]), TensorMut::Real(&mut b.glu.b1));
            f(&spec(p("glu.w2"), vec![h, h]), TensorMut::Real(b.glu.w2.as_mut_slice()));
            f(&spec(p("glu.b2"), vec![h]), TensorMut::Real(&mut b.glu.b2));
        }
        f(&spec("decoder.weight".into(), vec![o, h]), TensorMut::Real(self.decoder.weight.as_mut_slice()));
        f(&spec("decoder.bias".into(), vec![o]), TensorMut::Real(&mut self.decoder.bias));
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        self.visit(|s, _| out.push(s.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.real_len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(|_, t| t.extend_flat(&mut out));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::Dimension {
                context: "Network::load_flat",
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        self.visit_mut(|_, mut t| {
            let len = t.real_len();
            t.load_flat(&flat[offset..offset + len]);
            offset += len;
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub(crate) fn coeffs(&self) -> Vec<LruCoeffs> {
        self.blocks.iter().map(|b| b.lru.coeffs()).collect()
    }

    pub fn initial_state(&self) -> NetState {
        NetState {
            layers: (0..self.num_layers())
                .map(|_| LruState::zeros(self.config.state_size))
                .collect(),
            position: 0,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(|_, t| match t {
            TensorMut::Real(v) => v.iter_mut().for_each(|x| *x *= factor),
            TensorMut::Complex(v) => v.iter_mut().for_each(|x| *x *= factor),
        });
    }

    /// Adds `other` into `self` entry by entry (gradient merge).
    pub fn add_assign(&mut self, other: &Network) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut(|_, mut t| {
            let len = t.real_len();
            for k in 0..len {
                let v = t.get(k) + flat[offset + k];
                t.set(k, v);
            }
            offset += len;
        });
    }
}

fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], variance: f64) {
    let dist = Normal::new(0.0, variance.sqrt()).expect("positive variance");
    for v in out {
        *v = dist.sample(rng);
    }
}

/// Hidden state of every layer plus the number of steps consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState {
    pub layers: Vec<LruState>,
    position: u64,
}

impl NetState {
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().map(|s| s.h.len()).sum()
    }
}

/// Activations of one block at one timestep.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: f64,
    /// Normalized block input, i.e. the LRU input `x_t`.
    pub lru_in: Vec<f64>,
    pub h_prev: ComplexVector,
    pub h: ComplexVector,
    /// `B x_t` before the `gamma` scaling.
    pub bx: ComplexVector,
    pub lru_out: Vec<f64>,
    pub glu_lin: Vec<f64>,
    pub glu_gate: Vec<f64>,
    /// Inverted-dropout multipliers, empty when dropout is off.
    pub dropout: Vec<f64>,
}

impl LayerCache {
    fn new(n: usize, h: usize) -> Self {
        Self {
            input: vec![0.0; h],
            xhat: vec![0.0; h],
            inv_std: 0.0,
            lru_in: vec![0.0; h],
            h_prev: vec![ZERO; n],
            h: vec![ZERO; n],
            bx: vec![ZERO; n],
            lru_out: vec![0.0; h],
            glu_lin: vec![0.0; h],
            glu_gate: vec![0.0; h],
            dropout: Vec::new(),
        }
    }

    fn entry_count(&self) -> usize {
        self.input.len()
            + self.xhat.len()
            + 1
            + self.lru_in.len()
            + 2 * (self.h_prev.len() + self.h.len() + self.bx.len())
            + self.lru_out.len()
            + self.glu_lin.len()
            + self.glu_gate.len()
            + self.dropout.len()
    }
}

/// Everything spatial backprop needs from a single timestep; nothing older.
#[derive(Clone, Debug)]
pub struct StepCache {
    position: u64,
    pub input: Vec<f64>,
    pub layers: Vec<LayerCache>,
    /// Residual stream entering the decoder.
    pub top: Vec<f64>,
    pub logits: Vec<f64>,
}

impl StepCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            position: 0,
            input: vec![0.0; config.input_dim],
            layers: (0..config.num_layers)
                .map(|_| LayerCache::new(config.state_size, config.model_size))
                .collect(),
            top: vec![0.0; config.model_size],
            logits: vec![0.0; config.output_dim],
        }
    }

    /// 1-based timestep this cache was produced at.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Real scalars held (complex entries count twice).
    pub fn entry_count(&self) -> usize {
        self.input.len() + self.layers.iter().map(LayerCache::entry_count).sum::<usize>() + self.top.len() + self.logits.len()
    }
}

/// Dropout seed for one sequence; `None` disables dropout (evaluation mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey(pub u64);

fn dropout_rng(key: DropoutKey, layer: usize, position: u64) -> ChaCha8Rng {
    let mut z = key.0 ^ 0x9e37_79b9_7f4a_7c15;
    for v in [layer as u64, position] {
        z = splitmix(z ^ v.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    ChaCha8Rng::seed_from_u64(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix(acc ^ p))
}

/// Layer norm forward. Returns `(output, xhat, 1/sqrt(var + eps))`.
pub fn layer_norm_step(x: &[f64], scale: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let inv_std = layer_norm_into(x, scale, bias, &mut xhat, &mut out);
    (out, xhat, inv_std)
}

#[inline]
fn layer_norm_into(x: &[f64], scale: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = xhat[i] * scale[i] + bias[i];
    }
    inv_std
}

/// Layer norm backward. Returns `(dL/dx, dL/dscale, dL/dbias)`.
pub fn layer_norm_backward(g_out: &[f64], xhat: &[f64], inv_std: f64, scale: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; g_out.len()];
    let mut gs = vec![0.0; g_out.len()];
    let mut gb = vec![0.0; g_out.len()];
    layer_norm_backward_acc(g_out, xhat, inv_std, scale, &mut gx, &mut gs, &mut gb);
    (gx, gs, gb)
}

#[inline]
fn layer_norm_backward_acc(
    g_out: &[f64],
    xhat: &[f64],
    inv_std: f64,
    scale: &[f64],
    gx: &mut [f64],
    gscale: &mut [f64],
    gbias: &mut [f64],
) {
    let n = g_out.len() as f64;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for i in 0..g_out.len() {
        gscale[i] += g_out[i] * xhat[i];
        gbias[i] += g_out[i];
        let gh = g_out[i] * scale[i];
        mean_g += gh;
        mean_gx += gh * xhat[i];
    }
    mean_g /= n;
    mean_gx /= n;
    for i in 0..g_out.len() {
        let gh = g_out[i] * scale[i];
        gx[i] += inv_std * (gh - mean_g - xhat[i] * mean_gx);
    }
}

fn check_state(net: &Network, state: &NetState) -> Result<()> {
    if state.layers.len() != net.num_layers() {
        return Err(Error::Dimension {
            context: "network state layers",
            expected: net.num_layers(),
            actual: state.layers.len(),
        });
    }
    Ok(())
}

/// Advances the network by one timestep (evaluation mode, no dropout).
pub fn forward_step(net: &Network, state: &mut NetState, x: &[f64]) -> Result<(Vec<f64>, StepCache)> {
    forward_step_with_dropout(net, state, x, None)
}

pub fn forward_step_with_dropout(
    net: &Network,
    state: &mut NetState,
    x: &[f64],
    dropout: Option<DropoutKey>,
) -> Result<(Vec<f64>, StepCache)> {
    check_state(net, state)?;
    if x.len() != net.config.input_dim {
        return Err(Error::Dimension {
            context: "forward_step input",
            expected: net.config.input_dim,
            actual: x.len(),
        });
    }
    let coeffs = net.coeffs();
    let mut cache = StepCache::new(&net.config);
    forward_step_into(net, &coeffs, state, x, dropout, &mut cache);
    Ok((cache.logits.clone(), cache))
}

/// Allocation-free forward step used by the learning rules.
pub(crate) fn forward_step_into(
    net: &Network,
    coeffs: &[LruCoeffs],
    state: &mut NetState,
    x: &[f64],
    dropout: Option<DropoutKey>,
    cache: &mut StepCache,
) {
    state.position += 1;
    cache.position = state.position;
    cache.input.copy_from_slice(x);
    let p = net.config.dropout;
    let keep = 1.0 - p;

    let mut z = std::mem::take(&mut cache.top);
    net.encoder.apply(x, &mut z);

    for (l, ((block, lc), (co, st))) in net
        .blocks
        .iter()
        .zip(cache.layers.iter_mut())
        .zip(coeffs.iter().zip(state.layers.iter_mut()))
        .enumerate()
    {
        lc.input.copy_from_slice(&z);
        lc.inv_std = layer_norm_into(&z, &block.norm.scale, &block.norm.bias, &mut lc.xhat, &mut lc.lru_in);
        lc.h_prev.copy_from_slice(&st.h);
        lru::step_in_place(&block.lru, co, &mut st.h, &lc.lru_in, &mut lc.bx, &mut lc.lru_out);
        lc.h.copy_from_slice(&st.h);

        matvec_into(&block.glu.w1, &lc.lru_out, &mut lc.glu_lin);
        matvec_into(&block.glu.w2, &lc.lru_out, &mut lc.glu_gate);
        for i in 0..z.len() {
            lc.glu_lin[i] += block.glu.b1[i];
            lc.glu_gate[i] = sigmoid(lc.glu_gate[i] + block.glu.b2[i]);
        }

        match dropout {
            Some(key) if p > 0.0 => {
                let mut rng = dropout_rng(key, l, state.position);
                lc.dropout.clear();
                lc.dropout
                    .extend((0..z.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }));
                for i in 0..z.len() {
                    z[i] += lc.dropout[i] * lc.glu_lin[i] * lc.glu_gate[i];
                }
            }
            _ => {
                lc.dropout.clear();
                for i in 0..z.len() {
                    z[i] += lc.glu_lin[i] * lc.glu_gate[i];
                }
            }
        }
    }

    net.decoder.apply(&z, &mut cache.logits);
    cache.top = z;
}

/// Spatial backprop through one timestep.
///
/// Returns the Wirtinger error `dL_t/dh_t^l` of every layer and the
/// instantaneous gradient of every parameter outside `{lambda, gamma, B}`
/// (the recurrent entries of the returned gradient are zero).
pub fn spatial_backward_step(
    net: &Network,
    state: &NetState,
    cache: &StepCache,
    dl_dy: &[f64],
) -> Result<(Vec<ComplexVector>, Network)> {
    check_state(net, state)?;
    if cache.position != state.position {
        return Err(Error::StaleCache {
            cache: cache.position,
            current: state.position,
        });
    }
    if cache.layers.len() != net.num_layers() || dl_dy.len() != net.config.output_dim {
        return Err(Error::Dimension {
            context: "spatial_backward_step",
            expected: net.config.output_dim,
            actual: dl_dy.len(),
        });
    }
    let coeffs = net.coeffs();
    let mut grads = net.zeros_like();
    let mut scratch = BackwardScratch::new(&net.config);
    backward_step_into(net, &coeffs, cache, dl_dy, None, &mut grads, &mut scratch);
    Ok((scratch.deltas, grads))
}

/// Reusable buffers for [`backward_step_into`].
#[derive(Clone, Debug)]
pub(crate) struct BackwardScratch {
    /// Per-layer `dL/dh_t` (instantaneous plus carry, if any).
    pub deltas: Vec<ComplexVector>,
    g_stream: Vec<f64>,
    g_glu: Vec<f64>,
    g_lin: Vec<f64>,
    g_gate: Vec<f64>,
    g_y: Vec<f64>,
    g_n: Vec<f64>,
    g_x: Vec<f64>,
    gamma_delta: ComplexVector,
}

impl BackwardScratch {
    pub fn new(config: &ModelConfig) -> Self {
        let h = config.model_size;
        Self {
            deltas: vec![vec![ZERO; config.state_size]; config.num_layers],
            g_stream: vec![0.0; h],
            g_glu: vec![0.0; h],
            g_lin: vec![0.0; h],
            g_gate: vec![0.0; h],
            g_y: vec![0.0; h],
            g_n: vec![0.0; h],
            g_x: vec![0.0; h],
            gamma_delta: vec![ZERO; config.state_size],
        }
    }
}

/// Backprop through depth at one timestep, accumulating into `grads`.
///
/// `carry[l]`, when given, is added to layer `l`'s instantaneous error before
/// it is propagated into the LRU input (the BPTT oracle passes
/// `lambda ⊙ delta_{t+1}` here; the online rules pass nothing).
pub(crate) fn backward_step_into(
    net: &Network,
    coeffs: &[LruCoeffs],
    cache: &StepCache,
    dl_dy: &[f64],
    carry: Option<&[ComplexVector]>,
    grads: &mut Network,
    s: &mut BackwardScratch,
) {
    outer_acc(&mut grads.decoder.weight, dl_dy, &cache.top);
    for (g, d) in grads.decoder.bias.iter_mut().zip(dl_dy) {
        *g += d;
    }
    s.g_stream.fill(0.0);
    matvec_t_acc(&net.decoder.weight, dl_dy, &mut s.g_stream);

    for l in (0..net.num_layers()).rev() {
        let block = &net.blocks[l];
        let gb = &mut grads.blocks[l];
        let lc = &cache.layers[l];
        let h = s.g_stream.len();

        // residual branch: z' = z + drop(lin * gate)
        for i in 0..h {
            let g = if lc.dropout.is_empty() {
                s.g_stream[i]
            } else {
                s.g_stream[i] * lc.dropout[i]
            };
            s.g_glu[i] = g;
            s.g_lin[i] = g * lc.glu_gate[i];
            s.g_gate[i] = g * lc.glu_lin[i] * lc.glu_gate[i] * (1.0 - lc.glu_gate[i]);
        }
        outer_acc(&mut gb.glu.w1, &s.g_lin, &lc.lru_out);
        outer_acc(&mut gb.glu.w2, &s.g_gate, &lc.lru_out);
        for i in 0..h {
            gb.glu.b1[i] += s.g_lin[i];
            gb.glu.b2[i] += s.g_gate[i];
        }
        s.g_y.fill(0.0);
        matvec_t_acc(&block.glu.w1, &s.g_lin, &mut s.g_y);
        matvec_t_acc(&block.glu.w2, &s.g_gate, &mut s.g_y);

        // y = Re[C h] + D x
        outer_acc(&mut gb.lru.d, &s.g_y, &lc.lru_in);
        s.g_n.fill(0.0);
        matvec_t_acc(&block.lru.d, &s.g_y, &mut s.g_n);
        let n = lc.h.len();
        let delta = &mut s.deltas[l];
        delta.fill(ZERO);
        for (k, &gy) in s.g_y.iter().enumerate() {
            if gy == 0.0 {
                continue;
            }
            let crow = block.lru.c.row(k);
            let gcrow = gb.lru.c.row_mut(k);
            for j in 0..n {
                // d Re[c h]/d Re c = Re h, d/d Im c = -Im h
                gcrow[j].re += gy * lc.h[j].re;
                gcrow[j].im -= gy * lc.h[j].im;
                // Wirtinger: d Re[c h]/dh = c / 2
                delta[j] += crow[j] * (0.5 * gy);
            }
        }
        if let Some(carry) = carry {
            for (d, c) in delta.iter_mut().zip(&carry[l]) {
                *d += c;
            }
        }

        // h = ... + gamma ⊙ B x:  dL/dx_j = 2 Re[sum_i delta_i gamma_i B_ij]
        for i in 0..n {
            s.gamma_delta[i] = delta[i] * (2.0 * coeffs[l].gamma[i]);
        }
        for (i, gd) in s.gamma_delta.iter().enumerate() {
            if *gd == ZERO {
                continue;
            }
            for (g, b) in s.g_n.iter_mut().zip(block.lru.b.row(i)) {
                *g += gd.re * b.re - gd.im * b.im;
            }
        }

        s.g_x.fill(0.0);
        layer_norm_backward_acc(
            &s.g_n,
            &lc.xhat,
            lc.inv_std,
            &block.norm.scale,
            &mut s.g_x,
            &mut gb.norm.scale,
            &mut gb.norm.bias,
        );
        for i in 0..h {
            s.g_stream[i] += s.g_x[i];
        }
    }

    outer_acc(&mut grads.encoder.weight, &s.g_stream, &cache.input);
    for (g, d) in grads.encoder.bias.iter_mut().zip(&s.g_stream) {
        *g += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, n: usize, h: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            state_size: n,
            model_size: h,
            input_dim: 3,
            output_dim: 2,
            dropout: 0.0,
            r_min: 0.0,
            r_max: 1.0,
        }
    }

    #[test]
    fn layer_norm_examples() {
        let (out, _, _) = layer_norm_step(&[2.5; 4], &[3.0; 4], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(out, vec![0.1, 0.2, 0.3, 0.4]);
        let (out, _, _) = layer_norm_step(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]);
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((out[0] - expect).abs() < 1e-15 && (out[1] + expect).abs() < 1e-15);
        assert!((out[0] - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.7, -0.4];
        let scale = [1.1, 0.9, -0.5, 2.0, 1.0];
        let bias = [0.0, 0.1, 0.2, -0.3, 0.4];
        let w = [0.5, -1.0, 0.25, 2.0, -0.75];
        let loss = |x: &[f64], s: &[f64], b: &[f64]| -> f64 {
            let (o, _, _) = layer_norm_step(x, s, b);
            o.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, xhat, inv_std) = layer_norm_step(&x, &scale, &bias);
        let (gx, gs, gb) = layer_norm_backward(&w, &xhat, inv_std, &scale);
        let eps = 1e-6;
        for k in 0..5 {
            let fd = |f: &dyn Fn(f64) -> f64| (f(eps) - f(-eps)) / (2.0 * eps);
            let dx = fd(&|e| {
                let mut v = x;
                v[k] += e;
                loss(&v, &scale, &bias)
            });
            let ds = fd(&|e| {
                let mut v = scale;
                v[k] += e;
                loss(&x, &v, &bias)
            });
            let db = fd(&|e| {
                let mut v = bias;
                v[k] += e;
                loss(&x, &scale, &v)
            });
            for (a, b) in [(gx[k], dx), (gs[k], ds), (gb[k], db)] {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_network_emits_decoder_bias() {
        let mut net = Network::zeros(&cfg(1, 4, 4)).unwrap();
        net.decoder.bias = vec![0.25, -1.5];
        let mut st = net.initial_state();
        for x in [[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]] {
            let (y, _) = forward_step(&net, &mut st, &x).unwrap();
            assert_eq!(y, vec![0.25, -1.5]);
        }
    }

    #[test]
    fn zeroed_glu_makes_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::init(&cfg(2, 4, 5), &mut rng).unwrap();
        for b in &mut net.blocks {
            b.glu.w1.fill_zero();
            b.glu.b1.fill(0.0);
        }
        let mut st = net.initial_state();
        let (_, cache) = forward_step(&net, &mut st, &[0.5, -0.2, 1.0]).unwrap();
        assert_eq!(cache.layers[0].input, cache.layers[1].input);
        assert_eq!(cache.layers[1].input, cache.top);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(&cfg(2, 3, 4), &mut rng).unwrap();
        let mut st = net.initial_state();
        let (_, old) = forward_step(&net, &mut st, &[1.0, 0.0, 0.0]).unwrap();
        let (_, fresh) = forward_step(&net, &mut st, &[0.0, 1.0, 0.0]).unwrap();
        assert!(spatial_backward_step(&net, &st, &fresh, &[1.0, 1.0]).is_ok());
        assert!(matches!(
            spatial_backward_step(&net, &st, &old, &[1.0, 1.0]),
            Err(Error::StaleCache { cache: 1, current: 2 })
        ));
    }

    #[test]
    fn zero_error_gives_zero_deltas_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init(&cfg(3, 3, 4), &mut rng).unwrap();
        let mut st = net.initial_state();
        let (_, cache) = forward_step(&net, &mut st, &[0.3, 0.1, -0.7]).unwrap();
        let (deltas, grads) = spatial_backward_step(&net, &st, &cache, &[0.0, 0.0]).unwrap();
        assert!(deltas.iter().flatten().all(|d| *d == ZERO));
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn flat_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::init(&cfg(2, 3, 4), &mut rng).unwrap();
        let flat = net.to_flat();
        let mut other = net.zeros_like();
        other.load_flat(&flat).unwrap();
        assert_eq!(other, net);
        let total: usize = net.layout().iter().map(TensorSpec::len).sum();
        assert_eq!(total, flat.len());
        assert_eq!(block_of("blocks.12.lru.b"), Some(12));
        assert_eq!(block_of("encoder.weight"), None);
        assert!(is_recurrent_param("blocks.0.lru.gamma_log"));
        assert!(!is_recurrent_param("blocks.0.lru.b"));
    }

    #[test]
    fn dropout_is_deterministic_and_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = cfg(2, 3, 64);
        c.dropout = 0.25;
        let net = Network::init(&c, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9];
        let run = |key| {
            let mut st = net.initial_state();
            forward_step_with_dropout(&net, &mut st, &x, Some(DropoutKey(key))).unwrap().1
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.layers[0].dropout, b.layers[0].dropout);
        assert_ne!(a.layers[0].dropout, run(12).layers[0].dropout);
        assert!(a.layers[0].dropout.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.75).abs() < 1e-15));
        assert!(a.layers[0].dropout.contains(&0.0));
    }
}
