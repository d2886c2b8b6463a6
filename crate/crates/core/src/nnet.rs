//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! Every network ends in an affine layer; the activation sits between layers.
//! The whitelist of activations is closed: `Cosine`, `Softplus` and `Gelu` are
//! real-analytic, `LeakyRelu` is piecewise linear. Nothing else can be built.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Cosine,
    Softplus,
    Gelu,
    LeakyRelu(f64),
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn is_analytic(self) -> bool {
        !matches!(self, Activation::LeakyRelu(_))
    }

    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::LeakyRelu(_))
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(Error::InvalidModel(format!(
                "leaky relu slope must lie in (0, 1), got {s}"
            ))),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Cosine => x.cos(),
            Activation::Softplus => softplus(x),
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Cosine => -x.sin(),
            Activation::Softplus => sigmoid(x),
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Cosine => -x.cos(),
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Gelu => std_normal_pdf(x) * (2.0 - x * x),
            Activation::LeakyRelu(_) => 0.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on `(0, inf)`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Dense multilayer perceptron. Weights are row-major `out x in` per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;
    fn try_from(r: MlpRepr) -> Result<Self> {
        Mlp::from_parts(r.dims, r.activation, r.weights, r.biases)
    }
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr { dims: m.dims, activation: m.activation, weights: m.weights, biases: m.biases }
    }
}

/// Intermediate values of one forward pass, consumed by the backward passes.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

/// Gradients with the exact layout of the owning [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

impl MlpGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGradients {
            d_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            d_input: vec![0.0; net.input_dim()],
        }
    }

    pub fn fill_zero(&mut self) {
        for w in self.d_weights.iter_mut().chain(self.d_biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        self.d_input.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `self += scale * other` over the parameter part (not `d_input`).
    pub fn add_scaled(&mut self, other: &MlpGradients, scale: f64) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            axpy(a, b, scale);
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            axpy(a, b, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.d_weights.iter_mut().chain(self.d_biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Parameter gradient slices in the order of [`Mlp::param_slices_mut`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.d_weights.len());
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}

#[inline]
pub(crate) fn axpy(a: &mut [f64], b: &[f64], s: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl Mlp {
    /// Glorot-uniform weights, biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(dims, activation, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        activation.validate()?;
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let bb = 1.0 / (fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect());
            biases.push((0..fan_out).map(|_| rng.gen_range(-bb..=bb)).collect());
        }
        Ok(Mlp { dims: dims.to_vec(), activation, weights, biases })
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(dims)?;
        activation.validate()?;
        let weights = dims.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Mlp { dims: dims.to_vec(), activation, weights, biases })
    }

    pub fn from_parts(
        dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(&dims)?;
        activation.validate()?;
        if weights.len() != dims.len() - 1 || biases.len() != dims.len() - 1 {
            return Err(Error::shape(format!(
                "expected {} layers, got {} weight and {} bias blocks",
                dims.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..dims.len() - 1 {
            if weights[l].len() != dims[l] * dims[l + 1] {
                return Err(Error::shape(format!(
                    "layer {l}: weight block has {} entries, expected {}x{}",
                    weights[l].len(),
                    dims[l + 1],
                    dims[l]
                )));
            }
            if biases[l].len() != dims[l + 1] {
                return Err(Error::shape(format!(
                    "layer {l}: bias has {} entries, expected {}",
                    biases[l].len(),
                    dims[l + 1]
                )));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(Mlp { dims, activation, weights, biases })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// Weight and bias slices interleaved per layer: `w0, b0, w1, b1, ...`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects input of length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.num_layers() - 1;
        let mut h = x.to_vec();
        for l in 0..=last {
            let mut a = self.affine(l, &h);
            if l < last {
                a.iter_mut().for_each(|v| *v = self.activation.value(*v));
            }
            h = a;
        }
        h
    }

    #[inline]
    fn affine(&self, l: usize, h: &[f64]) -> Vec<f64> {
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        let w = &self.weights[l];
        let b = &self.biases[l];
        (0..dout).map(|i| dot(&w[i * din..(i + 1) * din], h) + b[i]).collect()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        Ok(self.trace_unchecked(x))
    }

    pub(crate) fn trace_unchecked(&self, x: &[f64]) -> Trace {
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last);
        inputs.push(x.to_vec());
        for l in 0..last {
            let a = self.affine(l, &inputs[l]);
            let h = a.iter().map(|&v| self.activation.value(v)).collect();
            pre.push(a);
            inputs.push(h);
        }
        let output = self.affine(last, &inputs[last]);
        Trace { inputs, pre, output }
    }

    /// Accumulates the parameter gradient of `upstream . output` into `grads`
    /// (scaled by nothing; callers pre-scale `upstream`) and returns the input
    /// gradient. `grads.d_input` is left untouched.
    pub fn backward_accumulate(&self, trace: &Trace, upstream: &[f64], grads: &mut MlpGradients) -> Vec<f64> {
        let last = self.num_layers() - 1;
        let mut g = upstream.to_vec();
        for l in (0..=last).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let h = &trace.inputs[l];
            let dw = &mut grads.d_weights[l];
            let db = &mut grads.d_biases[l];
            let w = &self.weights[l];
            let mut gh = vec![0.0; din];
            for i in 0..dout {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                db[i] += gi;
                axpy(&mut dw[i * din..(i + 1) * din], h, gi);
                axpy(&mut gh, &w[i * din..(i + 1) * din], gi);
            }
            if l > 0 {
                let a = &trace.pre[l - 1];
                for (v, &ai) in gh.iter_mut().zip(a) {
                    *v *= self.activation.derivative(ai);
                }
            }
            g = gh;
        }
        g
    }

    /// Input gradient only (no parameter accumulation).
    pub fn input_gradient(&self, trace: &Trace, upstream: &[f64]) -> Vec<f64> {
        let last = self.num_layers() - 1;
        let mut g = upstream.to_vec();
        for l in (0..=last).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let mut gh = vec![0.0; din];
            for i in 0..dout {
                if g[i] != 0.0 {
                    axpy(&mut gh, &w[i * din..(i + 1) * din], g[i]);
                }
            }
            if l > 0 {
                for (v, &ai) in gh.iter_mut().zip(&trace.pre[l - 1]) {
                    *v *= self.activation.derivative(ai);
                }
            }
            g = gh;
        }
        g
    }

    /// Exact gradients of `upstream . forward(x)` with respect to all parameters and `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGradients> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream has length {}, network output is {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let trace = self.trace_unchecked(x);
        let mut grads = MlpGradients::zeros_like(self);
        grads.d_input = self.backward_accumulate(&trace, upstream, &mut grads);
        Ok(grads)
    }

    /// Exact `out x in` Jacobian, one reverse pass per output row.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let trace = self.trace_unchecked(x);
        Ok(self.jacobian_from_trace(&trace))
    }

    pub fn jacobian_from_trace(&self, trace: &Trace) -> Vec<Vec<f64>> {
        let out = self.output_dim();
        let mut e = vec![0.0; out];
        (0..out)
            .map(|r| {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[r] = 1.0;
                self.input_gradient(trace, &e)
            })
            .collect()
    }

    /// Elementwise l1 norm of the input Jacobian at `x`, and its gradient with
    /// respect to every parameter (accumulated into `grads` scaled by `scale`).
    /// The input gradient of the penalty is returned but not accumulated.
    pub fn jacobian_l1_accumulate(&self, x: &[f64], scale: f64, grads: &mut MlpGradients) -> (f64, Vec<f64>) {
        let last = self.num_layers() - 1;
        let n0 = self.dims[0];
        // Forward pass carrying the tangent matrices H_l = d h_l / d x (row-major d_l x n0).
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
        let mut tangents: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(last);
        let mut pre_tangents: Vec<Vec<f64>> = Vec::with_capacity(last);
        hs.push(x.to_vec());
        let mut eye = vec![0.0; n0 * n0];
        for i in 0..n0 {
            eye[i * n0 + i] = 1.0;
        }
        tangents.push(eye);
        for l in 0..=last {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let hprev = &tangents[l];
            let mut a_t = vec![0.0; dout * n0];
            for i in 0..dout {
                let row = &mut a_t[i * n0..(i + 1) * n0];
                for j in 0..din {
                    let wij = w[i * din + j];
                    if wij != 0.0 {
                        axpy(row, &hprev[j * n0..(j + 1) * n0], wij);
                    }
                }
            }
            if l == last {
                tangents.push(a_t);
                break;
            }
            let a = self.affine(l, &hs[l]);
            let mut h_t = a_t.clone();
            for i in 0..dout {
                let d = self.activation.derivative(a[i]);
                h_t[i * n0..(i + 1) * n0].iter_mut().for_each(|v| *v *= d);
            }
            hs.push(a.iter().map(|&v| self.activation.value(v)).collect());
            pres.push(a);
            pre_tangents.push(a_t);
            tangents.push(h_t);
        }
        let jac = tangents.pop().unwrap();
        let penalty: f64 = jac.iter().map(|v| v.abs()).sum();
        let g_jac: Vec<f64> = jac.iter().map(|&v| scale * signum0(v)).collect();

        // Reverse pass through the tangent computation.
        let (din, dout) = (self.dims[last], self.dims[last + 1]);
        let w = &self.weights[last];
        let h_last = &tangents[last];
        let mut g_h = vec![0.0; din * n0];
        for i in 0..dout {
            let gi = &g_jac[i * n0..(i + 1) * n0];
            for j in 0..din {
                let hj = &h_last[j * n0..(j + 1) * n0];
                grads.d_weights[last][i * din + j] += dot(gi, hj);
                axpy(&mut g_h[j * n0..(j + 1) * n0], gi, w[i * din + j]);
            }
        }
        let mut g_hvec = vec![0.0; din];
        for l in (0..last).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let a = &pres[l];
            let a_t = &pre_tangents[l];
            let mut g_a_t = g_h.clone();
            let mut g_a = vec![0.0; dout];
            for i in 0..dout {
                let d1 = self.activation.derivative(a[i]);
                let d2 = self.activation.second_derivative(a[i]);
                let gh_row = &g_h[i * n0..(i + 1) * n0];
                g_a[i] = d2 * dot(gh_row, &a_t[i * n0..(i + 1) * n0]) + d1 * g_hvec[i];
                g_a_t[i * n0..(i + 1) * n0].iter_mut().for_each(|v| *v *= d1);
            }
            let h_in = &hs[l];
            let t_in = &tangents[l];
            let mut next_g_h = vec![0.0; din * n0];
            let mut next_g_hvec = vec![0.0; din];
            for i in 0..dout {
                let gt = &g_a_t[i * n0..(i + 1) * n0];
                grads.d_biases[l][i] += g_a[i];
                for j in 0..din {
                    let wij = w[i * din + j];
                    grads.d_weights[l][i * din + j] += dot(gt, &t_in[j * n0..(j + 1) * n0]) + g_a[i] * h_in[j];
                    axpy(&mut next_g_h[j * n0..(j + 1) * n0], gt, wij);
                    next_g_hvec[j] += wij * g_a[i];
                }
            }
            g_h = next_g_h;
            g_hvec = next_g_hvec;
        }
        (penalty, g_hvec)
    }

    /// Elementwise l1 norm of the Jacobian at `x`.
    pub fn jacobian_l1(&self, x: &[f64]) -> Result<f64> {
        Ok(self.jacobian(x)?.iter().flatten().map(|v| v.abs()).sum())
    }
}

#[inline]
fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::shape("a network needs at least one layer (two dims)"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("layer widths must be positive, got {dims:?}")));
    }
    Ok(())
}

/// An [`Mlp`] whose weights are constrained by fixed binary masks.
///
/// Masked entries are zero after construction and after every
/// [`MaskedMlp::apply_mask`]; optimizers call that after each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedMlp {
    pub base: Mlp,
    /// One mask per layer with the shape of its weight block; `None` means dense.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<Vec<bool>>>,
}

impl MaskedMlp {
    pub fn dense(base: Mlp) -> Self {
        MaskedMlp { base, masks: None }
    }

    pub fn new(base: Mlp, masks: Vec<Vec<bool>>) -> Result<Self> {
        if masks.len() != base.num_layers() {
            return Err(Error::shape("one mask per layer is required"));
        }
        for (l, m) in masks.iter().enumerate() {
            if m.len() != base.weights[l].len() {
                return Err(Error::shape(format!("mask for layer {l} has wrong size")));
            }
        }
        let mut out = MaskedMlp { base, masks: Some(masks) };
        out.apply_mask();
        Ok(out)
    }

    /// Two-layer network where output `j` only sees inputs `i` with
    /// `depends(j, i)`. Hidden unit `h` is assigned to output `h mod out_dim`.
    pub fn locally_connected<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        depends: impl Fn(usize, usize) -> bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut base = Mlp::with_rng(&[in_dim, hidden, out_dim], activation, rng)?;
        let mut m0 = vec![false; hidden * in_dim];
        for h in 0..hidden {
            let j = h % out_dim;
            for i in 0..in_dim {
                m0[h * in_dim + i] = depends(j, i);
            }
        }
        let mut m1 = vec![false; out_dim * hidden];
        for j in 0..out_dim {
            for h in 0..hidden {
                m1[j * hidden + h] = h % out_dim == j;
            }
        }
        // Glorot bounds from the fan each unit actually sees once masked.
        let dense = |fi: usize, fo: usize| (6.0 / (fi + fo) as f64).sqrt();
        let unit = |fi: usize| (6.0 / (fi.max(1) + 1) as f64).sqrt();
        for h in 0..hidden {
            let fan = m0[h * in_dim..(h + 1) * in_dim].iter().filter(|&&b| b).count();
            let r = unit(fan) / dense(in_dim, hidden);
            base.weights[0][h * in_dim..(h + 1) * in_dim].iter_mut().for_each(|w| *w *= r);
        }
        for j in 0..out_dim {
            let fan = m1[j * hidden..(j + 1) * hidden].iter().filter(|&&b| b).count();
            let r = unit(fan) / dense(hidden, out_dim);
            base.weights[1][j * hidden..(j + 1) * hidden].iter_mut().for_each(|w| *w *= r);
        }
        MaskedMlp::new(base, vec![m0, m1])
    }

    pub fn is_masked(&self) -> bool {
        self.masks.is_some()
    }

    pub fn apply_mask(&mut self) {
        if let Some(masks) = &self.masks {
            for (w, m) in self.base.weights.iter_mut().zip(masks) {
                for (v, &keep) in w.iter_mut().zip(m) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    pub fn mask_gradients(&self, grads: &mut MlpGradients) {
        if let Some(masks) = &self.masks {
            for (g, m) in grads.d_weights.iter_mut().zip(masks) {
                for (v, &keep) in g.iter_mut().zip(m) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    /// Input-to-output dependency implied by the masks: `out x in`.
    pub fn dependency(&self) -> Vec<Vec<bool>> {
        let dims = self.base.dims();
        let (n_in, n_out) = (dims[0], *dims.last().unwrap());
        let Some(masks) = &self.masks else {
            return vec![vec![true; n_in]; n_out];
        };
        // reach[u][i]: unit u of the current layer can depend on input i
        let mut reach: Vec<Vec<bool>> = (0..n_in).map(|i| (0..n_in).map(|j| i == j).collect()).collect();
        for (l, m) in masks.iter().enumerate() {
            let (din, dout) = (dims[l], dims[l + 1]);
            let mut next = vec![vec![false; n_in]; dout];
            for o in 0..dout {
                for u in 0..din {
                    if m[o * din + u] {
                        for i in 0..n_in {
                            next[o][i] |= reach[u][i];
                        }
                    }
                }
            }
            reach = next;
        }
        reach
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.base.forward(x)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.base.jacobian(x)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGradients> {
        let mut g = self.base.backward(x, upstream)?;
        self.mask_gradients(&mut g);
        Ok(g)
    }
}
