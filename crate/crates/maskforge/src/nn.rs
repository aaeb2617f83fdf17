//! Conditional MLP denoiser with exact hand-derived reverse-mode gradients.
//!
//! The network predicts the noise component of a noised sample:
//! `eps_hat = f(x_t, cond, t)`. Its input is the concatenation of `x_t`, a
//! learned condition embedding, and fixed sinusoidal features of `t / t_max`.
//! Hidden layers use tanh, the output layer is linear, and all math is f64 so
//! finite-difference checks hold to tight tolerances. The condition enters the
//! network only through the embedding table and the first (input-coupling)
//! layer; that layer group plus the table form the `condition_coupling` mask
//! scope.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Number of condition tokens: subconcepts + superclasses + 1 null.
    pub cond_vocab: usize,
    pub cond_embed_dim: usize,
    pub time_embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            data_dim: 2,
            hidden_dims: vec![64, 64],
            cond_vocab: 13,
            cond_embed_dim: 8,
            time_embed_dim: 8,
        }
    }
}

/// One named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    /// (rows, cols); biases are (n, 1).
    pub shape: (usize, usize),
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim < 1
            || self.cond_embed_dim < 1
            || self.time_embed_dim < 1
            || self.hidden_dims.iter().any(|&h| h < 1)
        {
            return Err(Error::contract("all architecture dims must be >= 1"));
        }
        if self.cond_vocab < 2 {
            return Err(Error::contract("cond_vocab must be >= 2"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.cond_embed_dim + self.time_embed_dim
    }

    /// Per-layer (in, out) dims, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim();
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            entries.push(LayoutEntry {
                name: format!("w{i}"),
                offset,
                shape: (fan_out, fan_in),
            });
            offset += fan_out * fan_in;
            entries.push(LayoutEntry {
                name: format!("b{i}"),
                offset,
                shape: (fan_out, 1),
            });
            offset += fan_out;
        }
        entries.push(LayoutEntry {
            name: "cond_embed".to_string(),
            offset,
            shape: (self.cond_vocab, self.cond_embed_dim),
        });
        entries
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map(|e| e.offset + e.len()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub flat: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl DenoiserParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let n = arch.param_count();
        Ok(DenoiserParams {
            arch,
            flat: vec![0.0; n],
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn entry(&self, name: &str) -> &LayoutEntry {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no layout entry named {name}"))
    }

    pub fn view(&self, name: &str) -> &[f64] {
        &self.flat[self.entry(name).range()]
    }

    pub fn view_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.entry(name).range();
        &mut self.flat[range]
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub flat: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        GradientVector { flat: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        assert_eq!(self.flat.len(), other.flat.len());
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += scale * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

/// Fan-in-scaled random init: weights ~ N(0, 1/fan_in), biases zero,
/// embedding table ~ 0.1 * N(0, 1).
pub fn init_params(arch: &Architecture, seed: u64) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut params = DenoiserParams::zeros(arch.clone())?;
    let mut rng = crate::rng::stream(seed, "nn-init", 0);
    let layout = params.layout.clone();
    for entry in &layout {
        let slice = &mut params.flat[entry.range()];
        if entry.name == "cond_embed" {
            for v in slice.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = 0.1 * z;
            }
        } else if entry.name.starts_with('w') {
            let fan_in = entry.shape.1 as f64;
            let scale = (1.0 / fan_in).sqrt();
            for v in slice.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        }
        // biases stay zero
    }
    Ok(params)
}

/// Sinusoidal features of t / t_max.
fn time_features(t: usize, t_max: usize, dim: usize) -> Vec<f64> {
    let u = t as f64 / t_max as f64;
    (0..dim)
        .map(|k| {
            let freq = std::f64::consts::PI * (1 << (k / 2)) as f64;
            if k % 2 == 0 {
                (freq * u).sin()
            } else {
                (freq * u).cos()
            }
        })
        .collect()
}

fn check_inputs(params: &DenoiserParams, x_t: &[f64], t: usize, t_max: usize, cond: usize) -> Result<()> {
    if x_t.len() != params.arch.data_dim {
        return Err(Error::contract(format!(
            "x_t has dim {}, expected {}",
            x_t.len(),
            params.arch.data_dim
        )));
    }
    if t < 1 || t > t_max {
        return Err(Error::contract(format!("t = {t} out of range [1, {t_max}]")));
    }
    if cond >= params.arch.cond_vocab {
        return Err(Error::contract(format!(
            "cond token {cond} out of range [0, {})",
            params.arch.cond_vocab
        )));
    }
    Ok(())
}

/// Forward pass keeping per-layer activations for the backward pass.
/// activations[0] is the input vector, activations[L] the network output.
struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

fn forward(params: &DenoiserParams, x_t: &[f64], t: usize, t_max: usize, cond: usize) -> ForwardTrace {
    let arch = &params.arch;
    let mut input = Vec::with_capacity(arch.input_dim());
    input.extend_from_slice(x_t);
    let embed = params.view("cond_embed");
    let row = &embed[cond * arch.cond_embed_dim..(cond + 1) * arch.cond_embed_dim];
    input.extend_from_slice(row);
    input.extend(time_features(t, t_max, arch.time_embed_dim));

    let n_layers = arch.hidden_dims.len() + 1;
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(input);
    for l in 0..n_layers {
        let w = params.view(&format!("w{l}"));
        let b = params.view(&format!("b{l}"));
        let a = activations.last().unwrap();
        let (out_dim, in_dim) = params.entry(&format!("w{l}")).shape;
        let mut next = vec![0.0; out_dim];
        for (i, nv) in next.iter_mut().enumerate() {
            let mut s = b[i];
            let row = &w[i * in_dim..(i + 1) * in_dim];
            for (wij, aj) in row.iter().zip(a.iter()) {
                s += wij * aj;
            }
            *nv = if l < n_layers - 1 { s.tanh() } else { s };
        }
        activations.push(next);
    }
    ForwardTrace { activations }
}

/// Predict the noise component of `x_t` under condition token `cond`.
pub fn denoise(
    params: &DenoiserParams,
    x_t: &[f64],
    t: usize,
    t_max: usize,
    cond: usize,
) -> Result<Vec<f64>> {
    check_inputs(params, x_t, t, t_max, cond)?;
    Ok(forward(params, x_t, t, t_max, cond).activations.pop().unwrap())
}

/// Vector-Jacobian product: gradient of `upstream . denoise(...)` w.r.t. the
/// flat parameter vector. Also returns the forward output.
pub fn denoise_vjp(
    params: &DenoiserParams,
    x_t: &[f64],
    t: usize,
    t_max: usize,
    cond: usize,
    upstream: &[f64],
) -> Result<(Vec<f64>, GradientVector)> {
    check_inputs(params, x_t, t, t_max, cond)?;
    if upstream.len() != params.arch.data_dim {
        return Err(Error::contract("upstream dim mismatch"));
    }
    let trace = forward(params, x_t, t, t_max, cond);
    let mut grad = GradientVector::zeros(params.len());
    accumulate_vjp(params, &trace, cond, upstream, &mut grad);
    let output = trace.activations.last().unwrap().clone();
    Ok((output, grad))
}

/// Backward pass for one forward trace, accumulating into `grad`.
fn accumulate_vjp(
    params: &DenoiserParams,
    trace: &ForwardTrace,
    cond: usize,
    upstream: &[f64],
    grad: &mut GradientVector,
) {
    let arch = &params.arch;
    let n_layers = arch.hidden_dims.len() + 1;
    // d = dL/d(pre-activation of current layer); output layer is linear.
    let mut d = upstream.to_vec();
    for l in (0..n_layers).rev() {
        let w_entry = params.entry(&format!("w{l}"));
        let b_entry = params.entry(&format!("b{l}"));
        let (out_dim, in_dim) = w_entry.shape;
        let a = &trace.activations[l];
        let w = &params.flat[w_entry.range()];
        {
            let gw = &mut grad.flat[w_entry.range()];
            for i in 0..out_dim {
                let di = d[i];
                let row = &mut gw[i * in_dim..(i + 1) * in_dim];
                for (g, aj) in row.iter_mut().zip(a.iter()) {
                    *g += di * aj;
                }
            }
        }
        {
            let gb = &mut grad.flat[b_entry.range()];
            for i in 0..out_dim {
                gb[i] += d[i];
            }
        }
        // propagate to the previous activation
        let mut da = vec![0.0; in_dim];
        for i in 0..out_dim {
            let di = d[i];
            let row = &w[i * in_dim..(i + 1) * in_dim];
            for (dv, wij) in da.iter_mut().zip(row.iter()) {
                *dv += di * wij;
            }
        }
        if l > 0 {
            // a = tanh(pre), so d(pre) = da * (1 - a^2)
            d = da.iter().zip(a.iter()).map(|(dv, av)| dv * (1.0 - av * av)).collect();
        } else {
            // input layer: route the embedding slice into the table row
            let e = params.entry("cond_embed");
            let ge = &mut grad.flat[e.range()];
            let start = arch.data_dim;
            for k in 0..arch.cond_embed_dim {
                ge[cond * arch.cond_embed_dim + k] += da[start + k];
            }
        }
    }
}

/// Batched VJP reusing one gradient buffer: for each (x_t, t, cond, upstream)
/// tuple the closure receives the forward output and must return the upstream
/// vector. Used by the loss functions to avoid allocating per-row gradients.
pub struct BatchGrad {
    pub grad: GradientVector,
}

impl BatchGrad {
    pub fn new(n: usize) -> Self {
        BatchGrad {
            grad: GradientVector::zeros(n),
        }
    }

    pub fn accumulate(
        &mut self,
        params: &DenoiserParams,
        x_t: &[f64],
        t: usize,
        t_max: usize,
        cond: usize,
        upstream: &[f64],
    ) -> Result<()> {
        check_inputs(params, x_t, t, t_max, cond)?;
        let trace = forward(params, x_t, t, t_max, cond);
        accumulate_vjp(params, &trace, cond, upstream, &mut self.grad);
        Ok(())
    }
}
