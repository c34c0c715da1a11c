//! Small dense feed-forward network over a flat parameter vector, with
//! hand-written reverse-mode gradients and a binary checkpoint format.
//!
//! Parameter layout, layer by layer: the weight matrix (row-major,
//! `out x in`) followed by the bias vector when the architecture has biases.
//! The last layer is linear; hidden layers apply the activation.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl Architecture {
    fn widths(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let dims: Vec<usize> = std::iter::once(self.input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output))
            .collect();
        (0..dims.len() - 1).map(move |i| (dims[i], dims[i + 1]))
    }

    pub fn param_count(&self) -> usize {
        self.widths()
            .map(|(i, o)| o * i + if self.bias { o } else { 0 })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

/// Per-layer activations from a forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output layer")
    }
}

impl Mlp {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            params: vec![0.0; n],
        }
    }

    /// Every parameter drawn i.i.d. from N(0, scale^2).
    pub fn random_normal<R: Rng + ?Sized>(arch: Architecture, scale: f64, rng: &mut R) -> Self {
        let n = arch.param_count();
        let params = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { arch, params }
    }

    /// Weights from N(0, 1/fan_in), biases from N(0, 1). Used for fixed
    /// random target functions whose outputs should be O(1).
    pub fn random_fan_in<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(arch.param_count());
        for (fan_in, out) in arch.widths() {
            let s = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * out).map(|_| s * rng.sample::<f64, _>(StandardNormal)));
            if arch.bias {
                params.extend((0..out).map(|_| rng.sample::<f64, _>(StandardNormal)));
            }
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn ensure_same_shape(&self, other: &Mlp) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ShapeMismatch(format!(
                "architectures differ: {:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.arch.input {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {len}",
                self.arch.input
            )));
        }
        Ok(())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input.len())?;
        let n_layers = self.arch.hidden.len() + 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for (layer, (fan_in, out)) in self.arch.widths().enumerate() {
            let prev = activations.last().unwrap();
            let w = &self.params[offset..offset + fan_in * out];
            offset += fan_in * out;
            let b = if self.arch.bias {
                let b = &self.params[offset..offset + out];
                offset += out;
                Some(b)
            } else {
                None
            };
            let last = layer + 1 == n_layers;
            let next: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let mut z: f64 = row.iter().zip(prev).map(|(a, x)| a * x).sum();
                    if let Some(b) = b {
                        z += b[o];
                    }
                    if last {
                        z
                    } else {
                        self.arch.activation.apply(z)
                    }
                })
                .collect();
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.activations.pop().unwrap())
    }

    /// Adds `d(grad_output . f(x)) / d(params)` into `grad`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        debug_assert_eq!(grad_output.len(), self.arch.output);
        let layers: Vec<(usize, usize)> = self.arch.widths().collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for &(fan_in, out) in &layers {
            offsets.push(offset);
            offset += fan_in * out + if self.arch.bias { out } else { 0 };
        }

        let mut delta = grad_output.to_vec();
        for layer in (0..layers.len()).rev() {
            let (fan_in, out) = layers[layer];
            let a_prev = &trace.activations[layer];
            let w_off = offsets[layer];
            for o in 0..out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (gi, &x) in g.iter_mut().zip(a_prev) {
                    *gi += d * x;
                }
            }
            if self.arch.bias {
                let b_off = w_off + fan_in * out;
                for o in 0..out {
                    grad[b_off + o] += delta[o];
                }
            }
            if layer == 0 {
                break;
            }
            let w = &self.params[w_off..w_off + fan_in * out];
            delta = (0..fan_in)
                .map(|i| {
                    let s: f64 = (0..out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                    s * self.arch.activation.derivative_from_output(a_prev[i])
                })
                .collect();
        }
    }
}

const CHECKPOINT_MAGIC: &str = "ADPO-CHECKPOINT 1";

/// Header of a checkpoint file. `kind` tags what the network computes
/// (`scorer` or `denoiser`); `meta` carries the resolved run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub architecture: Architecture,
    pub n_params: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes the magic line, one JSON header line, then the parameters as
/// little-endian IEEE-754 doubles.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    kind: &str,
    net: &Mlp,
    meta: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        architecture: net.arch.clone(),
        n_params: net.params.len(),
        meta,
    };
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(CheckpointHeader, Mlp)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.n_params != header.architecture.param_count() {
        return Err(Error::Format(
            "parameter count disagrees with architecture".into(),
        ));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.n_params * 8 {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 8,
            bytes.len()
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = Mlp::from_params(header.architecture.clone(), params)?;
    Ok((header, net))
}
