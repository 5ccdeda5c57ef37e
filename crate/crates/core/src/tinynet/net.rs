use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionShape;
use crate::error::{MhsaError, Result};

const LAYERNORM_EPS: f64 = 1e-5;

/// Fully connected layer, `y = W x + b` with `W` stored row-major as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()),
        );
    }
}

/// Input layer normalization with a learned per-feature scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

/// Feed-forward network: optional input layer norm, then dense layers with ReLU
/// between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    norm: Option<LayerNorm>,
    layers: Vec<Dense>,
    // Bumped on every parameter update so stale forward caches are caught.
    revision: u64,
}

/// Activations recorded by [`DenseNet::forward`], enough for an exact backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    dims: Vec<usize>,
    normalized: Option<(Vec<f64>, f64)>,
    /// Input to each dense layer (post-ReLU for hidden layers).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each dense layer.
    pre_acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre_acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every parameter of a [`DenseNet`], in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub norm: Option<LayerNorm>,
    pub layers: Vec<DenseGrad>,
}

impl GradientBundle {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientBundle {
            norm: net.norm.as_ref().map(|n| LayerNorm {
                scale: vec![0.0; n.scale.len()],
                shift: vec![0.0; n.shift.len()],
            }),
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Parameter-ordered slices: layer-norm scale and shift first, then weight and
    /// bias of each dense layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 + 2 * self.layers.len());
        if let Some(n) = &self.norm {
            out.push(&n.scale);
            out.push(&n.shift);
        }
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 + 2 * self.layers.len());
        if let Some(n) = &mut self.norm {
            out.push(&mut n.scale);
            out.push(&mut n.shift);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        let theirs = other.slices();
        let mut ours = self.slices_mut();
        if ours.len() != theirs.len() || ours.iter().zip(&theirs).any(|(a, b)| a.len() != b.len()) {
            return Err(MhsaError::shape(
                "congruent gradient bundle",
                "mismatched bundle",
            ));
        }
        for (a, b) in ours.iter_mut().zip(theirs) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&g| g == 0.0))
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Weights uniform in `[-bound, bound]`, biases zero.
    Uniform { bound: f64 },
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    FanIn,
}

impl DenseNet {
    /// All-zero network with the given layer widths.
    pub fn zeros(dims: &[usize], layernorm: bool) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(MhsaError::Config(format!("invalid layer dims {dims:?}")));
        }
        Ok(DenseNet {
            dims: dims.to_vec(),
            norm: layernorm.then(|| LayerNorm {
                scale: vec![0.0; dims[0]],
                shift: vec![0.0; dims[0]],
            }),
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            revision: 0,
        })
    }

    /// Randomly initialized network. Layer-norm parameters start at scale 1, shift 0.
    pub fn random(dims: &[usize], layernorm: bool, init: Init, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, layernorm)?;
        if let Some(n) = &mut net.norm {
            *n = LayerNorm::identity(dims[0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            match init {
                Init::Uniform { bound } => {
                    for w in &mut layer.weight {
                        *w = rng.random_range(-bound..=bound);
                    }
                }
                Init::FanIn => {
                    let bound = 1.0 / (layer.in_dim as f64).sqrt();
                    for w in &mut layer.weight {
                        *w = rng.random_range(-bound..=bound);
                    }
                    for b in &mut layer.bias {
                        *b = rng.random_range(-bound..=bound);
                    }
                }
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit parameters.
    pub fn from_parts(norm: Option<LayerNorm>, layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| MhsaError::Config("network needs at least one layer".into()))?;
        let mut dims = vec![first.in_dim];
        for l in &layers {
            if l.in_dim != *dims.last().unwrap()
                || l.weight.len() != l.in_dim * l.out_dim
                || l.bias.len() != l.out_dim
            {
                return Err(MhsaError::shape(
                    format!("layer with input {}", dims.last().unwrap()),
                    format!("({}x{})", l.out_dim, l.in_dim),
                ));
            }
            dims.push(l.out_dim);
        }
        if let Some(n) = &norm {
            if n.scale.len() != dims[0] || n.shift.len() != dims[0] {
                return Err(MhsaError::shape(dims[0], n.scale.len()));
            }
        }
        Ok(DenseNet {
            dims,
            norm,
            layers,
            revision: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn has_layernorm(&self) -> bool {
        self.norm.is_some()
    }

    pub fn layernorm(&self) -> Option<&LayerNorm> {
        self.norm.as_ref()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter slices in checkpoint order (see [`GradientBundle::slices`]).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 + 2 * self.layers.len());
        if let Some(n) = &self.norm {
            out.push(&n.scale);
            out.push(&n.shift);
        }
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 + 2 * self.layers.len());
        if let Some(n) = &mut self.norm {
            out.push(&mut n.scale);
            out.push(&mut n.shift);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.dims[0] {
            return Err(MhsaError::shape(self.dims[0], x.len()));
        }
        let mut normalized = None;
        let mut h = match &self.norm {
            Some(norm) => {
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
                let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
                let y = xhat
                    .iter()
                    .zip(norm.scale.iter().zip(&norm.shift))
                    .map(|(xh, (g, b))| g * xh + b)
                    .collect();
                normalized = Some((xhat, inv_std));
                y
            }
            None => x.to_vec(),
        };

        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.forward(&h, &mut z);
            let next = if k < last {
                z.iter()
                    .map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
                    .collect()
            } else {
                z.clone()
            };
            layer_inputs.push(std::mem::replace(&mut h, next));
            pre_acts.push(z);
        }
        let cache = ForwardCache {
            revision: self.revision,
            dims: self.dims.clone(),
            normalized,
            layer_inputs,
            pre_acts,
        };
        Ok((h, cache))
    }

    /// Exact gradients of a scalar loss given `dL/doutput`; returns parameter
    /// gradients and `dL/dinput`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_output: &[f64],
    ) -> Result<(GradientBundle, Vec<f64>)> {
        if cache.revision != self.revision
            || cache.dims != self.dims
            || cache.normalized.is_some() != self.norm.is_some()
        {
            return Err(MhsaError::CacheMismatch);
        }
        if d_output.len() != self.output_dim() {
            return Err(MhsaError::shape(self.output_dim(), d_output.len()));
        }
        let mut grads = GradientBundle::zeros_like(self);
        let mut delta = d_output.to_vec();
        let last = self.layers.len() - 1;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k < last {
                for (d, z) in delta.iter_mut().zip(&cache.pre_acts[k]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.layer_inputs[k];
            let g = &mut grads.layers[k];
            let mut d_input = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] = d;
                let grow = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let wrow = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    grow[i] = d * input[i];
                    d_input[i] += wrow[i] * d;
                }
            }
            delta = d_input;
        }

        if let (Some(norm), Some((xhat, inv_std))) = (&self.norm, &cache.normalized) {
            let gn = grads.norm.as_mut().expect("bundle mirrors network");
            let n = xhat.len() as f64;
            let mut dxhat = vec![0.0; xhat.len()];
            for i in 0..xhat.len() {
                gn.scale[i] = delta[i] * xhat[i];
                gn.shift[i] = delta[i];
                dxhat[i] = delta[i] * norm.scale[i];
            }
            let sum_d: f64 = dxhat.iter().sum();
            let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
            delta = dxhat
                .iter()
                .zip(xhat)
                .map(|(d, x)| inv_std / n * (n * d - sum_d - x * sum_dx))
                .collect();
        }
        Ok((grads, delta))
    }
}

/// Generator: `d -> hidden -> hidden -> d`, weights uniform in `±1e-5`, zero biases,
/// so its initial output is a near-zero correction.
pub fn init_generator(shape: AttentionShape, hidden: usize, seed: u64) -> Result<DenseNet> {
    let d = shape.flat_dim();
    DenseNet::random(
        &[d, hidden, hidden, d],
        false,
        Init::Uniform { bound: 1e-5 },
        seed,
    )
}

/// Detector: layer norm, then `d -> hidden -> 2`.
pub fn init_detector(shape: AttentionShape, hidden: usize, seed: u64) -> Result<DenseNet> {
    DenseNet::random(&[shape.flat_dim(), hidden, 2], true, Init::FanIn, seed)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Cross-entropy `-log softmax(logits)[target]` and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    (-logp[target], grad)
}
