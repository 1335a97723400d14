//! Dense feed-forward network with ReLU hidden layers and a linear output.
//!
//! Parameters live in one flat `Vec<f64>`; layer `k` stores its weight matrix
//! (`out x in`, row-major) followed by its bias. Gradients use the same layout,
//! so optimizers and gradient checks can treat a network as a plain vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::real::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
    /// Whether the output layer carries a bias.
    #[serde(default = "yes")]
    pub output_bias: bool,
}

fn yes() -> bool {
    true
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, init_seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::Shape(format!(
                "layer widths must be >= 1, got {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes,
            init_seed,
            output_bias: true,
        })
    }

    pub fn without_output_bias(mut self) -> Self {
        self.output_bias = false;
        self
    }

    /// Bias width of layer `k`.
    pub fn bias_len(&self, k: usize) -> usize {
        if k + 1 == self.num_layers() && !self.output_bias {
            0
        } else {
            self.layer_sizes[k + 1]
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|k| self.layer_sizes[k] * self.layer_sizes[k + 1] + self.bias_len(k))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Activations of a forward pass over a batch, kept for backprop.
///
/// `acts[0]` is the input batch; `acts[k + 1]` is layer `k`'s output after
/// its activation (identity on the last layer).
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub batch: usize,
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

fn layer_offsets(spec: &MlpSpec) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(spec.num_layers());
    let mut o = 0;
    for k in 0..spec.num_layers() {
        offsets.push(o);
        o += spec.layer_sizes[k] * spec.layer_sizes[k + 1] + spec.bias_len(k);
    }
    offsets
}

impl Mlp {
    /// He-uniform weights and small uniform biases from `spec.init_seed`.
    pub fn new(spec: MlpSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let offsets = layer_offsets(&spec);
        let mut params = vec![0.0; spec.num_params()];
        for (k, w) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let o = offsets[k];
            for p in &mut params[o..o + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            // nonzero biases keep pre-activations off the ReLU kink
            for p in &mut params[o + fan_in * fan_out..o + fan_in * fan_out + spec.bias_len(k)] {
                *p = rng.random_range(-0.1..0.1);
            }
        }
        Self {
            spec,
            params,
            offsets,
        }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters for {:?}, got {}",
                spec.num_params(),
                spec.layer_sizes,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        let offsets = layer_offsets(&spec);
        Ok(Self {
            spec,
            params,
            offsets,
        })
    }

    /// Network whose weights are all zero and whose output bias is `bias`.
    pub fn constant(spec: MlpSpec, bias: &[f64]) -> Result<Self> {
        if bias.len() != spec.bias_len(spec.num_layers() - 1) {
            return Err(Error::Shape(format!(
                "bias width {} != output width {}",
                bias.len(),
                spec.output_dim()
            )));
        }
        let mut net = Self::from_params(spec.clone(), vec![0.0; spec.num_params()])?;
        net.bias_mut(spec.num_layers() - 1).copy_from_slice(bias);
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn dims(&self, layer: usize) -> (usize, usize) {
        (self.spec.layer_sizes[layer], self.spec.layer_sizes[layer + 1])
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (i, o) = self.dims(layer);
        let off = self.offsets[layer];
        &self.params[off..off + i * o]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = self.dims(layer);
        let off = self.offsets[layer];
        &mut self.params[off..off + i * o]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (i, o) = self.dims(layer);
        let off = self.offsets[layer] + i * o;
        &self.params[off..off + self.spec.bias_len(layer)]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = self.dims(layer);
        let off = self.offsets[layer] + i * o;
        let n = self.spec.bias_len(layer);
        &mut self.params[off..off + n]
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Forward pass over `batch` row-major input rows.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<MlpCache> {
        let in_dim = self.input_dim();
        if input.len() != batch * in_dim {
            return Err(Error::Shape(format!(
                "MLP input has {} values, expected {batch} x {in_dim}",
                input.len()
            )));
        }
        let n_layers = self.spec.num_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for k in 0..n_layers {
            let (i, o) = self.dims(k);
            let w = self.weights(k);
            let b = self.bias(k);
            let x = &acts[k];
            let mut y = vec![0.0; batch * o];
            let last = k + 1 == n_layers;
            for s in 0..batch {
                let xs = &x[s * i..(s + 1) * i];
                let ys = &mut y[s * o..(s + 1) * o];
                for u in 0..o {
                    let wr = &w[u * i..(u + 1) * i];
                    let mut acc = b.get(u).copied().unwrap_or(0.0);
                    for (a, c) in wr.iter().zip(xs) {
                        acc += a * c;
                    }
                    ys[u] = if last || acc > 0.0 { acc } else { 0.0 };
                }
            }
            acts.push(y);
        }
        Ok(MlpCache { batch, acts })
    }

    /// Cache-free forward pass in any [`Real`] scalar type.
    pub fn forward_in<T: Real>(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP input has {} values, expected {batch} x {}",
                input.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.spec.num_layers();
        let mut x = input.to_vec();
        for k in 0..n_layers {
            let (i, o) = self.dims(k);
            let w: Vec<T> = self.weights(k).iter().map(|v| T::from_f64(*v)).collect();
            let b: Vec<T> = self.bias(k).iter().map(|v| T::from_f64(*v)).collect();
            let last = k + 1 == n_layers;
            let mut y = Vec::with_capacity(batch * o);
            for s in 0..batch {
                let xs = &x[s * i..(s + 1) * i];
                for u in 0..o {
                    let mut acc = b.get(u).copied().unwrap_or_else(T::zero);
                    for (a, c) in w[u * i..(u + 1) * i].iter().zip(xs) {
                        acc = acc + *a * *c;
                    }
                    y.push(if last || acc > T::zero() { acc } else { T::zero() });
                }
            }
            x = y;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let cache = self.forward_batch(input, 1)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` and returns
    /// the gradient with respect to the input batch.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        grad_output: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let batch = cache.batch;
        if grad_output.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has {} values, expected {batch} x {}",
                grad_output.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} values, expected {}",
                grads.len(),
                self.params.len()
            )));
        }
        let n_layers = self.spec.num_layers();
        let mut delta = grad_output.to_vec();
        for k in (0..n_layers).rev() {
            let (i, o) = self.dims(k);
            if k + 1 != n_layers {
                let out = &cache.acts[k + 1];
                for (d, a) in delta.iter_mut().zip(out) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.acts[k];
            let off = self.offsets[k];
            let (gw, rest) = grads[off..].split_at_mut(i * o);
            let gb = &mut rest[..self.spec.bias_len(k)];
            let has_bias = !gb.is_empty();
            for s in 0..batch {
                let ds = &delta[s * o..(s + 1) * o];
                let xs = &x[s * i..(s + 1) * i];
                for u in 0..o {
                    let du = ds[u];
                    if du == 0.0 {
                        continue;
                    }
                    if has_bias {
                        gb[u] += du;
                    }
                    let row = &mut gw[u * i..(u + 1) * i];
                    for (g, xv) in row.iter_mut().zip(xs) {
                        *g += du * xv;
                    }
                }
            }
            let w = self.weights(k);
            let mut prev = vec![0.0; batch * i];
            for s in 0..batch {
                let ds = &delta[s * o..(s + 1) * o];
                let ps = &mut prev[s * i..(s + 1) * i];
                for u in 0..o {
                    let du = ds[u];
                    if du == 0.0 {
                        continue;
                    }
                    for (p, wv) in ps.iter_mut().zip(&w[u * i..(u + 1) * i]) {
                        *p += du * wv;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_output: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.backward_batch(cache, grad_output, grads)
    }
}

/// Serialized form: spec plus row-major weights and biases per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub spec: MlpSpec,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Mlp> for MlpRecord {
    fn from(net: &Mlp) -> Self {
        let layers = (0..net.spec.num_layers())
            .map(|k| {
                let (i, o) = net.dims(k);
                LayerRecord {
                    in_dim: i,
                    out_dim: o,
                    weights: net.weights(k).to_vec(),
                    bias: net.bias(k).to_vec(),
                }
            })
            .collect();
        Self {
            spec: net.spec.clone(),
            layers,
        }
    }
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = Error;

    fn try_from(rec: MlpRecord) -> Result<Self> {
        let mut spec = MlpSpec::new(rec.spec.layer_sizes, rec.spec.init_seed)?;
        spec.output_bias = rec.spec.output_bias;
        if rec.layers.len() != spec.num_layers() {
            return Err(Error::Shape(format!(
                "record has {} layers, spec has {}",
                rec.layers.len(),
                spec.num_layers()
            )));
        }
        let mut params = Vec::with_capacity(spec.num_params());
        for (k, layer) in rec.layers.into_iter().enumerate() {
            let (i, o) = (spec.layer_sizes[k], spec.layer_sizes[k + 1]);
            if layer.in_dim != i
                || layer.out_dim != o
                || layer.weights.len() != i * o
                || layer.bias.len() != spec.bias_len(k)
            {
                return Err(Error::Shape(format!("layer {k} does not match spec")));
            }
            params.extend(layer.weights);
            params.extend(layer.bias);
        }
        Mlp::from_params(spec, params)
    }
}
