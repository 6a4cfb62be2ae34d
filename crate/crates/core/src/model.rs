//! Differentiable projection model: an MLP with ReLU hidden activations,
//! l2-normalized output representations, exact reverse-mode gradients and a
//! bias-corrected Adam optimizer.
//!
//! All arithmetic is 64-bit. Gradients returned by [`ProjectionModel::backward`]
//! are taken with respect to the *normalized* representation `z = h / ||h||`;
//! the normalization Jacobian `(I - z zᵀ) / ||h||` is applied internally.

use crate::error::{ConftError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Norm below which a representation is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A unit-norm representation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    values: Vec<f64>,
}

impl Representation {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Representation) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// l2-normalize a vector, preserving direction.
///
/// Norms below [`DEGENERATE_NORM`] are a hard error: a vanishing
/// representation signals divergence and must surface rather than be clamped.
pub fn normalize(h: &[f64]) -> Result<Representation> {
    let norm = dot(h, h).sqrt();
    if !norm.is_finite() || norm < DEGENERATE_NORM {
        return Err(ConftError::DegenerateRepresentation { norm });
    }
    Ok(Representation {
        values: h.iter().map(|v| v / norm).collect(),
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// Row-major (out_dim x in_dim).
    weights: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Layer {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            out.push(dot(row, input) + self.bias[o]);
        }
    }
}

/// MLP projection from input space to an `r`-dimensional representation
/// space. Hidden layers use ReLU; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation; used to detect stale caches.
    version: u64,
}

/// Intermediate activations from a forward pass, sufficient for exact
/// reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// activations[0] is the input; activations[l+1] the output of layer l.
    activations: Vec<Vec<f64>>,
    model_version: u64,
    layer_dims: Vec<usize>,
}

/// Per-parameter gradients, shaped like the model.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ModelGradients {
    pub fn zeros_like(model: &ProjectionModel) -> Self {
        ModelGradients {
            weights: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &ModelGradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for x in w.iter_mut() {
                *x *= factor;
            }
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Flat view in the same order as [`ProjectionModel::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl ProjectionModel {
    /// Deterministically initialize a model: weights uniform in [-s, s] with
    /// s = sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(ConftError::InvalidConfig(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(ConftError::InvalidConfig(format!(
                "zero-sized layer in {layer_dims:?}"
            )));
        }
        let r = *layer_dims.last().unwrap();
        if r < 2 {
            return Err(ConftError::InvalidConfig(format!(
                "representation dim must be >= 2, got {r}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-s..=s))
                .collect();
            layers.push(Layer {
                weights,
                bias: vec![0.0; fan_out],
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(ProjectionModel {
            layer_dims: layer_dims.to_vec(),
            layers,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn repr_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Compute `h = M(x)` along with the cache needed by [`Self::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(ConftError::ShapeMismatch {
                what: "model input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(activations.last().unwrap(), &mut out);
            if l + 1 < n_layers {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(out.clone());
        }
        let h = activations.last().unwrap().clone();
        Ok((
            h,
            ForwardCache {
                activations,
                model_version: self.version,
                layer_dims: self.layer_dims.clone(),
            },
        ))
    }

    /// Convenience: forward followed by [`normalize`].
    pub fn embed(&self, x: &[f64]) -> Result<Representation> {
        let (h, _) = self.forward(x)?;
        normalize(&h)
    }

    /// Exact reverse-mode gradients of `zᵀ · grad_wrt_z` with respect to every
    /// parameter, where `z = h / ||h||`. The normalization Jacobian
    /// `(I - z zᵀ) / ||h||` is applied here, so `grad_wrt_z` is the upstream
    /// gradient with respect to the normalized representation.
    pub fn backward(&self, cache: &ForwardCache, grad_wrt_z: &[f64]) -> Result<ModelGradients> {
        if cache.model_version != self.version || cache.layer_dims != self.layer_dims {
            return Err(ConftError::StaleCache);
        }
        let h = cache.activations.last().unwrap();
        if grad_wrt_z.len() != h.len() {
            return Err(ConftError::ShapeMismatch {
                what: "gradient w.r.t. representation",
                expected: h.len(),
                got: grad_wrt_z.len(),
            });
        }
        let norm = dot(h, h).sqrt();
        if norm < DEGENERATE_NORM {
            return Err(ConftError::DegenerateRepresentation { norm });
        }
        let z: Vec<f64> = h.iter().map(|v| v / norm).collect();
        let zg = dot(&z, grad_wrt_z);
        // grad wrt h through z = h / ||h||.
        let mut delta: Vec<f64> = z
            .iter()
            .zip(grad_wrt_z)
            .map(|(zi, gi)| (gi - zi * zg) / norm)
            .collect();

        let mut grads = ModelGradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let gw = &mut grads.weights[l];
            for o in 0..layer.out_dim {
                let d = delta[o];
                grads.biases[l][o] = d;
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gi, xi) in row.iter_mut().zip(input) {
                    *gi = d * xi;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // ReLU mask: hidden activations are zero exactly where the
                // pre-activation was non-positive.
                for (p, a) in prev.iter_mut().zip(&cache.activations[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    /// One bias-corrected Adam step. Errors (without touching parameters) if
    /// any gradient entry is non-finite, naming the offending block.
    pub fn adam_step(&mut self, state: &mut AdamState, grads: &ModelGradients) -> Result<()> {
        if grads.weights.len() != self.layers.len() {
            return Err(ConftError::ShapeMismatch {
                what: "gradient layers",
                expected: self.layers.len(),
                got: grads.weights.len(),
            });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if grads.weights[l].len() != layer.weights.len()
                || grads.biases[l].len() != layer.bias.len()
                || state.m[l].0.len() != layer.weights.len()
                || state.m_bias[l].0.len() != layer.bias.len()
            {
                return Err(ConftError::ShapeMismatch {
                    what: "gradient/moment block",
                    expected: layer.weights.len(),
                    got: grads.weights[l].len(),
                });
            }
            if grads.weights[l].iter().any(|g| !g.is_finite()) {
                return Err(ConftError::NonFiniteGradient {
                    block: format!("layer {l} weights"),
                });
            }
            if grads.biases[l].iter().any(|g| !g.is_finite()) {
                return Err(ConftError::NonFiniteGradient {
                    block: format!("layer {l} bias"),
                });
            }
        }
        state.step += 1;
        let bc1 = 1.0 - state.beta1.powi(state.step as i32);
        let bc2 = 1.0 - state.beta2.powi(state.step as i32);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            // weights
            let (mw, vw) = &mut state.m[l];
            for i in 0..layer.weights.len() {
                let g = grads.weights[l][i];
                mw[i] = state.beta1 * mw[i] + (1.0 - state.beta1) * g;
                vw[i] = state.beta2 * vw[i] + (1.0 - state.beta2) * g * g;
                let m_hat = mw[i] / bc1;
                let v_hat = vw[i] / bc2;
                layer.weights[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
            }
            // biases
            let (mb, vb) = &mut state.m_bias[l];
            for i in 0..layer.bias.len() {
                let g = grads.biases[l][i];
                mb[i] = state.beta1 * mb[i] + (1.0 - state.beta1) * g;
                vb[i] = state.beta2 * vb[i] + (1.0 - state.beta2) * g * g;
                let m_hat = mb[i] / bc1;
                let v_hat = vb[i] / bc2;
                layer.bias[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
            }
        }
        self.version += 1;
        Ok(())
    }

    /// All parameters, layer by layer, weights then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrite all parameters from a flat vector (same order as
    /// [`Self::flat_params`]).
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let expected: usize = self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        if params.len() != expected {
            return Err(ConftError::ShapeMismatch {
                what: "flat parameter vector",
                expected,
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        self.version += 1;
        Ok(())
    }

    /// Check that every parameter is finite.
    pub fn assert_finite(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.iter().chain(&layer.bias).any(|p| !p.is_finite()) {
                return Err(ConftError::NonFiniteGradient {
                    block: format!("layer {l} parameters"),
                });
            }
        }
        Ok(())
    }
}

/// Adam optimizer state: step count, per-parameter first/second moments and
/// the hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Per layer: (first, second) moments for weights.
    m: Vec<(Vec<f64>, Vec<f64>)>,
    /// Per layer: (first, second) moments for biases.
    m_bias: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(model: &ProjectionModel, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.weights.len()]))
                .collect(),
            m_bias: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.bias.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }
}
