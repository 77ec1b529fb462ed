//! Fully connected embedding network with leaky-ReLU hidden layers.
//!
//! Each layer computes `x · W + b` with `W` stored as `fan_in × fan_out`.
//! Hidden layers are followed by a leaky ReLU, the final projection is linear
//! and its output is used as the embedding without any normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::AdamState;

pub const DEFAULT_SLOPE: f64 = 0.3;
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

/// Elementwise leaky ReLU.
pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| leaky(v, slope)).collect()
}

#[inline]
fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Subgradient of the leaky ReLU. The kink at exactly zero takes the slope.
#[inline]
fn leaky_grad(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(serialize_with = "ser_matrix", deserialize_with = "de_matrix")]
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }
}

/// Network parameters: ordered layers plus the leaky factor of the hidden nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub slope: f64,
}

/// Gradients with the same layout as [`MlpParams::layers`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradBundle {
    pub layers: Vec<Layer>,
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn is_congruent(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, p)| g.shape() == p.shape() && g.bias.len() == p.bias.len())
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.as_slice().iter().all(|&x| x == 0.0) && l.bias.iter().all(|&x| x == 0.0)
        })
    }
}

/// Activations retained by [`mlp_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    /// Pre-activation of every layer.
    pre: Vec<Matrix>,
    /// Post-activation of every hidden layer.
    post: Vec<Matrix>,
    shapes: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Pre-activations of hidden and output layers, in order.
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

impl MlpParams {
    /// Widths including the input: `[F, h1, ..., D]`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            w.push(first.fan_in());
        }
        w.extend(self.layers.iter().map(Layer::fan_out));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Multiplies the final projection by `factor`. Small factors shrink the
    /// initial spread of the embeddings.
    pub fn scale_output(&mut self, factor: f64) {
        if let Some(last) = self.layers.last_mut() {
            last.weight = last.weight.scale(factor);
            for b in &mut last.bias {
                *b *= factor;
            }
        }
    }

    /// Checks internal consistency: shapes chain, slope in range, values finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::config(format!(
                "leaky slope {} outside [0, 1)",
                self.slope
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::dim(format!(
                    "layer {i}: bias length {} vs weight width {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::contract(format!("layer {i} holds non-finite values")));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.fan_in() != l.fan_out() {
                    return Err(Error::dim(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        l.fan_out(),
                        i + 1,
                        next.fan_in()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws fresh parameters. Hidden layers use He normal initialization, the
/// final projection Glorot uniform; biases start at zero.
pub fn init_params(layer_widths: &[usize], slope: f64, seed: u64) -> Result<MlpParams> {
    if layer_widths.len() < 2 {
        return Err(Error::config(
            "need at least an input and an output width to build a layer",
        ));
    }
    if layer_widths.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::config(format!("leaky slope {slope} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = layer_widths.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for (i, pair) in layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let weight = if i + 1 == n {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(&mut rng))
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(&mut rng))
        };
        layers.push(Layer {
            weight,
            bias: vec![0.0; fan_out],
        });
    }
    Ok(MlpParams { layers, slope })
}

/// Runs the network on a batch of row vectors.
pub fn mlp_forward(params: &MlpParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if params.layers.is_empty() {
        return Err(Error::config("network has no layers"));
    }
    if inputs.cols() != params.input_dim() {
        return Err(Error::dim(format!(
            "input width {} does not match first layer fan-in {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post = Vec::with_capacity(n - 1);
    for (i, layer) in params.layers.iter().enumerate() {
        let x = if i == 0 { inputs } else { &post[i - 1] };
        let mut z = x.matmul(&layer.weight)?;
        z.add_row_vector(&layer.bias)?;
        if i + 1 < n {
            post.push(z.map(|v| leaky(v, params.slope)));
        }
        pre.push(z);
    }
    let out = pre.last().cloned().expect("at least one layer");
    let cache = ForwardCache {
        input: inputs.clone(),
        pre,
        post,
        shapes: params.layers.iter().map(Layer::shape).collect(),
    };
    Ok((out, cache))
}

/// Embeds without keeping a cache.
pub fn embed(params: &MlpParams, inputs: &Matrix) -> Result<Matrix> {
    mlp_forward(params, inputs).map(|(out, _)| out)
}

/// Reverse-mode gradient of `Σ embeddings ⊙ upstream` with respect to every parameter.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<GradBundle> {
    let shapes: Vec<_> = params.layers.iter().map(Layer::shape).collect();
    if shapes != cache.shapes || cache.pre.len() != params.layers.len() {
        return Err(Error::contract(
            "forward cache was produced by a network with different shapes",
        ));
    }
    if upstream.shape() != (cache.batch_size(), params.output_dim()) {
        return Err(Error::contract(format!(
            "upstream gradient {:?} does not match embeddings ({}, {})",
            upstream.shape(),
            cache.batch_size(),
            params.output_dim()
        )));
    }
    let n = params.layers.len();
    let mut grads: Vec<Option<Layer>> = vec![None; n];
    let mut delta = upstream.clone();
    for i in (0..n).rev() {
        let x = if i == 0 { &cache.input } else { &cache.post[i - 1] };
        let weight = x.t_matmul(&delta)?;
        let bias = delta.column_sums();
        if i > 0 {
            let mut back = delta.matmul_t(&params.layers[i].weight)?;
            let z = &cache.pre[i - 1];
            for (b, &zv) in back.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *b *= leaky_grad(zv, params.slope);
            }
            delta = back;
        }
        grads[i] = Some(Layer { weight, bias });
    }
    Ok(GradBundle {
        layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
    })
}

/// On-disk model: network, seed it was initialized from, and optional optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_widths: Vec<usize>,
    pub slope: f64,
    pub seed: u64,
    pub layers: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(params: &MlpParams, seed: u64, optim: Option<AdamState>) -> Self {
        Self {
            layer_widths: params.layer_widths(),
            slope: params.slope,
            seed,
            layers: params.layers.clone(),
            optim,
        }
    }

    pub fn params(&self) -> Result<MlpParams> {
        let params = MlpParams {
            layers: self.layers.clone(),
            slope: self.slope,
        };
        params.validate()?;
        if params.layer_widths() != self.layer_widths {
            return Err(Error::Parse(format!(
                "checkpoint declares widths {:?} but layers chain as {:?}",
                self.layer_widths,
                params.layer_widths()
            )));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        ckpt.params()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn ser_matrix<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.to_nested().serialize(s)
}

pub(crate) fn de_matrix<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
}
