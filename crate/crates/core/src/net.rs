//! The block feature extractor: a stack of dense layers where every block's
//! output is a first-class feature space.
//!
//! Unlike a plain MLP, intermediate activations here are not just plumbing —
//! the structure losses attach to specific blocks (early blocks carry the
//! ranking loss, late blocks the cluster loss, the last block feeds the
//! classifier). `forward` therefore returns *all* block outputs, and
//! `backward` accepts one gradient batch per block and accumulates them as it
//! walks back down the stack. The final block applies no nonlinearity so the
//! classifier operates in an unconstrained metric space.
//!
//! Backward needs the forward pass's activations; taking a [`Forward`] by
//! reference makes calling it without one a compile error rather than a
//! runtime one. Shape disagreements between the two still surface as
//! [`InvalidState`](crate::Error::InvalidState).

use crate::energy::FeatureBatch;
use crate::optim::AdamState;
use crate::prototypes::PrototypeBank;
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Rectifier,
    Tanh,
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Nonlinearity::Rectifier
    }
}

/// Shape of the extractor. `block_dims` lists every block's output width in
/// order; the last entry is the classifier's feature dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub block_dims: Vec<usize>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { input_dim: 32, block_dims: vec![64, 64, 64, 64, 64, 32], nonlinearity: Nonlinearity::Rectifier }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("extractor input_dim must be >= 1".into()));
        }
        if self.block_dims.len() < 2 {
            return Err(Error::Config(format!(
                "extractor needs at least 2 blocks (ranking and cluster losses attach to distinct blocks), got {}",
                self.block_dims.len()
            )));
        }
        if self.block_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("extractor block widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.block_dims.len()
    }
}

/// One dense layer, weights stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// He-style init: `N(0, 2/fan_in)` weights, zero bias. Scaled for the
    /// rectifier but serviceable for tanh at these depths.
    fn new_gaussian(in_dim: usize, out_dim: usize, stream: &mut Stream) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let mut weight = vec![0.0; in_dim * out_dim];
        for v in weight.iter_mut() {
            *v = stream.next_gaussian() * std;
        }
        Dense { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }
}

/// All learnable parameters: the dense stack plus the prototype bank. The
/// nonlinearity rides along because it is part of the architecture — forward
/// and backward must agree on it.
///
/// Tensors are addressable by a stable flat index (`2b` = block `b` weight,
/// `2b+1` = its bias, last = prototypes) so the optimizer, gradient checker,
/// and checkpoint format all walk parameters the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub prototypes: PrototypeBank,
    pub nonlinearity: Nonlinearity,
}

impl ModelParams {
    /// Deterministic initialization. Layer `b` draws from the child stream
    /// `init/block/<b>`, prototypes from `init/prototypes`, so adding draws
    /// to one tensor never shifts another.
    pub fn init(
        config: &ExtractorConfig,
        classes: usize,
        prototypes_per_class: usize,
        stream: &Stream,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.block_dims.len());
        let mut in_dim = config.input_dim;
        let block_stream = stream.child("block");
        for (b, &out_dim) in config.block_dims.iter().enumerate() {
            let mut s = block_stream.child_index(b as u64);
            layers.push(Dense::new_gaussian(in_dim, out_dim, &mut s));
            in_dim = out_dim;
        }
        let mut proto_stream = stream.child("prototypes");
        let prototypes = PrototypeBank::new_gaussian(classes, prototypes_per_class, in_dim, &mut proto_stream)?;
        Ok(ModelParams { layers, prototypes, nonlinearity: config.nonlinearity })
    }

    /// Number of addressable tensors.
    pub fn tensor_count(&self) -> usize {
        self.layers.len() * 2 + 1
    }

    /// Stable human-readable name for a tensor index; these names appear in
    /// divergence errors, gradient-check reports, and checkpoints.
    pub fn tensor_name(&self, index: usize) -> String {
        if index == self.layers.len() * 2 {
            "prototypes".to_string()
        } else if index % 2 == 0 {
            format!("block{}.weight", index / 2)
        } else {
            format!("block{}.bias", index / 2)
        }
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        if index == self.layers.len() * 2 {
            self.prototypes.data()
        } else if index % 2 == 0 {
            &self.layers[index / 2].weight
        } else {
            &self.layers[index / 2].bias
        }
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let n = self.layers.len() * 2;
        if index == n {
            self.prototypes.data_mut()
        } else if index % 2 == 0 {
            &mut self.layers[index / 2].weight
        } else {
            &mut self.layers[index / 2].bias
        }
    }

    /// Logical shape of a tensor, for the checkpoint format.
    pub fn tensor_shape(&self, index: usize) -> Vec<usize> {
        if index == self.layers.len() * 2 {
            vec![self.prototypes.classes(), self.prototypes.per_class(), self.prototypes.dim()]
        } else if index % 2 == 0 {
            vec![self.layers[index / 2].out_dim, self.layers[index / 2].in_dim]
        } else {
            vec![self.layers[index / 2].out_dim]
        }
    }
}

/// Gradient buffers mirroring [`ModelParams`] tensor-for-tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layer_weights: Vec<Vec<f64>>,
    pub layer_biases: Vec<Vec<f64>>,
    pub prototypes: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            layer_weights: params.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            layer_biases: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            prototypes: vec![0.0; params.prototypes.data().len()],
        }
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        if index == self.layer_weights.len() * 2 {
            &self.prototypes
        } else if index % 2 == 0 {
            &self.layer_weights[index / 2]
        } else {
            &self.layer_biases[index / 2]
        }
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let n = self.layer_weights.len() * 2;
        if index == n {
            &mut self.prototypes
        } else if index % 2 == 0 {
            &mut self.layer_weights[index / 2]
        } else {
            &mut self.layer_biases[index / 2]
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.layer_weights.len() * 2 + 1
    }
}

/// Everything the backward pass needs from a forward pass: the input batch
/// and each block's (post-activation) output.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: FeatureBatch,
    pub blocks: Vec<FeatureBatch>,
    /// Smallest `|pre-activation|` seen in any rectified block: how close the
    /// pass came to a rectifier kink. Infinite for tanh.
    pub min_preact_abs: f64,
}

impl Forward {
    /// Output of the last block — the classifier's feature space.
    pub fn last(&self) -> &FeatureBatch {
        self.blocks.last().expect("extractor has at least two blocks")
    }
}

#[inline]
fn apply(nl: Nonlinearity, z: f64) -> f64 {
    match nl {
        // max(0, z); the subgradient at exactly zero is taken as zero.
        Nonlinearity::Rectifier => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Nonlinearity::Tanh => z.tanh(),
    }
}

/// Derivative of the nonlinearity expressed in terms of its *output* (both
/// supported functions allow that).
#[inline]
fn slope_from_output(nl: Nonlinearity, a: f64) -> f64 {
    match nl {
        Nonlinearity::Rectifier => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::Tanh => 1.0 - a * a,
    }
}

/// Run the extractor, returning every block's output.
pub fn forward(params: &ModelParams, input: &FeatureBatch) -> Result<Forward> {
    if params.layers.is_empty() {
        return Err(Error::InvalidState("extractor has no layers".into()));
    }
    if input.dim() != params.layers[0].in_dim {
        return Err(Error::DimensionMismatch { expected: params.layers[0].in_dim, actual: input.dim() });
    }
    input.ensure_finite("extractor input")?;

    let n = input.rows();
    let last = params.layers.len() - 1;
    let mut blocks = Vec::with_capacity(params.layers.len());
    let mut min_preact_abs = f64::INFINITY;
    let mut prev: &FeatureBatch = input;

    let nl = params.nonlinearity;
    let track_kinks = matches!(nl, Nonlinearity::Rectifier);
    for (b, layer) in params.layers.iter().enumerate() {
        let mut out = FeatureBatch::zeros(n, layer.out_dim);
        for s in 0..n {
            let x = prev.row(s);
            let row = &mut out.data_mut()[s * layer.out_dim..(s + 1) * layer.out_dim];
            for (o, r) in row.iter_mut().enumerate() {
                let w = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut z = layer.bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    z += wi * xi;
                }
                if b < last {
                    if track_kinks {
                        min_preact_abs = min_preact_abs.min(z.abs());
                    }
                    *r = apply(nl, z);
                } else {
                    *r = z;
                }
            }
        }
        blocks.push(out);
        prev = blocks.last().unwrap();
    }

    Ok(Forward { input: input.clone(), blocks, min_preact_abs })
}

/// Backpropagate per-block output gradients into parameter gradients.
///
/// `block_grads[b]` is `dL/d(blocks[b])`; blocks that receive no loss pass a
/// zero batch. Returns gradients for every parameter tensor.
pub fn backward(params: &ModelParams, fwd: &Forward, block_grads: &[FeatureBatch]) -> Result<Gradients> {
    let layers = &params.layers;
    if fwd.blocks.len() != layers.len() {
        return Err(Error::InvalidState(format!(
            "forward pass has {} blocks but params have {} layers",
            fwd.blocks.len(),
            layers.len()
        )));
    }
    if block_grads.len() != layers.len() {
        return Err(Error::InvalidState(format!(
            "expected one gradient batch per block ({}), got {}",
            layers.len(),
            block_grads.len()
        )));
    }
    let n = fwd.input.rows();
    for (b, (g, out)) in block_grads.iter().zip(&fwd.blocks).enumerate() {
        if g.rows() != n || g.dim() != out.dim() {
            return Err(Error::InvalidState(format!(
                "block {b} gradient shape {}x{} does not match forward output {}x{}",
                g.rows(),
                g.dim(),
                n,
                out.dim()
            )));
        }
        if out.rows() != n {
            return Err(Error::InvalidState(format!("forward block {b} has {} rows, input has {n}", out.rows())));
        }
    }

    let mut grads = Gradients::zeros_like(params);
    let last = layers.len() - 1;
    // delta = dL/d(pre-activation of current block); start at the top.
    let mut delta = block_grads[last].clone();

    for b in (0..layers.len()).rev() {
        let layer = &layers[b];
        let below: &FeatureBatch = if b == 0 { &fwd.input } else { &fwd.blocks[b - 1] };

        // Parameter gradients for this layer.
        let dw = &mut grads.layer_weights[b];
        let db = &mut grads.layer_biases[b];
        for s in 0..n {
            let drow = delta.row(s);
            let arow = below.row(s);
            for (o, &g) in drow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let wrow = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, a) in wrow.iter_mut().zip(arow) {
                    *w += g * a;
                }
            }
        }

        if b == 0 {
            break;
        }

        // dL/d(activation of block b-1) = W^T delta + direct loss gradient,
        // then through the nonlinearity of block b-1.
        let mut next_delta = block_grads[b - 1].clone();
        for s in 0..n {
            let drow = delta.row(s);
            let start = s * layer.in_dim;
            for (o, &g) in drow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wrow = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let acc = &mut next_delta.data_mut()[start..start + layer.in_dim];
                for (a, w) in acc.iter_mut().zip(wrow) {
                    *a += g * w;
                }
            }
        }
        // Nonlinearity of block b-1 (it is never the last block here).
        let out_below = &fwd.blocks[b - 1];
        for s in 0..n {
            let arow_start = s * out_below.dim();
            for k in 0..out_below.dim() {
                let a = out_below.data()[arow_start + k];
                next_delta.data_mut()[arow_start + k] *= slope_from_output(params.nonlinearity, a);
            }
        }
        delta = next_delta;
    }

    Ok(grads)
}

/// Parameters plus optimizer state: everything that evolves during training.
#[derive(Debug, Clone)]
pub struct ExtractorState {
    pub params: ModelParams,
    pub opt: AdamState,
}

impl ExtractorState {
    pub fn new(params: ModelParams) -> Self {
        let opt = AdamState::zeros_like(&params);
        ExtractorState { params, opt }
    }
}
