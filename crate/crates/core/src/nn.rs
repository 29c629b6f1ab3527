//! Dense multilayer perceptrons: specs, parameters, forward/backward passes,
//! SGD updates, and a binary checkpoint format.
//!
//! Training state is split into an immutable [`ModelSpec`] (architecture) and
//! mutable [`ModelParams`] (weights and biases). All math is plain f32 on
//! [`Tensor`]s; the backward pass returns gradients of the mean batch loss so
//! a gradient average across replicas equals the gradient of the union batch.

use crate::tensor::{Tensor, TensorError, DEFAULT_BLOCK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model spec has no layers")]
    EmptyModel,
    #[error("layer {layer} has a zero dimension")]
    ZeroDim { layer: usize },
    #[error("layer {layer} expects input dim {expected} but previous layer produces {got}")]
    ChainMismatch { layer: usize, expected: usize, got: usize },
    #[error("softmax on layer {layer} is only supported as the final activation")]
    SoftmaxNotFinal { layer: usize },
    #[error("cross-entropy loss requires a softmax final activation")]
    CrossEntropyNeedsSoftmax,
    #[error("batch has {got} feature columns, model expects {want}")]
    BatchWidth { got: usize, want: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("target shape {got_rows}x{got_cols} does not match expected {want_rows}x{want_cols}")]
    TargetShape { got_rows: usize, got_cols: usize, want_rows: usize, want_cols: usize },
    #[error("class label {value} at row {row} is not an integer in [0, {classes})")]
    BadLabel { value: f32, row: usize, classes: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CheckpointError> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Softmax),
            other => Err(CheckpointError::BadActivationCode(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn code(self) -> u8 {
        match self {
            LossKind::Mse => 0,
            LossKind::CrossEntropy => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CheckpointError> {
        match code {
            0 => Ok(LossKind::Mse),
            1 => Ok(LossKind::CrossEntropy),
            other => Err(CheckpointError::BadLossCode(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

impl ModelSpec {
    /// Checks structural consistency: at least one layer, positive dims,
    /// chained dims, softmax only at the end, and cross-entropy only with a
    /// softmax head.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::EmptyModel);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(NnError::ZeroDim { layer: i });
            }
            if i > 0 {
                let prev = self.layers[i - 1].output_dim;
                if layer.input_dim != prev {
                    return Err(NnError::ChainMismatch {
                        layer: i,
                        expected: layer.input_dim,
                        got: prev,
                    });
                }
            }
            if layer.activation == Activation::Softmax && i != self.layers.len() - 1 {
                return Err(NnError::SoftmaxNotFinal { layer: i });
            }
        }
        if self.loss == LossKind::CrossEntropy
            && self.layers.last().unwrap().activation != Activation::Softmax
        {
            return Err(NnError::CrossEntropyNeedsSoftmax);
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }
}

/// Weights and biases for one layer: weight is `input_dim x output_dim`,
/// bias is `1 x output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.data().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Copies every parameter into one flat vector: layer by layer, weights
    /// (row-major) then biases. The layout is the contract for gradient
    /// exchange between replicas.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this value's own shapes.
    pub fn unflatten_like(&self, flat: &[f32]) -> Result<ModelParams, NnError> {
        if flat.len() != self.len() {
            return Err(NnError::Tensor(TensorError::BadLength {
                len: flat.len(),
                rows: self.len(),
                cols: 1,
            }));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            let w_len = layer.weight.data().len();
            let weight = Tensor::from_vec(
                layer.weight.rows(),
                layer.weight.cols(),
                flat[off..off + w_len].to_vec(),
            )?;
            off += w_len;
            let b_len = layer.bias.data().len();
            let bias =
                Tensor::from_vec(1, b_len, flat[off..off + b_len].to_vec())?;
            off += b_len;
            layers.push(LayerParams { weight, bias });
        }
        Ok(ModelParams { layers })
    }
}

/// Initializes parameters for `spec`: weights uniform in `±1/sqrt(input_dim)`
/// per layer, biases zero. The draw order is fixed (layers in order, weights
/// row-major), so a given seed always produces identical parameters.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let limit = 1.0 / (layer.input_dim as f32).sqrt();
        let data: Vec<f32> = (0..layer.input_dim * layer.output_dim)
            .map(|_| {
                let u: f32 = rng.gen();
                limit * (2.0 * u - 1.0)
            })
            .collect();
        layers.push(LayerParams {
            weight: Tensor::from_vec(layer.input_dim, layer.output_dim, data)?,
            bias: Tensor::zeros(1, layer.output_dim),
        });
    }
    Ok(ModelParams { layers })
}

fn apply_activation(act: Activation, z: &Tensor) -> Tensor {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => {
            let data = z.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::from_vec(z.rows(), z.cols(), data).unwrap()
        }
        Activation::Softmax => {
            let mut out = Tensor::zeros(z.rows(), z.cols());
            for r in 0..z.rows() {
                let row = z.row(r);
                let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0f32;
                let out_row = &mut out.data_mut()[r * z.cols()..(r + 1) * z.cols()];
                for (o, &v) in out_row.iter_mut().zip(row) {
                    let e = (v - max).exp();
                    *o = e;
                    sum += e;
                }
                for o in out_row.iter_mut() {
                    *o /= sum;
                }
            }
            out
        }
    }
}

fn layer_forward(
    input: &Tensor,
    layer: &LayerParams,
    act: Activation,
    threads: usize,
    block: usize,
) -> Result<(Tensor, Tensor), NnError> {
    let mut z = input.matmul_with(&layer.weight, threads, block)?;
    let bias = layer.bias.data();
    let cols = z.cols();
    for r in 0..z.rows() {
        let row = &mut z.data_mut()[r * cols..(r + 1) * cols];
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    let a = apply_activation(act, &z);
    Ok((z, a))
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<(), NnError> {
    if batch.cols() != spec.input_dim() {
        return Err(NnError::BatchWidth { got: batch.cols(), want: spec.input_dim() });
    }
    Ok(())
}

/// Runs the forward pass and returns the final activation, `B x output_dim`.
pub fn forward(spec: &ModelSpec, params: &ModelParams, batch: &Tensor) -> Result<Tensor, NnError> {
    forward_with(spec, params, batch, 1, DEFAULT_BLOCK)
}

/// [`forward`] with an explicit thread count and matmul tile edge. The result
/// is bit-identical to the single-thread default.
pub fn forward_with(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    threads: usize,
    block: usize,
) -> Result<Tensor, NnError> {
    check_batch(spec, batch)?;
    let mut a = batch.clone();
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        let (_, next) = layer_forward(&a, p, layer.activation, threads, block)?;
        a = next;
    }
    Ok(a)
}

fn check_targets(spec: &ModelSpec, batch: &Tensor, targets: &Tensor) -> Result<(), NnError> {
    let classes = spec.output_dim();
    match spec.loss {
        LossKind::Mse => {
            if targets.rows() != batch.rows() || targets.cols() != classes {
                return Err(NnError::TargetShape {
                    got_rows: targets.rows(),
                    got_cols: targets.cols(),
                    want_rows: batch.rows(),
                    want_cols: classes,
                });
            }
        }
        LossKind::CrossEntropy => {
            if targets.rows() != batch.rows() || targets.cols() != 1 {
                return Err(NnError::TargetShape {
                    got_rows: targets.rows(),
                    got_cols: targets.cols(),
                    want_rows: batch.rows(),
                    want_cols: 1,
                });
            }
            for r in 0..targets.rows() {
                let v = targets.at(r, 0);
                if v.fract() != 0.0 || v < 0.0 || v >= classes as f32 {
                    return Err(NnError::BadLabel { value: v, row: r, classes });
                }
            }
        }
    }
    Ok(())
}

/// Mean loss of predictions against targets.
///
/// MSE averages squared error over every output element. Cross-entropy takes
/// `targets` as a `B x 1` column of class indices and averages `-ln p[class]`
/// over rows.
pub fn loss_value(
    spec: &ModelSpec,
    preds: &Tensor,
    targets: &Tensor,
) -> Result<f32, NnError> {
    match spec.loss {
        LossKind::Mse => {
            if preds.rows() == 0 {
                return Err(NnError::EmptyBatch);
            }
            let mut sum = 0.0f32;
            for (&p, &t) in preds.data().iter().zip(targets.data()) {
                let d = p - t;
                sum += d * d;
            }
            Ok(sum / (preds.rows() * preds.cols()) as f32)
        }
        LossKind::CrossEntropy => {
            if preds.rows() == 0 {
                return Err(NnError::EmptyBatch);
            }
            let mut sum = 0.0f32;
            for r in 0..preds.rows() {
                let class = targets.at(r, 0) as usize;
                sum -= preds.at(r, class).ln();
            }
            Ok(sum / preds.rows() as f32)
        }
    }
}

/// Gradients with the same shapes as [`ModelParams`].
pub type Gradients = ModelParams;

/// Runs forward and backward, returning the mean batch loss and gradients of
/// that loss with respect to every parameter.
pub fn backward(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    targets: &Tensor,
) -> Result<(f32, Gradients), NnError> {
    backward_with(spec, params, batch, targets, 1, DEFAULT_BLOCK)
}

/// [`backward`] with an explicit thread count and matmul tile edge.
pub fn backward_with(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    targets: &Tensor,
    threads: usize,
    block: usize,
) -> Result<(f32, Gradients), NnError> {
    check_batch(spec, batch)?;
    if batch.rows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    check_targets(spec, batch, targets)?;

    // Forward pass, caching pre-activations and activations per layer.
    let mut zs = Vec::with_capacity(spec.layers.len());
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(batch.clone());
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        let (z, a) = layer_forward(acts.last().unwrap(), p, layer.activation, threads, block)?;
        zs.push(z);
        acts.push(a);
    }
    let output = acts.last().unwrap();
    let loss = loss_value(spec, output, targets)?;
    let b = batch.rows() as f32;

    // Seed the backward pass with dZ for the final layer. Cross-entropy fuses
    // with softmax into (p - onehot)/B; MSE differentiates the loss and then
    // walks back through the final activation like any other layer.
    let last = spec.layers.len() - 1;
    let mut dz = match spec.loss {
        LossKind::CrossEntropy => {
            let mut dz = output.clone();
            let cols = dz.cols();
            for r in 0..dz.rows() {
                let class = targets.at(r, 0) as usize;
                let row = &mut dz.data_mut()[r * cols..(r + 1) * cols];
                row[class] -= 1.0;
                for v in row.iter_mut() {
                    *v /= b;
                }
            }
            dz
        }
        LossKind::Mse => {
            let scale = 2.0 / (output.rows() * output.cols()) as f32;
            let data = output
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&p, &t)| scale * (p - t))
                .collect();
            let da = Tensor::from_vec(output.rows(), output.cols(), data)?;
            activation_backward(spec.layers[last].activation, &zs[last], output, &da)
        }
    };

    let mut grads: Vec<LayerParams> = Vec::with_capacity(spec.layers.len());
    for l in (0..spec.layers.len()).rev() {
        let a_prev = &acts[l];
        let dw = a_prev.transpose().matmul_with(&dz, threads, block)?;
        let mut db = Tensor::zeros(1, dz.cols());
        for r in 0..dz.rows() {
            let row = dz.row(r).to_vec();
            let acc = db.data_mut();
            for (o, v) in acc.iter_mut().zip(row) {
                *o += v;
            }
        }
        grads.push(LayerParams { weight: dw, bias: db });
        if l > 0 {
            let da_prev = dz.matmul_with(&params.layers[l].weight.transpose(), threads, block)?;
            dz = activation_backward(spec.layers[l - 1].activation, &zs[l - 1], &acts[l], &da_prev);
        }
    }
    grads.reverse();
    Ok((loss, ModelParams { layers: grads }))
}

/// Maps dLoss/dActivation to dLoss/dPreActivation for one layer.
fn activation_backward(act: Activation, z: &Tensor, a: &Tensor, da: &Tensor) -> Tensor {
    match act {
        Activation::Identity => da.clone(),
        Activation::Relu => {
            let data = z
                .data()
                .iter()
                .zip(da.data())
                .map(|(&zv, &dv)| if zv > 0.0 { dv } else { 0.0 })
                .collect();
            Tensor::from_vec(z.rows(), z.cols(), data).unwrap()
        }
        Activation::Softmax => {
            // Full Jacobian product per row: dz_j = a_j * (da_j - sum_k da_k a_k).
            let mut out = Tensor::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let a_row = a.row(r);
                let da_row = da.row(r);
                let dot: f32 = a_row.iter().zip(da_row).map(|(&x, &y)| x * y).sum();
                let out_row = &mut out.data_mut()[r * a.cols()..(r + 1) * a.cols()];
                for ((o, &av), &dv) in out_row.iter_mut().zip(a_row).zip(da_row) {
                    *o = av * (dv - dot);
                }
            }
            out
        }
    }
}

/// One plain SGD update: `param -= lr * grad`, elementwise, in place.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f32) {
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        for (w, &gw) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= lr * gw;
        }
        for (b, &gb) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= lr * gb;
        }
    }
}

/// Index of the largest entry per row.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// --- Checkpoint format -----------------------------------------------------
//
// Byte layout, all integers and floats little-endian:
//
//   magic   4 bytes  "SPNN"
//   version u16      currently 1
//   layers  u16      layer count
//   per layer:
//     input_dim  u32
//     output_dim u32
//     activation u8   0=identity 1=relu 2=softmax
//     weight     input_dim*output_dim f32, row-major
//     bias       output_dim f32
//   loss    u8       0=mse 1=cross-entropy

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic \"{}\", expected \"SPNN\"", .0.escape_ascii())]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("unknown activation code {0}")]
    BadActivationCode(u8),
    #[error("unknown loss code {0}")]
    BadLossCode(u8),
    #[error("checkpoint declares more than 65535 layers")]
    TooManyLayers,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializes a model to the checkpoint byte format.
pub fn encode_model(spec: &ModelSpec, params: &ModelParams) -> Result<Vec<u8>, CheckpointError> {
    if spec.layers.len() > u16::MAX as usize {
        return Err(CheckpointError::TooManyLayers);
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.layers.len() as u16).to_le_bytes());
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        out.extend_from_slice(&(layer.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(layer.output_dim as u32).to_le_bytes());
        out.push(layer.activation.code());
        for &w in p.weight.data() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in p.bias.data() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.push(spec.loss.code());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { needed: self.pos + n - self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses a checkpoint byte buffer back into a spec and parameters.
pub fn decode_model(bytes: &[u8]) -> Result<(ModelSpec, ModelParams), CheckpointError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let n_layers = cur.u16()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    let mut params = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let input_dim = cur.u32()? as usize;
        let output_dim = cur.u32()? as usize;
        let activation = Activation::from_code(cur.u8()?)?;
        let weight = Tensor::from_vec(input_dim, output_dim, cur.f32s(input_dim * output_dim)?)
            .expect("length matches by construction");
        let bias = Tensor::from_vec(1, output_dim, cur.f32s(output_dim)?)
            .expect("length matches by construction");
        layers.push(LayerSpec { input_dim, output_dim, activation });
        params.push(LayerParams { weight, bias });
    }
    let loss = LossKind::from_code(cur.u8()?)?;
    if cur.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok((ModelSpec { layers, loss }, ModelParams { layers: params }))
}

/// Writes a checkpoint file.
pub fn save_model(
    path: &Path,
    spec: &ModelSpec,
    params: &ModelParams,
) -> Result<(), CheckpointError> {
    let bytes = encode_model(spec, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_model(path: &Path) -> Result<(ModelSpec, ModelParams), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_of(dims: &[usize], acts: &[Activation], loss: LossKind) -> ModelSpec {
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(w, &a)| LayerSpec { input_dim: w[0], output_dim: w[1], activation: a })
            .collect();
        ModelSpec { layers, loss }
    }

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let empty = ModelSpec { layers: vec![], loss: LossKind::Mse };
        assert!(matches!(empty.validate(), Err(NnError::EmptyModel)));

        let chain = spec_of(&[3, 4], &[Activation::Identity], LossKind::Mse);
        let mut broken = chain.clone();
        broken.layers.push(LayerSpec {
            input_dim: 5,
            output_dim: 2,
            activation: Activation::Identity,
        });
        assert!(matches!(broken.validate(), Err(NnError::ChainMismatch { layer: 1, .. })));

        let mid_softmax = spec_of(
            &[3, 4, 2],
            &[Activation::Softmax, Activation::Identity],
            LossKind::Mse,
        );
        assert!(matches!(mid_softmax.validate(), Err(NnError::SoftmaxNotFinal { layer: 0 })));

        let ce_no_softmax = spec_of(&[3, 2], &[Activation::Identity], LossKind::CrossEntropy);
        assert!(matches!(ce_no_softmax.validate(), Err(NnError::CrossEntropyNeedsSoftmax)));

        let good = spec_of(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Softmax],
            LossKind::CrossEntropy,
        );
        good.validate().unwrap();
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = spec_of(&[9, 4, 2], &[Activation::Relu, Activation::Softmax], LossKind::CrossEntropy);
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, 43).unwrap();
        assert_ne!(a, c);
        let limit = 1.0 / 3.0;
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= limit));
        assert!(a.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_identity_network_is_affine() {
        // One identity layer computes x*W + b exactly.
        let spec = spec_of(&[2, 2], &[Activation::Identity], LossKind::Mse);
        let params = ModelParams {
            layers: vec![LayerParams {
                weight: Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]),
                bias: Tensor::from_rows(&[&[10.0, 20.0]]),
            }],
        };
        let out = forward(&spec, &params, &Tensor::from_rows(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(out.data(), &[13.0, 28.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let spec = spec_of(&[3, 5], &[Activation::Softmax], LossKind::CrossEntropy);
        let params = init_params(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_tensor(11, 3, &mut rng);
        let out = forward(&spec, &params, &batch).unwrap();
        for r in 0..out.rows() {
            let sum: f32 = out.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            assert!(out.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn losses_are_nonnegative_and_zero_at_perfect_fit() {
        let spec = spec_of(&[2, 2], &[Activation::Identity], LossKind::Mse);
        let preds = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(loss_value(&spec, &preds, &preds.clone()).unwrap(), 0.0);
        let off = Tensor::from_rows(&[&[2.0, 2.0], &[3.0, 4.0]]);
        // One element off by 1 over 4 elements: mse = 1/4.
        assert_eq!(loss_value(&spec, &off, &preds).unwrap(), 0.25);
    }

    #[test]
    fn cross_entropy_of_confident_correct_prediction_is_small() {
        let spec = spec_of(&[2, 2], &[Activation::Softmax], LossKind::CrossEntropy);
        let preds = Tensor::from_rows(&[&[0.99, 0.01]]);
        let targets = Tensor::from_rows(&[&[0.0]]);
        let loss = loss_value(&spec, &preds, &targets).unwrap();
        assert!(loss > 0.0 && loss < 0.02, "{loss}");
    }

    #[test]
    fn backward_rejects_empty_batch_and_bad_labels() {
        let spec = spec_of(&[2, 3], &[Activation::Softmax], LossKind::CrossEntropy);
        let params = init_params(&spec, 0).unwrap();
        let empty = Tensor::zeros(0, 2);
        let targets = Tensor::zeros(0, 1);
        assert!(matches!(
            backward(&spec, &params, &empty, &targets),
            Err(NnError::EmptyBatch)
        ));
        let batch = Tensor::from_rows(&[&[0.1, 0.2]]);
        let bad = Tensor::from_rows(&[&[3.0]]);
        assert!(matches!(
            backward(&spec, &params, &batch, &bad),
            Err(NnError::BadLabel { row: 0, .. })
        ));
        let frac = Tensor::from_rows(&[&[0.5]]);
        assert!(matches!(backward(&spec, &params, &batch, &frac), Err(NnError::BadLabel { .. })));
    }

    /// Central finite difference of the loss with respect to one parameter.
    fn fd_grad(
        spec: &ModelSpec,
        params: &ModelParams,
        batch: &Tensor,
        targets: &Tensor,
        layer: usize,
        weight: bool,
        idx: usize,
        h: f32,
    ) -> f64 {
        let probe = |delta: f32| -> f64 {
            let mut p = params.clone();
            let slot = if weight {
                &mut p.layers[layer].weight.data_mut()[idx]
            } else {
                &mut p.layers[layer].bias.data_mut()[idx]
            };
            *slot += delta;
            let out = forward(spec, &p, batch).unwrap();
            loss_value(spec, &out, targets).unwrap() as f64
        };
        (probe(h) - probe(-h)) / (2.0 * h as f64)
    }

    fn check_grads_against_fd(spec: &ModelSpec, seed: u64, batch_rows: usize) {
        let params = init_params(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let batch = random_tensor(batch_rows, spec.input_dim(), &mut rng);
        let targets = match spec.loss {
            LossKind::Mse => random_tensor(batch_rows, spec.output_dim(), &mut rng),
            LossKind::CrossEntropy => {
                let data = (0..batch_rows)
                    .map(|_| rng.gen_range(0..spec.output_dim()) as f32)
                    .collect();
                Tensor::from_vec(batch_rows, 1, data).unwrap()
            }
        };
        let (_, grads) = backward(spec, &params, &batch, &targets).unwrap();
        // Central differences truncate at O(h^2); with f32 loss evaluations the
        // noise floor rises as h shrinks. 5e-3 sits at the crossover: measured
        // agreement is ~3e-6 there versus ~2e-3 at h=1e-2 for softmax nets.
        let h = 5e-3f32;
        for layer in 0..spec.layers.len() {
            for (weight, count) in [
                (true, grads.layers[layer].weight.data().len()),
                (false, grads.layers[layer].bias.data().len()),
            ] {
                for idx in 0..count {
                    let fd = fd_grad(spec, &params, &batch, &targets, layer, weight, idx, h);
                    let got = if weight {
                        grads.layers[layer].weight.data()[idx] as f64
                    } else {
                        grads.layers[layer].bias.data()[idx] as f64
                    };
                    let tol = (1e-2 * fd.abs().max(got.abs())).max(1e-4);
                    assert!(
                        (fd - got).abs() <= tol,
                        "layer {layer} weight={weight} idx={idx}: fd={fd} got={got}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_mse() {
        let spec = spec_of(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Identity],
            LossKind::Mse,
        );
        check_grads_against_fd(&spec, 11, 4);
    }

    #[test]
    fn gradients_match_finite_differences_softmax_ce() {
        let spec = spec_of(
            &[4, 5, 3],
            &[Activation::Relu, Activation::Softmax],
            LossKind::CrossEntropy,
        );
        check_grads_against_fd(&spec, 13, 5);
    }

    #[test]
    fn gradients_match_finite_differences_softmax_mse() {
        // Softmax head under MSE exercises the full Jacobian path.
        let spec = spec_of(&[3, 3], &[Activation::Softmax], LossKind::Mse);
        check_grads_against_fd(&spec, 17, 3);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let spec = spec_of(&[2, 1], &[Activation::Identity], LossKind::Mse);
        let mut params = init_params(&spec, 3).unwrap();
        let batch = Tensor::from_rows(&[&[1.0, 2.0], &[-0.5, 0.25]]);
        let targets = Tensor::from_rows(&[&[2.0], &[1.0]]);
        let (before, grads) = backward(&spec, &params, &batch, &targets).unwrap();
        sgd_step(&mut params, &grads, 0.05);
        let out = forward(&spec, &params, &batch).unwrap();
        let after = loss_value(&spec, &out, &targets).unwrap();
        assert!(after < before, "loss should drop: {before} -> {after}");
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let spec = spec_of(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Identity],
            LossKind::Mse,
        );
        let params = init_params(&spec, 5).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.len());
        let back = params.unflatten_like(&flat).unwrap();
        assert_eq!(back, params);
        assert!(params.unflatten_like(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_golden_bytes() {
        // Tiny 1x1 identity model, built byte by byte by hand.
        let spec = spec_of(&[1, 1], &[Activation::Relu], LossKind::Mse);
        let params = ModelParams {
            layers: vec![LayerParams {
                weight: Tensor::from_rows(&[&[1.5]]),
                bias: Tensor::from_rows(&[&[-2.0]]),
            }],
        };
        let bytes = encode_model(&spec, &params).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"SPNN");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(1);
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.push(0);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = spec_of(
            &[5, 8, 3],
            &[Activation::Relu, Activation::Softmax],
            LossKind::CrossEntropy,
        );
        let params = init_params(&spec, 99).unwrap();
        let bytes = encode_model(&spec, &params).unwrap();
        let (spec2, params2) = decode_model(&bytes).unwrap();
        assert_eq!(spec2, spec);
        for (a, b) in params.layers.iter().zip(&params2.layers) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weight), bits(&b.weight));
            assert_eq!(bits(&a.bias), bits(&b.bias));
        }
    }

    #[test]
    fn checkpoint_decode_rejects_corruption() {
        let spec = spec_of(&[2, 2], &[Activation::Identity], LossKind::Mse);
        let params = init_params(&spec, 1).unwrap();
        let good = encode_model(&spec, &params).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = decode_model(&bad_magic).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic(_)), "{err}");
        assert!(err.to_string().contains('X'), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let err = decode_model(&bad_version).unwrap_err();
        assert!(err.to_string().contains('9'), "{err}");

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_model(truncated), Err(CheckpointError::Truncated { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_model(&trailing), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.spnn");
        let spec = spec_of(&[4, 2], &[Activation::Softmax], LossKind::CrossEntropy);
        let params = init_params(&spec, 21).unwrap();
        save_model(&path, &spec, &params).unwrap();
        let (spec2, params2) = load_model(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params, params2);
    }
}
