//! Post-training uint8 quantization: calibration, per-tensor affine encode
//! and decode, an integer matmul kernel, and whole-model quantization.
//!
//! The scheme is asymmetric per-tensor affine: `q = round(x/scale) + zp`,
//! `x ~ scale * (q - zp)`. Calibration widens the observed range to include
//! zero so that 0.0 is always exactly representable, which keeps ReLU cutoffs
//! and zero padding lossless.

use crate::nn::{Activation, LayerSpec, ModelParams, ModelSpec, NnError};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Largest inner dimension the integer kernel accepts. Each product of
/// zero-centered factors is at most 255*255 = 65025, so 32768 terms stay
/// below 2^31 - 1 and the i32 accumulator cannot overflow.
pub const MAX_INNER_DIM: usize = 32768;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("dimension mismatch in quantized matmul: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch { lhs_rows: usize, lhs_cols: usize, rhs_rows: usize, rhs_cols: usize },
    #[error("bias has {got} entries for {want} output columns")]
    BiasLength { got: usize, want: usize },
    #[error("inner dimension {got} exceeds the integer accumulator bound {MAX_INNER_DIM}")]
    InnerDimTooLarge { got: usize },
    #[error("calibration saw no values")]
    EmptyCalibration,
    #[error("calibration batch has {got} feature columns, model expects {want}")]
    CalibrationWidth { got: usize, want: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Format(#[from] QuantFormatError),
}

/// Scale and zero point of one affine-quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: u8,
}

impl QuantParams {
    /// Worst-case round-trip error for in-range values.
    pub fn max_round_trip_error(&self) -> f32 {
        self.scale * 0.5
    }
}

/// Derives quantization parameters from observed values.
///
/// The range is widened to include zero before computing the scale, so a
/// range that is entirely positive or entirely negative still represents 0.0
/// exactly. An all-zero range falls back to scale 1.0 with a centered zero
/// point; seeing no values at all is an error.
pub fn calibrate(values: &[f32]) -> Result<QuantParams, QuantError> {
    if values.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let mut min = 0.0f32;
    let mut max = 0.0f32;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min == max {
        return Ok(QuantParams { scale: 1.0, zero_point: 128 });
    }
    let scale = (max - min) / 255.0;
    let zero_point = (-min / scale).round().clamp(0.0, 255.0) as u8;
    Ok(QuantParams { scale, zero_point })
}

/// [`calibrate`] over a stream of tensors.
pub fn calibrate_tensors<'a>(
    tensors: impl IntoIterator<Item = &'a Tensor>,
) -> Result<QuantParams, QuantError> {
    let mut seen = false;
    let mut min = 0.0f32;
    let mut max = 0.0f32;
    for t in tensors {
        for &v in t.data() {
            seen = true;
            min = min.min(v);
            max = max.max(v);
        }
    }
    if !seen {
        return Err(QuantError::EmptyCalibration);
    }
    if min == max {
        return Ok(QuantParams { scale: 1.0, zero_point: 128 });
    }
    let scale = (max - min) / 255.0;
    let zero_point = (-min / scale).round().clamp(0.0, 255.0) as u8;
    Ok(QuantParams { scale, zero_point })
}

/// Encodes one value: `clamp(round(x/scale) + zero_point, 0, 255)`.
#[inline]
pub fn quantize(x: f32, p: QuantParams) -> u8 {
    ((x / p.scale).round() + p.zero_point as f32).clamp(0.0, 255.0) as u8
}

/// Decodes one value: `scale * (q - zero_point)`.
#[inline]
pub fn dequantize(q: u8, p: QuantParams) -> f32 {
    p.scale * (q as i32 - p.zero_point as i32) as f32
}

pub fn quantize_slice(xs: &[f32], p: QuantParams) -> Vec<u8> {
    xs.iter().map(|&x| quantize(x, p)).collect()
}

pub fn dequantize_slice(qs: &[u8], p: QuantParams) -> Vec<f32> {
    qs.iter().map(|&q| dequantize(q, p)).collect()
}

/// A 2-D uint8 tensor with its quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    /// Calibrates on the tensor's own values and quantizes it.
    pub fn from_tensor(t: &Tensor) -> Result<Self, QuantError> {
        Ok(Self::with_params(t, calibrate(t.data())?))
    }

    pub fn with_params(t: &Tensor, params: QuantParams) -> Self {
        QuantizedTensor {
            rows: t.rows(),
            cols: t.cols(),
            data: quantize_slice(t.data(), params),
            params,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, dequantize_slice(&self.data, self.params))
            .expect("length preserved by construction")
    }
}

/// Zero-centered transpose of a quantized matrix: entry `[j][k]` holds
/// `q[k][j] - zero_point` as i16. This is the layout the inner loop wants:
/// contiguous dot products of i16 pairs accumulated in i32.
fn center_transpose(t: &QuantizedTensor) -> Vec<i16> {
    let zp = t.params.zero_point as i16;
    let mut out = vec![0i16; t.rows * t.cols];
    for k in 0..t.rows {
        for j in 0..t.cols {
            out[j * t.rows + k] = t.data[k * t.cols + j] as i16 - zp;
        }
    }
    out
}

/// Integer matmul core: `a` is quantized row-major `m x k`, `bt_centered` is
/// the zero-centered transpose of the right operand (`n x k` i16). Writes
/// dequantized f32 results (plus bias when given) for rows `i0..i1`.
#[allow(clippy::too_many_arguments)]
fn q_matmul_rows(
    a_data: &[u8],
    a_zp: i16,
    bt_centered: &[i16],
    k: usize,
    n: usize,
    i0: usize,
    i1: usize,
    scale: f32,
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let mut a_row = vec![0i16; k];
    for i in i0..i1 {
        for (dst, &q) in a_row.iter_mut().zip(&a_data[i * k..i * k + k]) {
            *dst = q as i16 - a_zp;
        }
        let out_row = &mut out[(i - i0) * n..(i - i0) * n + n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_col = &bt_centered[j * k..j * k + k];
            let mut acc = 0i32;
            for (&av, &bv) in a_row.iter().zip(b_col) {
                acc += av as i32 * bv as i32;
            }
            *o = scale * acc as f32;
            if let Some(bias) = bias {
                *o += bias[j];
            }
        }
    }
}

fn q_matmul_centered(
    a: &QuantizedTensor,
    bt_centered: &[i16],
    n: usize,
    b_scale: f32,
    bias: Option<&[f32]>,
    threads: usize,
) -> Tensor {
    let k = a.cols;
    let scale = a.params.scale * b_scale;
    let mut out = Tensor::zeros(a.rows, n);
    let threads = threads.max(1).min(a.rows.max(1));
    if threads == 1 || a.rows < 2 * threads {
        q_matmul_rows(
            &a.data,
            a.params.zero_point as i16,
            bt_centered,
            k,
            n,
            0,
            a.rows,
            scale,
            bias,
            out.data_mut(),
        );
        return out;
    }
    let chunk_sizes = crate::split_sizes(a.rows, threads);
    std::thread::scope(|scope| {
        let mut rest: &mut [f32] = out.data_mut();
        let mut row0 = 0usize;
        for &chunk in &chunk_sizes {
            let (head, tail) = rest.split_at_mut(chunk * n);
            rest = tail;
            let (i0, i1) = (row0, row0 + chunk);
            let a_data = &a.data;
            let a_zp = a.params.zero_point as i16;
            scope.spawn(move || {
                q_matmul_rows(a_data, a_zp, bt_centered, k, n, i0, i1, scale, bias, head);
            });
            row0 += chunk;
        }
    });
    out
}

/// Multiplies a quantized batch by quantized weights, adding an optional f32
/// bias row, and returns dequantized f32 output.
///
/// Zero-centered terms accumulate exactly in i32, so the result equals
/// `dequantize(a) x dequantize(b) (+ bias)` up to final f32 rounding,
/// whatever the evaluation order. The next layer re-quantizes this output
/// against its own input parameters; nothing here clamps back to uint8.
pub fn quantized_matmul(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    bias: Option<&[f32]>,
) -> Result<Tensor, QuantError> {
    quantized_matmul_with(a, b, bias, 1)
}

/// [`quantized_matmul`] across `threads` workers. Integer accumulation makes
/// every thread count produce identical bytes.
pub fn quantized_matmul_with(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    bias: Option<&[f32]>,
    threads: usize,
) -> Result<Tensor, QuantError> {
    if a.cols != b.rows {
        return Err(QuantError::ShapeMismatch {
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    if let Some(bias) = bias {
        if bias.len() != b.cols {
            return Err(QuantError::BiasLength { got: bias.len(), want: b.cols });
        }
    }
    if a.cols > MAX_INNER_DIM {
        return Err(QuantError::InnerDimTooLarge { got: a.cols });
    }
    let bt = center_transpose(b);
    Ok(q_matmul_centered(a, &bt, b.cols, b.params.scale, bias, threads))
}

/// One quantized dense layer: uint8 weights, f32 bias, and the quantization
/// parameters of the activations entering and leaving the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub weight: QuantizedTensor,
    pub bias: Vec<f32>,
    pub input_params: QuantParams,
    pub output_params: QuantParams,
    centered_wt: Vec<i16>,
}

impl QuantizedLayer {
    fn new(
        weight: QuantizedTensor,
        bias: Vec<f32>,
        input_params: QuantParams,
        output_params: QuantParams,
    ) -> Self {
        let centered_wt = center_transpose(&weight);
        QuantizedLayer { weight, bias, input_params, output_params, centered_wt }
    }
}

/// A fully quantized model ready for int8 inference.
///
/// Activations flow through in f32 between layers (softmax output always
/// stays f32); each layer re-quantizes its input against the calibrated
/// parameters before the integer matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: ModelSpec,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, QuantError> {
        self.forward_with(batch, 1)
    }

    /// Int8 forward pass across `threads` workers; bit-identical for every
    /// thread count.
    pub fn forward_with(&self, batch: &Tensor, threads: usize) -> Result<Tensor, QuantError> {
        if batch.cols() != self.spec.input_dim() {
            return Err(QuantError::Nn(NnError::BatchWidth {
                got: batch.cols(),
                want: self.spec.input_dim(),
            }));
        }
        let mut a = batch.clone();
        for (layer, spec_layer) in self.layers.iter().zip(&self.spec.layers) {
            let k = layer.weight.rows();
            if k > MAX_INNER_DIM {
                return Err(QuantError::InnerDimTooLarge { got: k });
            }
            let a_q = QuantizedTensor::with_params(&a, layer.input_params);
            let z = q_matmul_centered(
                &a_q,
                &layer.centered_wt,
                layer.weight.cols(),
                layer.weight.params().scale,
                Some(&layer.bias),
                threads,
            );
            a = apply_activation_f32(spec_layer.activation, &z);
        }
        Ok(a)
    }
}

fn apply_activation_f32(act: Activation, z: &Tensor) -> Tensor {
    // Same definitions as the fp32 engine; duplicated locally because the nn
    // module keeps its activation application private.
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

/// Quantizes a trained model. Weights calibrate on their own values; each
/// layer's input and output activations calibrate on a representative batch
/// pushed through the fp32 model.
pub fn quantize_model(
    spec: &ModelSpec,
    params: &ModelParams,
    calibration: &Tensor,
) -> Result<QuantizedModel, QuantError> {
    spec.validate()?;
    if calibration.rows() == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    if calibration.cols() != spec.input_dim() {
        return Err(QuantError::CalibrationWidth {
            got: calibration.cols(),
            want: spec.input_dim(),
        });
    }
    // Collect the fp32 activations entering and leaving every layer.
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(calibration.clone());
    for p in &params.layers {
        let spec_layer = &spec.layers[acts.len() - 1];
        let mut z = acts.last().unwrap().matmul(&p.weight).map_err(NnError::from)?;
        let cols = z.cols();
        for r in 0..z.rows() {
            let row = &mut z.data_mut()[r * cols..(r + 1) * cols];
            for (v, &b) in row.iter_mut().zip(p.bias.data()) {
                *v += b;
            }
        }
        acts.push(apply_activation_f32(spec_layer.activation, &z));
    }

    let mut layers = Vec::with_capacity(spec.layers.len());
    for (l, p) in params.layers.iter().enumerate() {
        layers.push(QuantizedLayer::new(
            QuantizedTensor::from_tensor(&p.weight)?,
            p.bias.data().to_vec(),
            calibrate(acts[l].data())?,
            calibrate(acts[l + 1].data())?,
        ));
    }
    Ok(QuantizedModel { spec: spec.clone(), layers })
}

// --- Quantized model file format --------------------------------------------
//
// Byte layout, little-endian throughout:
//
//   magic   4 bytes  "SPQ1"
//   version u16      currently 1
//   layers  u16
//   per layer:
//     input_dim     u32
//     output_dim    u32
//     activation    u8
//     weight scale  f32, weight zero point u8
//     input scale   f32, input zero point u8
//     output scale  f32, output zero point u8
//     weight bytes  input_dim*output_dim u8, row-major
//     bias          output_dim f32
//   loss    u8

pub const QUANT_MAGIC: [u8; 4] = *b"SPQ1";
pub const QUANT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum QuantFormatError {
    #[error("bad quantized model magic \"{}\", expected \"SPQ1\"", .0.escape_ascii())]
    BadMagic([u8; 4]),
    #[error("unsupported quantized model version {0}")]
    BadVersion(u16),
    #[error("quantized model truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("{0} trailing bytes after quantized model payload")]
    TrailingBytes(usize),
    #[error("unknown activation code {0}")]
    BadActivationCode(u8),
    #[error("unknown loss code {0}")]
    BadLossCode(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_quantized(model: &QuantizedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&QUANT_MAGIC);
    out.extend_from_slice(&QUANT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u16).to_le_bytes());
    for (layer, spec_layer) in model.layers.iter().zip(&model.spec.layers) {
        out.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        out.push(spec_layer.activation.code());
        out.extend_from_slice(&layer.weight.params().scale.to_le_bytes());
        out.push(layer.weight.params().zero_point);
        out.extend_from_slice(&layer.input_params.scale.to_le_bytes());
        out.push(layer.input_params.zero_point);
        out.extend_from_slice(&layer.output_params.scale.to_le_bytes());
        out.push(layer.output_params.zero_point);
        out.extend_from_slice(layer.weight.data());
        for &b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.push(model.spec.loss.code());
    out
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel, QuantFormatError> {
    struct Cur<'a> {
        buf: &'a [u8],
        pos: usize,
    }
    impl<'a> Cur<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], QuantFormatError> {
            if self.pos + n > self.buf.len() {
                return Err(QuantFormatError::Truncated { needed: self.pos + n - self.buf.len() });
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u8(&mut self) -> Result<u8, QuantFormatError> {
            Ok(self.take(1)?[0])
        }
        fn u16(&mut self) -> Result<u16, QuantFormatError> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
        }
        fn u32(&mut self) -> Result<u32, QuantFormatError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn f32(&mut self) -> Result<f32, QuantFormatError> {
            Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn qparams(&mut self) -> Result<QuantParams, QuantFormatError> {
            Ok(QuantParams { scale: self.f32()?, zero_point: self.u8()? })
        }
    }

    let mut cur = Cur { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != QUANT_MAGIC {
        return Err(QuantFormatError::BadMagic(magic));
    }
    let version = cur.u16()?;
    if version != QUANT_VERSION {
        return Err(QuantFormatError::BadVersion(version));
    }
    let n_layers = cur.u16()? as usize;
    let mut spec_layers = Vec::with_capacity(n_layers);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let input_dim = cur.u32()? as usize;
        let output_dim = cur.u32()? as usize;
        let activation = match cur.u8()? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Softmax,
            other => return Err(QuantFormatError::BadActivationCode(other)),
        };
        let w_params = cur.qparams()?;
        let in_params = cur.qparams()?;
        let out_params = cur.qparams()?;
        let w_data = cur.take(input_dim * output_dim)?.to_vec();
        let mut bias = Vec::with_capacity(output_dim);
        for _ in 0..output_dim {
            bias.push(cur.f32()?);
        }
        let weight =
            QuantizedTensor { rows: input_dim, cols: output_dim, data: w_data, params: w_params };
        spec_layers.push(LayerSpec { input_dim, output_dim, activation });
        layers.push(QuantizedLayer::new(weight, bias, in_params, out_params));
    }
    let loss = match cur.u8()? {
        0 => crate::nn::LossKind::Mse,
        1 => crate::nn::LossKind::CrossEntropy,
        other => return Err(QuantFormatError::BadLossCode(other)),
    };
    if cur.pos != bytes.len() {
        return Err(QuantFormatError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(QuantizedModel { spec: ModelSpec { layers: spec_layers, loss }, layers })
}

pub fn save_quantized(path: &Path, model: &QuantizedModel) -> Result<(), QuantFormatError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_quantized(model))?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel, QuantFormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_quantized(&bytes)
}
